use super::{Graph, Real, TensorError, Var};

/// Compares the analytic gradient of `loss` with respect to `leaf` against
/// central differences obtained by replaying the graph with perturbed leaf
/// values. Returns the largest `|analytic - numeric| / max(1, |analytic|)`.
///
/// Intended for `f64` graphs; every frozen operand (masks, noise, indices)
/// is reused across replays.
pub fn finite_difference_check<T: Real>(
    graph: &mut Graph<T>,
    loss: Var,
    leaf: Var,
    epsilon: f64,
) -> Result<f64, TensorError> {
    if epsilon <= 0.0 {
        return Err(TensorError::Invalid {
            op: "finite_difference_check",
            reason: format!("epsilon must be positive, got {epsilon}"),
        });
    }
    let analytic = graph.backward(loss)?.get(leaf);
    let original = graph.value(leaf).clone();
    let eps = T::lit(epsilon);
    let mut worst = 0.0f64;
    for i in 0..original.len() {
        let mut plus = original.clone();
        plus.data_mut()[i] += eps;
        graph.set_leaf(leaf, plus)?;
        graph.replay()?;
        let up = graph.value(loss).item().as_f64();

        let mut minus = original.clone();
        minus.data_mut()[i] -= eps;
        graph.set_leaf(leaf, minus)?;
        graph.replay()?;
        let down = graph.value(loss).item().as_f64();

        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.data()[i].as_f64();
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    graph.set_leaf(leaf, original)?;
    graph.replay()?;
    Ok(worst)
}

/// [`finite_difference_check`] over several leaves; returns the worst error.
pub fn finite_difference_check_all<T: Real>(
    graph: &mut Graph<T>,
    loss: Var,
    leaves: &[Var],
    epsilon: f64,
) -> Result<f64, TensorError> {
    let mut worst = 0.0f64;
    for &leaf in leaves {
        worst = worst.max(finite_difference_check(graph, loss, leaf, epsilon)?);
    }
    Ok(worst)
}
