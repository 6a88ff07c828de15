use super::ops::{self, Op};
use super::{Real, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    /// Leaf with requires_grad, or any input needing a gradient.
    tracks: bool,
}

/// Tape of operations. Nodes are appended after their inputs, so index order is
/// a topological order and reverse index order is valid for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`]: one gradient slot per node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros if the loss does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            tracks: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Learnable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Overwrites the value of a leaf. Downstream values are stale until
    /// [`Graph::replay`] runs.
    pub fn set_leaf(&mut self, var: Var, value: Tensor<T>) -> Result<(), TensorError> {
        let node = &mut self.nodes[var.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(TensorError::Invalid {
                op: "set_leaf",
                reason: format!("node {} is not a leaf", var.0),
            });
        }
        if node.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_leaf",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Records `op` applied to `inputs`.
    pub fn apply(&mut self, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            ops::forward(&op, &vals)?
        };
        let tracks = inputs.iter().any(|v| self.nodes[v.0].tracks);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad: false,
            tracks,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Recomputes every non-leaf value in topological order, keeping the frozen
    /// operands stored in each op.
    pub fn replay(&mut self) -> Result<(), TensorError> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let vals: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                ops::forward(&node.op, &vals)?
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracks || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].tracks).collect();
            let input_grads = ops::backward(&node.op, &inputs, &node.value, &g, &needs);
            for (var, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
            // keep the loss gradient visible to callers
            if i == loss.0 {
                grads[i] = Some(g);
            }
        }
        // Interior gradients were consumed; only leaves (and the loss) remain.
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    // ---- builders -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn batched_matvec(&mut self, u: Var, v: Var) -> Result<Var, TensorError> {
        self.apply(Op::BatchedMatVec, &[u, v])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.apply(Op::AddRow, &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn offset(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        self.apply(Op::Offset(c), &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.apply(Op::Concat, parts)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var, TensorError> {
        self.apply(Op::GatherRows(rows), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var, TensorError> {
        self.apply(Op::LeakyRelu(slope), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Log, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Softplus, &[a])
    }

    pub fn masked_softmax(
        &mut self,
        a: Var,
        ends: Vec<usize>,
        blocked: Vec<bool>,
    ) -> Result<Var, TensorError> {
        self.apply(Op::MaskedSoftmax { ends, blocked }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::LogSoftmax, &[a])
    }

    pub fn pick_cols(&mut self, a: Var, cols: Vec<usize>) -> Result<Var, TensorError> {
        self.apply(Op::PickCols(cols), &[a])
    }

    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::Distance, &[a, b])
    }

    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::SquaredDistance, &[a, b])
    }

    pub fn reparameterize(
        &mut self,
        mu: Var,
        logvar: Var,
        noise: Tensor<T>,
    ) -> Result<Var, TensorError> {
        self.apply(Op::Reparameterize(noise), &[mu, logvar])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Mean, &[a])
    }
}
