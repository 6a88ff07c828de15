//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod grad;

use bmp_core::eval::{EvalCurve, ScoreMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRID_POINTS: usize = 10_000;

/// Exhaustive top-`k` check: the truth is correct when fewer than `k` columns
/// beat it after adding `bias` to unseen columns (ties to the lower column).
/// An infinite bias is taken as the limit: unseen columns all move above (or
/// below) every seen column and keep their order among themselves.
pub fn oracle_correct(row: &[f64], unseen: &[bool], truth: usize, bias: f64, k: usize) -> bool {
    let adjusted = |j: usize| match (unseen[j], bias.is_finite()) {
        (false, _) => (0.0, row[j]),
        (true, true) => (0.0, row[j] + bias),
        (true, false) => (bias.signum(), row[j]),
    };
    let st = adjusted(truth);
    let ahead = (0..row.len())
        .filter(|&j| j != truth)
        .filter(|&j| adjusted(j) > st || (adjusted(j) == st && j < truth))
        .count();
    ahead < k
}

/// `(seen, unseen)` accuracy at one bias by brute force.
pub fn oracle_accuracy(m: &ScoreMatrix, bias: f64, k: usize) -> (f64, f64) {
    let (mut s_hit, mut s_n, mut u_hit, mut u_n) = (0, 0, 0, 0);
    for i in 0..m.n_images() {
        let ok = oracle_correct(m.row(i), m.unseen_columns(), m.truth()[i], bias, k);
        if m.is_unseen_image(i) {
            u_n += 1;
            u_hit += ok as usize;
        } else {
            s_n += 1;
            s_hit += ok as usize;
        }
    }
    (s_hit as f64 / s_n as f64, u_hit as f64 / u_n as f64)
}

/// Every bias at which some seen and some unseen column of a row meet.
pub fn oracle_breakpoints(m: &ScoreMatrix) -> Vec<f64> {
    let u = m.unseen_columns();
    let mut out = Vec::new();
    for i in 0..m.n_images() {
        let row = m.row(i);
        for (j, &uj) in u.iter().enumerate() {
            for (l, &ul) in u.iter().enumerate() {
                if uj && !ul {
                    out.push(row[l] - row[j]);
                }
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Evenly spaced biases covering every breakpoint with a margin.
pub fn dense_grid(m: &ScoreMatrix) -> Vec<f64> {
    let b = oracle_breakpoints(m);
    let lo = b.first().copied().unwrap_or(0.0) - 1.0;
    let hi = b.last().copied().unwrap_or(0.0) + 1.0;
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    (0..GRID_POINTS).map(|i| lo + step * i as f64).collect()
}

pub struct OracleCurve {
    pub points: Vec<(f64, f64, f64)>,
}

impl OracleCurve {
    /// Brute-force curve at `-inf`, the dense grid, every breakpoint and `+inf`.
    pub fn new(m: &ScoreMatrix, k: usize, with_breakpoints: bool) -> Self {
        let mut biases = dense_grid(m);
        if with_breakpoints {
            biases.extend(oracle_breakpoints(m));
        }
        biases.push(f64::NEG_INFINITY);
        biases.push(f64::INFINITY);
        biases.sort_by(f64::total_cmp);
        biases.dedup();
        let points = biases
            .into_iter()
            .map(|b| {
                let (s, u) = oracle_accuracy(m, b, k);
                (b, s, u)
            })
            .collect();
        OracleCurve { points }
    }

    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[0].1 - w[1].1).abs() * (w[0].2 + w[1].2) / 2.0)
            .sum()
    }

    pub fn best(&self) -> (f64, f64, f64) {
        let mut best = (0.0f64, 0.0f64, 0.0f64);
        for &(_, s, u) in &self.points {
            best.0 = best.0.max(s);
            best.1 = best.1.max(u);
            let h = if s + u > 0.0 {
                2.0 * s * u / (s + u)
            } else {
                0.0
            };
            best.2 = best.2.max(h);
        }
        best
    }
}

/// A random score matrix with at most 6 images and 6 pairs, at least one
/// seen and one unseen column, and images of both kinds. With `dyadic` the
/// scores are multiples of 1/16, so every gap and tie is exact in floating
/// point.
pub fn random_scores(seed: u64, dyadic: bool) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pairs = rng.random_range(2..=6);
    let n_unseen = rng.random_range(1..n_pairs);
    let mut unseen = vec![false; n_pairs];
    let mut cols: Vec<usize> = (0..n_pairs).collect();
    for _ in 0..n_unseen {
        let j = cols.swap_remove(rng.random_range(0..cols.len()));
        unseen[j] = true;
    }
    let seen_cols: Vec<usize> = (0..n_pairs).filter(|&j| !unseen[j]).collect();
    let unseen_cols: Vec<usize> = (0..n_pairs).filter(|&j| unseen[j]).collect();
    let n_images = rng.random_range(2..=6);
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for i in 0..n_images {
        let row: Vec<f64> = (0..n_pairs)
            .map(|_| {
                if dyadic {
                    -(rng.random_range(0..16) as f64) / 16.0
                } else {
                    -rng.random_range(0.0..1.0)
                }
            })
            .collect();
        scores.push(row);
        // the first image is seen, the second unseen, the rest random
        let pick_unseen = match i {
            0 => false,
            1 => true,
            _ => rng.random_bool(0.5),
        };
        let side = if pick_unseen {
            &unseen_cols
        } else {
            &seen_cols
        };
        truth.push(side[rng.random_range(0..side.len())]);
    }
    ScoreMatrix::new(scores, truth, unseen).unwrap()
}

/// Checks an exact curve against the oracle. Returns a description of the
/// first disagreement.
pub fn compare_with_oracle(
    m: &ScoreMatrix,
    curve: &EvalCurve,
    k: usize,
    exact_ties: bool,
) -> Result<(), String> {
    use bmp_core::eval::SweepIndex;
    let sweep = SweepIndex::new(m, k).map_err(|e| e.to_string())?;
    for b in dense_grid(m) {
        let (s, u) = sweep.accuracy_at(b);
        let (os, ou) = oracle_accuracy(m, b, k);
        if (s, u) != (os, ou) {
            return Err(format!("bias {b}: sweep ({s}, {u}) oracle ({os}, {ou})"));
        }
    }
    for p in &curve.points {
        if !exact_ties && p.bias.is_finite() && oracle_breakpoints(m).contains(&p.bias) {
            continue;
        }
        let (os, ou) = oracle_accuracy(m, p.bias, k);
        if (p.seen, p.unseen) != (os, ou) {
            return Err(format!("curve point {p:?}: oracle ({os}, {ou})"));
        }
    }
    Ok(())
}
