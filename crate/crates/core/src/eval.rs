//! Pair scoring and the calibrated seen/unseen evaluation protocol.
//!
//! Every image gets one score per candidate pair, the negated sum of the
//! attribute and object feature distances. A calibration bias is added to the
//! unseen columns; sweeping it from `-inf` to `+inf` traces the seen/unseen
//! accuracy curve.
//!
//! The sweep is exact. For each image and `k` there is one critical bias `c`:
//! a seen-labelled image is correct iff `b < c`, an unseen-labelled one iff
//! `b > c` (plus a tie rule at `b == c`). The curve therefore only changes at
//! the critical values, and sampling every critical value plus one point inside
//! every open interval between them recovers it completely.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Real, Tensor};
use crate::universe::{Pair, PairUniverse};
use crate::visual::EncodeMode;

/// Images scored per parallel work item.
const SCORE_CHUNK: usize = 256;

/// Scores of evaluation images against every candidate pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    n_pairs: usize,
    scores: Vec<f64>,
    /// Ground-truth column of each image.
    truth: Vec<usize>,
    /// Whether each column is an unseen pair.
    unseen: Vec<bool>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<Vec<f64>>, truth: Vec<usize>, unseen: Vec<bool>) -> Result<Self> {
        let n_pairs = unseen.len();
        if scores.len() != truth.len() {
            return Err(Error::Evaluation(format!(
                "{} score rows for {} labels",
                scores.len(),
                truth.len()
            )));
        }
        if let Some((i, row)) = scores.iter().enumerate().find(|(_, r)| r.len() != n_pairs) {
            return Err(Error::Evaluation(format!(
                "row {i} has {} scores for {n_pairs} columns",
                row.len()
            )));
        }
        if let Some(&t) = truth.iter().find(|&&t| t >= n_pairs) {
            return Err(Error::Evaluation(format!(
                "label column {t} out of {n_pairs}"
            )));
        }
        let flat: Vec<f64> = scores.into_iter().flatten().collect();
        if flat.iter().any(|s| !s.is_finite()) {
            return Err(Error::Evaluation("non-finite score".into()));
        }
        Ok(ScoreMatrix {
            n_pairs,
            scores: flat,
            truth,
            unseen,
        })
    }

    pub fn n_images(&self) -> usize {
        self.truth.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_pairs..(i + 1) * self.n_pairs]
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn unseen_columns(&self) -> &[bool] {
        &self.unseen
    }

    /// Whether image `i` is labelled with an unseen pair.
    pub fn is_unseen_image(&self, i: usize) -> bool {
        self.unseen[self.truth[i]]
    }
}

/// Column ranking with the bias added to unseen columns; ties go to the lower
/// column id. An infinite bias is the limit: all unseen columns move past the
/// seen ones and keep their relative order.
pub fn predict_topk(row: &[f64], unseen: &[bool], bias: f64, k: usize) -> Vec<usize> {
    let adjusted: Vec<(f64, f64)> = row
        .iter()
        .zip(unseen)
        .map(|(&s, &u)| match (u, bias.is_finite()) {
            (false, _) => (0.0, s),
            (true, true) => (0.0, s + bias),
            (true, false) => (bias.signum(), s),
        })
        .collect();
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        let (la, sa) = adjusted[a];
        let (lb, sb) = adjusted[b];
        // IEEE comparison, so that -0.0 and 0.0 tie like they do in the sweep
        let desc = |x: f64, y: f64| y.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Equal);
        desc(la, lb).then(desc(sa, sb)).then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Whether column `j` outranks column `g` at equal adjusted score.
fn tie_ahead(j: usize, g: usize) -> bool {
    j < g
}

/// Critical bias of one image for top-`k`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Critical {
    /// `+inf` / `-inf` encode "always" / "never" as appropriate.
    bias: f64,
    /// Correct when the bias equals `bias` exactly.
    at_tie: bool,
}

fn critical(row: &[f64], unseen: &[bool], g: usize, k: usize) -> Critical {
    let sg = row[g];
    let target_unseen = unseen[g];
    // columns of the same kind as `g` rank ahead of it independently of the bias
    let fixed = (0..row.len())
        .filter(|&j| j != g && unseen[j] == target_unseen)
        .filter(|&j| row[j] > sg || (row[j] == sg && tie_ahead(j, g)))
        .count();
    let mut others: Vec<(f64, usize)> = (0..row.len())
        .filter(|&j| unseen[j] != target_unseen)
        .map(|j| (row[j], j))
        .collect();
    others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (never, always) = if target_unseen {
        (f64::INFINITY, f64::NEG_INFINITY)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    };
    if fixed >= k {
        return Critical {
            bias: never,
            at_tie: false,
        };
    }
    // at most `room` columns of the other kind may rank ahead
    let room = k - 1 - fixed;
    if room >= others.len() {
        return Critical {
            bias: always,
            at_tie: true,
        };
    }
    let pivot = others[room].0;
    let strictly_above = others.iter().filter(|(s, _)| *s > pivot).count();
    let tied_ahead = others
        .iter()
        .filter(|&&(s, j)| s == pivot && tie_ahead(j, g))
        .count();
    let at_tie = strictly_above + tied_ahead <= room;
    let bias = if target_unseen {
        pivot - sg
    } else {
        sg - pivot
    };
    Critical { bias, at_tie }
}

/// Exact accuracy-versus-bias function of one score matrix for one `k`.
#[derive(Clone, Debug)]
pub struct SweepIndex {
    pub k: usize,
    /// Sorted by bias.
    seen: Vec<Critical>,
    unseen: Vec<Critical>,
}

fn count_correct(sorted: &[Critical], bias: f64, unseen_side: bool) -> usize {
    let lo = sorted.partition_point(|c| c.bias < bias);
    let hi = sorted.partition_point(|c| c.bias <= bias);
    let ties = sorted[lo..hi].iter().filter(|c| c.at_tie).count();
    if unseen_side {
        lo + ties
    } else {
        sorted.len() - hi + ties
    }
}

impl SweepIndex {
    pub fn new(scores: &ScoreMatrix, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Evaluation("k must be at least 1".into()));
        }
        let mut seen = Vec::new();
        let mut unseen = Vec::new();
        for i in 0..scores.n_images() {
            let c = critical(scores.row(i), &scores.unseen, scores.truth[i], k);
            if scores.is_unseen_image(i) {
                unseen.push(c);
            } else {
                seen.push(c);
            }
        }
        match (seen.is_empty(), unseen.is_empty()) {
            (true, true) => {
                return Err(Error::Evaluation(
                    "no images with seen or unseen labels".into(),
                ))
            }
            (true, false) => return Err(Error::Evaluation("no images with seen labels".into())),
            (false, true) => return Err(Error::Evaluation("no images with unseen labels".into())),
            _ => {}
        }
        seen.sort_by(|a, b| a.bias.total_cmp(&b.bias));
        unseen.sort_by(|a, b| a.bias.total_cmp(&b.bias));
        Ok(SweepIndex { k, seen, unseen })
    }

    /// `(seen accuracy, unseen accuracy)` at `bias`, as fractions.
    pub fn accuracy_at(&self, bias: f64) -> (f64, f64) {
        let s = count_correct(&self.seen, bias, false) as f64 / self.seen.len() as f64;
        let u = count_correct(&self.unseen, bias, true) as f64 / self.unseen.len() as f64;
        (s, u)
    }

    /// Distinct finite critical biases in ascending order.
    pub fn candidate_biases(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self
            .seen
            .iter()
            .chain(&self.unseen)
            .map(|c| c.bias)
            .filter(|b| b.is_finite())
            .collect();
        c.sort_by(f64::total_cmp);
        c.dedup();
        c
    }

    /// The full curve: both infinities, every candidate and the midpoint of
    /// every gap between consecutive candidates.
    pub fn curve(&self) -> EvalCurve {
        let candidates = self.candidate_biases();
        let mut biases = vec![f64::NEG_INFINITY];
        if candidates.is_empty() {
            biases.push(0.0);
        }
        for (i, &c) in candidates.iter().enumerate() {
            biases.push(c);
            if let Some(&next) = candidates.get(i + 1) {
                let mid = c + (next - c) / 2.0;
                if mid > c && mid < next {
                    biases.push(mid);
                }
            }
        }
        biases.push(f64::INFINITY);
        let points = biases
            .into_iter()
            .map(|bias| {
                let (seen, unseen) = self.accuracy_at(bias);
                CurvePoint { bias, seen, unseen }
            })
            .collect();
        EvalCurve { k: self.k, points }
    }
}

/// Exact calibration sweep for top-`k`.
pub fn calibration_sweep(scores: &ScoreMatrix, k: usize) -> Result<EvalCurve> {
    Ok(SweepIndex::new(scores, k)?.curve())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
}

/// Accuracy points in ascending bias order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    pub k: usize,
    pub points: Vec<CurvePoint>,
}

/// Trapezoidal area under unseen accuracy plotted against seen accuracy.
pub fn auc(curve: &EvalCurve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(Error::Evaluation(
            "AUC needs at least two curve points".into(),
        ));
    }
    let area = curve
        .points
        .windows(2)
        .map(|w| (w[0].seen - w[1].seen).abs() * (w[0].unseen + w[1].unseen) / 2.0)
        .sum::<f64>();
    // accumulated rounding can overshoot the unit square by an ulp
    Ok(area.clamp(0.0, 1.0))
}

/// Best accuracies over the curve, as fractions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BestMetrics {
    pub best_seen: f64,
    pub best_unseen: f64,
    pub ch_mean: f64,
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

pub fn best_metrics(curve: &EvalCurve) -> Result<BestMetrics> {
    if curve.points.is_empty() {
        return Err(Error::Evaluation("empty curve".into()));
    }
    let mut best = BestMetrics::default();
    for p in &curve.points {
        best.best_seen = best.best_seen.max(p.seen);
        best.best_unseen = best.best_unseen.max(p.unseen);
        best.ch_mean = best.ch_mean.max(harmonic_mean(p.seen, p.unseen));
    }
    Ok(best)
}

/// Attribute and object concept features of every candidate, `[|C|, d]` each.
pub fn candidate_features<T: Real>(
    model: &Model<T>,
    universe: &PairUniverse,
) -> Result<(Tensor<T>, Tensor<T>)> {
    model.check_universe(universe)?;
    let mut g = Graph::new();
    let (vars, _) = model.bind(&mut g);
    let (a, o) = vars.concept.pair_features(
        &mut g,
        universe,
        &universe.candidates(),
        model.config.matching_mode(),
        model.slope(),
    )?;
    Ok((g.value(a).clone(), g.value(o).clone()))
}

/// Attribute and object visual features of `[N, d_in]` backbone features.
pub fn visual_features<T: Real>(
    model: &Model<T>,
    features: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if features.rank() != 2 || features.shape()[1] != model.config.input_dim {
        return Err(Error::Evaluation(format!(
            "image features have shape {:?}, the model expects {} columns",
            features.shape(),
            model.config.input_dim
        )));
    }
    let mut g = Graph::new();
    let (vars, _) = model.bind(&mut g);
    let x = g.constant(features.clone());
    let composite = vars.visual.encode(
        &mut g,
        x,
        model.config.residue,
        EncodeMode::Infer,
        None,
        model.slope(),
    )?;
    let (a, o) = vars.visual.extract(&mut g, composite, model.slope())?;
    Ok((g.value(a).clone(), g.value(o).clone()))
}

fn distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Scores `[N, d_in]` images with ground-truth pairs against all candidates.
/// Concept features are computed once; images are scored in parallel.
pub fn score_all<T: Real>(
    model: &Model<T>,
    universe: &PairUniverse,
    features: &Tensor<T>,
    truths: &[Pair],
) -> Result<ScoreMatrix> {
    let candidates = universe.candidates();
    let column: BTreeMap<Pair, usize> = candidates
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let truth = truths
        .iter()
        .map(|p| column.get(p).copied().ok_or(Error::NotCandidate(*p)))
        .collect::<Result<Vec<_>>>()?;
    let n = truths.len();
    if features.rank() != 2 || features.shape()[0] != n {
        return Err(Error::Evaluation(format!(
            "{n} labels for features of shape {:?}",
            features.shape()
        )));
    }
    let (ca, co) = candidate_features(model, universe)?;
    let d_in = features.shape()[1];
    let chunks: Vec<Vec<Vec<f64>>> = features
        .data()
        .par_chunks(SCORE_CHUNK * d_in.max(1))
        .map(|chunk| -> Result<Vec<Vec<f64>>> {
            let rows = chunk.len() / d_in.max(1);
            let x = Tensor::new(vec![rows, d_in], chunk.to_vec())?;
            let (xa, xo) = visual_features(model, &x)?;
            Ok((0..rows)
                .map(|i| {
                    (0..candidates.len())
                        .map(|p| -distance(xa.row(i), ca.row(p)) - distance(xo.row(i), co.row(p)))
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let scores = chunks.into_iter().flatten().collect();
    let unseen = candidates.iter().map(|&p| universe.is_unseen(p)).collect();
    ScoreMatrix::new(scores, truth, unseen)
}

/// Scores all images of one split.
pub fn score_split<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    split: Split,
) -> Result<ScoreMatrix> {
    let images = dataset.split_indices(split);
    let truths: Vec<Pair> = images.iter().map(|&i| dataset.images()[i].pair).collect();
    let features = dataset.image_features(&images);
    score_all(model, &dataset.universe, &features, &truths)
}

/// Metrics of one `k` as fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub auc: f64,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub ch_mean: f64,
}

impl SplitMetrics {
    pub fn from_curve(curve: &EvalCurve) -> Result<Self> {
        let best = best_metrics(curve)?;
        Ok(SplitMetrics {
            auc: auc(curve)?,
            best_seen: best.best_seen,
            best_unseen: best.best_unseen,
            ch_mean: best.ch_mean,
        })
    }

    /// Same metrics ×100.
    pub fn percent(&self) -> Self {
        SplitMetrics {
            auc: 100.0 * self.auc,
            best_seen: 100.0 * self.best_seen,
            best_unseen: 100.0 * self.best_unseen,
            ch_mean: 100.0 * self.ch_mean,
        }
    }
}

/// Curves and metrics of one split for several `k`.
#[derive(Clone, Debug)]
pub struct SplitEvaluation {
    pub split: Split,
    pub curves: Vec<EvalCurve>,
    pub metrics: Vec<SplitMetrics>,
}

pub fn evaluate_scores(
    scores: &ScoreMatrix,
    split: Split,
    ks: &[usize],
) -> Result<SplitEvaluation> {
    let mut curves = Vec::new();
    let mut metrics = Vec::new();
    for &k in ks {
        let curve = calibration_sweep(scores, k)?;
        metrics.push(SplitMetrics::from_curve(&curve)?);
        curves.push(curve);
    }
    Ok(SplitEvaluation {
        split,
        curves,
        metrics,
    })
}

pub fn evaluate_split<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    split: Split,
    ks: &[usize],
) -> Result<SplitEvaluation> {
    let scores = score_split(model, dataset, split)?;
    evaluate_scores(&scores, split, ks)
}

/// Top-1 AUC on the validation split, used for model selection.
pub fn validation_auc<T: Real>(model: &Model<T>, dataset: &Dataset) -> Result<f64> {
    let eval = evaluate_split(model, dataset, Split::Val, &[1])?;
    Ok(eval.metrics[0].auc)
}

/// `{k: {split: metrics ×100}}`.
pub type Report = BTreeMap<String, BTreeMap<String, SplitMetrics>>;

pub fn report(evaluations: &[SplitEvaluation]) -> Report {
    let mut out = Report::new();
    for e in evaluations {
        for (curve, m) in e.curves.iter().zip(&e.metrics) {
            out.entry(curve.k.to_string())
                .or_default()
                .insert(e.split.name().to_string(), m.percent());
        }
    }
    out
}

/// `split,k,bias,seen,unseen` rows with accuracies as fractions.
pub fn curves_csv(evaluations: &[SplitEvaluation]) -> String {
    let mut out = String::from("split,k,bias,seen,unseen\n");
    for e in evaluations {
        for c in &e.curves {
            for p in &c.points {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    e.split.name(),
                    c.k,
                    p.bias,
                    p.seen,
                    p.unseen
                )
                .expect("string write");
            }
        }
    }
    out
}
