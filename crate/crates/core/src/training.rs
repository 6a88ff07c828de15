//! Triplet batch sampling, the loss terms, branch blocking, Adam and the
//! epoch loop.

use std::collections::HashMap;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{Model, ModelConfig, ModelVars};
use crate::nn::normal_tensor;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::universe::{Pair, PairUniverse};
use crate::visual::{EncodeMode, ResidueMode};

/// Reference draws per batch slot before the slot is given up.
pub const MAX_RESAMPLES: usize = 100;

fn default_margin() -> f64 {
    0.5
}
fn default_tau() -> f64 {
    0.05
}
fn default_batch() -> usize {
    512
}
fn default_lr() -> f64 {
    3e-4
}
fn default_epochs() -> usize {
    200
}

/// Loss weights `(lambda_v, lambda_c, lambda_a, lambda_r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub visual: f64,
    pub concept: f64,
    pub aux: f64,
    pub reconstruction: f64,
}

impl LossWeights {
    pub const UT_ZAPPOS: LossWeights = LossWeights {
        visual: 10.0,
        concept: 0.5,
        aux: 1.0,
        reconstruction: 10.0,
    };
    pub const MIT_STATES: LossWeights = LossWeights {
        visual: 20.0,
        concept: 5.0,
        aux: 10.0,
        reconstruction: 5.0,
    };
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::UT_ZAPPOS
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Triplet margin.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Per-branch blocking probability.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Adam step size.
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: default_margin(),
            tau: default_tau(),
            weights: LossWeights::default(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [
            ("weights.visual", w.visual),
            ("weights.concept", w.concept),
            ("weights.aux", w.aux),
            ("weights.reconstruction", w.reconstruction),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    name,
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        if !(0.0..0.5).contains(&self.tau) {
            return Err(Error::config(
                "tau",
                format!("must lie in [0, 0.5), got {}", self.tau),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        Ok(())
    }
}

/// An image with its pair label. `image` indexes [`Dataset::images`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image: usize,
    pub pair: Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSample {
    pub reference: LabeledImage,
    /// Same object, different attribute.
    pub neg_attr: LabeledImage,
    /// Same attribute, different object.
    pub neg_obj: LabeledImage,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletBatch {
    pub samples: Vec<TripletSample>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Image ids stacked as references, attribute negatives, object negatives.
    pub fn stacked_images(&self) -> Vec<usize> {
        let s = &self.samples;
        s.iter()
            .map(|t| t.reference.image)
            .chain(s.iter().map(|t| t.neg_attr.image))
            .chain(s.iter().map(|t| t.neg_obj.image))
            .collect()
    }
}

/// Training images grouped by seen pair, with the valid negatives of each pair.
#[derive(Clone, Debug)]
pub struct SampleIndex {
    references: Vec<LabeledImage>,
    images_of: HashMap<Pair, Vec<usize>>,
    negatives: HashMap<Pair, (Vec<Pair>, Vec<Pair>)>,
}

impl SampleIndex {
    /// `images` are the training images; labels must be seen pairs.
    pub fn new(universe: &PairUniverse, images: &[LabeledImage]) -> Result<Self> {
        if universe.seen().is_empty() {
            return Err(Error::Sampling("no seen pairs".into()));
        }
        let mut images_of: HashMap<Pair, Vec<usize>> = HashMap::new();
        for img in images {
            if !universe.is_seen(img.pair) {
                return Err(Error::Sampling(format!(
                    "training image {} is labelled with non-seen pair {}",
                    img.image, img.pair
                )));
            }
            images_of.entry(img.pair).or_default().push(img.image);
        }
        if images.is_empty() {
            return Err(Error::Sampling("no training images".into()));
        }
        let populated: Vec<Pair> = universe
            .seen()
            .iter()
            .copied()
            .filter(|p| images_of.contains_key(p))
            .collect();
        let negatives = populated
            .iter()
            .map(|&p| {
                let attr = populated
                    .iter()
                    .copied()
                    .filter(|q| q.obj == p.obj && q.attr != p.attr)
                    .collect();
                let obj = populated
                    .iter()
                    .copied()
                    .filter(|q| q.attr == p.attr && q.obj != p.obj)
                    .collect();
                (p, (attr, obj))
            })
            .collect();
        Ok(SampleIndex {
            references: images.to_vec(),
            images_of,
            negatives,
        })
    }

    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let images: Vec<LabeledImage> = dataset
            .split_indices(Split::Train)
            .into_iter()
            .map(|i| LabeledImage {
                image: i,
                pair: dataset.images()[i].pair,
            })
            .collect();
        Self::new(&dataset.universe, &images)
    }

    pub fn n_references(&self) -> usize {
        self.references.len()
    }

    /// Valid attribute negatives `<a', o>` and object negatives `<a, o'>` of a
    /// pair: seen, with at least one training image.
    pub fn valid_negatives(&self, pair: Pair) -> (&[Pair], &[Pair]) {
        match self.negatives.get(&pair) {
            Some((a, o)) => (a, o),
            None => (&[], &[]),
        }
    }

    fn draw_image<R: Rng + ?Sized>(&self, rng: &mut R, pair: Pair) -> LabeledImage {
        let imgs = &self.images_of[&pair];
        LabeledImage {
            image: imgs[rng.random_range(0..imgs.len())],
            pair,
        }
    }
}

/// Draws `batch_size` triplets. References are uniform over training images;
/// negatives are uniform over valid pairs, then over their images. A reference
/// without both kinds of negative is skipped and redrawn, up to
/// [`MAX_RESAMPLES`] times per slot.
pub fn sample_batch<R: Rng + ?Sized>(
    index: &SampleIndex,
    batch_size: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    let mut samples = Vec::with_capacity(batch_size);
    let mut skipped = 0usize;
    let mut dropped = 0usize;
    for _ in 0..batch_size {
        let mut filled = false;
        for _ in 0..MAX_RESAMPLES {
            let reference = index.references[rng.random_range(0..index.references.len())];
            let (attr_negs, obj_negs) = index.valid_negatives(reference.pair);
            if attr_negs.is_empty() || obj_negs.is_empty() {
                skipped += 1;
                continue;
            }
            let na = attr_negs[rng.random_range(0..attr_negs.len())];
            let no = obj_negs[rng.random_range(0..obj_negs.len())];
            samples.push(TripletSample {
                reference,
                neg_attr: index.draw_image(rng, na),
                neg_obj: index.draw_image(rng, no),
            });
            filled = true;
            break;
        }
        if !filled {
            dropped += 1;
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} reference draws without a valid negative; {dropped} batch slots left empty");
    }
    if samples.is_empty() {
        return Err(Error::Sampling(
            "no training reference has both a same-object and a same-attribute seen neighbour"
                .into(),
        ));
    }
    Ok(TripletBatch { samples })
}

/// Which training branches are switched off for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchBlock {
    pub attr: bool,
    pub obj: bool,
}

/// Each branch is blocked when its uniform draw falls below `tau`; a draw that
/// would block both branches is repeated.
pub fn branch_block_draw<R: Rng + ?Sized>(rng: &mut R, tau: f64) -> BranchBlock {
    loop {
        let wa: f64 = rng.random();
        let wo: f64 = rng.random();
        let block = BranchBlock {
            attr: wa < tau,
            obj: wo < tau,
        };
        if !(block.attr && block.obj) {
            return block;
        }
    }
}

/// Per-row `softplus(m - (d(r, n) - d(r, p)))` for `[B, d]` inputs.
pub fn triplet_rows<T: Real>(
    g: &mut Graph<T>,
    neg: Var,
    pos: Var,
    reference: Var,
    margin: T,
) -> Result<Var> {
    let dn = g.distance(reference, neg)?;
    let dp = g.distance(reference, pos)?;
    let gap = g.sub(dn, dp)?;
    let arg = g.scale(gap, -T::one())?;
    let arg = g.offset(arg, margin)?;
    Ok(g.softplus(arg)?)
}

/// `log(1 + exp(m - (d(x_r, x_n) - d(x_r, x_p))))` for single vectors.
pub fn triplet_term<T: Real>(x_n: &[T], x_p: &[T], x_r: &[T], margin: T) -> Result<T> {
    let mut g = Graph::new();
    let mut leaf = |v: &[T]| g.constant(Tensor::vector(v.to_vec()));
    let (n, p, r) = (leaf(x_n), leaf(x_p), leaf(x_r));
    let out = triplet_rows(&mut g, n, p, r, margin)?;
    Ok(g.value(out).item())
}

/// Graph handles of the per-sample features entering the triplet terms.
#[derive(Clone, Copy, Debug)]
pub struct HingeVars {
    pub concept_attr: Var,
    pub concept_attr_neg: Var,
    pub concept_obj: Var,
    pub concept_obj_neg: Var,
    pub visual_attr: Var,
    pub visual_attr_neg: Var,
    pub visual_obj: Var,
    pub visual_obj_neg: Var,
}

/// Batch-averaged `(L_v, L_c)` restricted to the unblocked branches; `None`
/// parts mean both contributions of that loss were blocked.
pub fn hinge_terms<T: Real>(
    g: &mut Graph<T>,
    h: &HingeVars,
    margin: T,
    block: BranchBlock,
) -> Result<(Option<Var>, Option<Var>)> {
    let mut lv = Vec::new();
    let mut lc = Vec::new();
    if !block.attr {
        let v = triplet_rows(g, h.concept_attr_neg, h.concept_attr, h.visual_attr, margin)?;
        lv.push(g.mean(v)?);
        let c = triplet_rows(g, h.visual_attr_neg, h.visual_attr, h.concept_attr, margin)?;
        lc.push(g.mean(c)?);
    }
    if !block.obj {
        let v = triplet_rows(g, h.concept_obj_neg, h.concept_obj, h.visual_obj, margin)?;
        lv.push(g.mean(v)?);
        let c = triplet_rows(g, h.visual_obj_neg, h.visual_obj, h.concept_obj, margin)?;
        lc.push(g.mean(c)?);
    }
    Ok((sum_all(g, &lv)?, sum_all(g, &lc)?))
}

fn sum_all<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &t in terms {
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc)
}

/// Value-level features for [`hinge_losses`], each `[B, d]`.
#[derive(Clone, Debug)]
pub struct HingeInputs<T> {
    pub concept_attr: Tensor<T>,
    pub concept_attr_neg: Tensor<T>,
    pub concept_obj: Tensor<T>,
    pub concept_obj_neg: Tensor<T>,
    pub visual_attr: Tensor<T>,
    pub visual_attr_neg: Tensor<T>,
    pub visual_obj: Tensor<T>,
    pub visual_obj_neg: Tensor<T>,
}

/// Batch-averaged `(L_v, L_c)` with both branches active.
pub fn hinge_losses<T: Real>(inputs: &HingeInputs<T>, margin: T) -> Result<(T, T)> {
    let mut g = Graph::new();
    let mut c = |t: &Tensor<T>| g.constant(t.clone());
    let h = HingeVars {
        concept_attr: c(&inputs.concept_attr),
        concept_attr_neg: c(&inputs.concept_attr_neg),
        concept_obj: c(&inputs.concept_obj),
        concept_obj_neg: c(&inputs.concept_obj_neg),
        visual_attr: c(&inputs.visual_attr),
        visual_attr_neg: c(&inputs.visual_attr_neg),
        visual_obj: c(&inputs.visual_obj),
        visual_obj_neg: c(&inputs.visual_obj_neg),
    };
    let (lv, lc) = hinge_terms(&mut g, &h, margin, BranchBlock::default())?;
    let value = |v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or_else(T::zero);
    Ok((value(lv), value(lc)))
}

/// Mean negative log-likelihood of `labels` under `softmax(features W + b)`.
pub fn classifier_nll<T: Real>(
    g: &mut Graph<T>,
    classifier: &crate::nn::LinearVars,
    features: Var,
    labels: Vec<usize>,
) -> Result<Var> {
    let logits = classifier.forward(g, features)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.pick_cols(logp, labels)?;
    let mean = g.mean(picked)?;
    Ok(g.scale(mean, -T::one())?)
}

/// Auxiliary classification loss on `[B, d]` attribute and object concept
/// features.
pub fn aux_loss<T: Real>(
    concept_attr: &Tensor<T>,
    concept_obj: &Tensor<T>,
    labels: &[Pair],
    attr_classifier: &crate::nn::Linear<T>,
    obj_classifier: &crate::nn::Linear<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let (ca, _) = crate::nn::bind(attr_classifier, &mut g);
    let (co, _) = crate::nn::bind(obj_classifier, &mut g);
    let xa = g.constant(concept_attr.clone());
    let xo = g.constant(concept_obj.clone());
    let la = classifier_nll(&mut g, &ca, xa, labels.iter().map(|p| p.attr).collect())?;
    let lo = classifier_nll(&mut g, &co, xo, labels.iter().map(|p| p.obj).collect())?;
    let total = g.add(la, lo)?;
    Ok(g.value(total).item())
}

/// `mean(||blocked_a - naive_a||^2 + ||blocked_o - naive_o||^2)` over rows.
pub fn reconstruction_rows<T: Real>(
    g: &mut Graph<T>,
    blocked_attr: Var,
    naive_attr: Var,
    blocked_obj: Var,
    naive_obj: Var,
) -> Result<Var> {
    let da = g.squared_distance(blocked_attr, naive_attr)?;
    let dob = g.squared_distance(blocked_obj, naive_obj)?;
    let s = g.add(da, dob)?;
    Ok(g.mean(s)?)
}

pub fn reconstruction_loss<T: Real>(
    naive_attr: &Tensor<T>,
    naive_obj: &Tensor<T>,
    blocked_attr: &Tensor<T>,
    blocked_obj: &Tensor<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let mut c = |t: &Tensor<T>| g.constant(t.clone());
    let (na, no, ba, bo) = (c(naive_attr), c(naive_obj), c(blocked_attr), c(blocked_obj));
    let out = reconstruction_rows(&mut g, ba, na, bo, no)?;
    Ok(g.value(out).item())
}

/// Frozen randomness of one step.
#[derive(Clone, Debug)]
pub struct StepDraw<T> {
    pub block: BranchBlock,
    /// `[3B, d]` standard-normal residue noise; `None` when the residue is off.
    pub noise: Option<Tensor<T>>,
}

/// Handles of every term of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub visual: Option<Var>,
    pub concept: Option<Var>,
    pub aux: Option<Var>,
    pub reconstruction: Option<Var>,
}

/// Whether the naive-mode reconstruction term is part of the objective.
pub fn uses_reconstruction(model: &ModelConfig, config: &TrainConfig) -> bool {
    model.edge_blocking && config.weights.reconstruction > 0.0
}

/// Builds the combined objective for `batch` on graph `g`. `inputs` holds the
/// backbone features of [`TripletBatch::stacked_images`].
#[allow(clippy::too_many_arguments)]
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    model: &ModelConfig,
    universe: &PairUniverse,
    batch: &TripletBatch,
    inputs: Tensor<T>,
    config: &TrainConfig,
    draw: &StepDraw<T>,
) -> Result<LossVars> {
    let b = batch.len();
    let slope = T::lit(model.leaky_slope);
    let margin = T::lit(config.margin);

    // concept features of the distinct pairs in the batch
    let mut distinct: Vec<Pair> = Vec::new();
    let mut slot: HashMap<Pair, usize> = HashMap::new();
    let mut index_of = |p: Pair| -> usize {
        *slot.entry(p).or_insert_with(|| {
            distinct.push(p);
            distinct.len() - 1
        })
    };
    let refs: Vec<usize> = batch
        .samples
        .iter()
        .map(|s| index_of(s.reference.pair))
        .collect();
    let negs_a: Vec<usize> = batch
        .samples
        .iter()
        .map(|s| index_of(s.neg_attr.pair))
        .collect();
    let negs_o: Vec<usize> = batch
        .samples
        .iter()
        .map(|s| index_of(s.neg_obj.pair))
        .collect();
    let (attr_rows, obj_rows) =
        vars.concept
            .pair_features(g, universe, &distinct, model.matching_mode(), slope)?;
    let concept_attr = g.gather_rows(attr_rows, refs.clone())?;
    let concept_attr_neg = g.gather_rows(attr_rows, negs_a)?;
    let concept_obj = g.gather_rows(obj_rows, refs)?;
    let concept_obj_neg = g.gather_rows(obj_rows, negs_o)?;

    // visual features of references and negatives
    let x = g.constant(inputs);
    let composite = vars.visual.encode(
        g,
        x,
        model.residue,
        EncodeMode::Train,
        draw.noise.clone(),
        slope,
    )?;
    let attr_side = g.gather_rows(composite, (0..2 * b).collect())?;
    let obj_side = g.gather_rows(composite, (0..b).chain(2 * b..3 * b).collect())?;
    let va = vars.visual.attr_head.forward(g, attr_side, slope)?;
    let vo = vars.visual.obj_head.forward(g, obj_side, slope)?;
    let hinge = HingeVars {
        concept_attr,
        concept_attr_neg,
        concept_obj,
        concept_obj_neg,
        visual_attr: g.gather_rows(va, (0..b).collect())?,
        visual_attr_neg: g.gather_rows(va, (b..2 * b).collect())?,
        visual_obj: g.gather_rows(vo, (0..b).collect())?,
        visual_obj_neg: g.gather_rows(vo, (b..2 * b).collect())?,
    };
    let (visual, concept) = hinge_terms(g, &hinge, margin, draw.block)?;

    let mut aux_parts = Vec::new();
    if !draw.block.attr {
        let labels = batch
            .samples
            .iter()
            .map(|s| s.reference.pair.attr)
            .collect();
        aux_parts.push(classifier_nll(
            g,
            &vars.attr_classifier,
            concept_attr,
            labels,
        )?);
    }
    if !draw.block.obj {
        let labels = batch.samples.iter().map(|s| s.reference.pair.obj).collect();
        aux_parts.push(classifier_nll(
            g,
            &vars.obj_classifier,
            concept_obj,
            labels,
        )?);
    }
    let aux = sum_all(g, &aux_parts)?;

    let reconstruction = if uses_reconstruction(model, config) {
        let naive = vars.concept.naive_features(g, universe, slope)?;
        let na = universe.n_attrs();
        let naive_attr = g.gather_rows(
            naive,
            batch
                .samples
                .iter()
                .map(|s| s.reference.pair.attr)
                .collect(),
        )?;
        let naive_obj = g.gather_rows(
            naive,
            batch
                .samples
                .iter()
                .map(|s| na + s.reference.pair.obj)
                .collect(),
        )?;
        Some(reconstruction_rows(
            g,
            concept_attr,
            naive_attr,
            concept_obj,
            naive_obj,
        )?)
    } else {
        None
    };

    let w = &config.weights;
    let mut weighted = Vec::new();
    for (term, weight) in [
        (visual, w.visual),
        (concept, w.concept),
        (aux, w.aux),
        (reconstruction, w.reconstruction),
    ] {
        if let Some(t) = term {
            weighted.push(g.scale(t, T::lit(weight))?);
        }
    }
    let total =
        sum_all(g, &weighted)?.ok_or_else(|| Error::config("weights", "objective has no terms"))?;
    Ok(LossVars {
        total,
        visual,
        concept,
        aux,
        reconstruction,
    })
}

/// Loss values of one step; blocked or disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub visual: Option<f64>,
    pub concept: Option<f64>,
    pub aux: Option<f64>,
    pub reconstruction: Option<f64>,
}

impl LossValues {
    fn read<T: Real>(g: &Graph<T>, vars: &LossVars) -> Self {
        let v = |x: Option<Var>| x.map(|x| g.value(x).item().as_f64());
        LossValues {
            total: g.value(vars.total).item().as_f64(),
            visual: v(vars.visual),
            concept: v(vars.concept),
            aux: v(vars.aux),
            reconstruction: v(vars.reconstruction),
        }
    }

    fn all_finite(&self) -> bool {
        [
            Some(self.total),
            self.visual,
            self.concept,
            self.aux,
            self.reconstruction,
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(self.t as i32));
        let c2 = T::one() - T::lit(self.beta2.powi(self.t as i32));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.epsilon);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossValues,
    pub block: BranchBlock,
    pub batch_size: usize,
}

/// Model, optimizer and the random stream driving training.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Best `(epoch, validation AUC)` so far.
    pub best: Option<(usize, f64)>,
}

impl<T: Real> Trainer<T> {
    /// Fresh model drawn from the seeded stream, which then drives training.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(model_config, &mut rng);
        Ok(Self::from_parts(model, config, rng))
    }

    pub fn from_parts(model: Model<T>, config: TrainConfig, rng: ChaCha8Rng) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let optimizer = Adam::new(config.learning_rate, &shapes);
        Trainer {
            model,
            optimizer,
            config,
            rng,
            step: 0,
            epoch: 0,
            best: None,
        }
    }

    /// Draws branch blocking and residue noise for a batch.
    pub fn draw(&mut self, batch: &TripletBatch) -> StepDraw<T> {
        let block = branch_block_draw(&mut self.rng, self.config.tau);
        let noise = (self.model.config.residue != ResidueMode::Off).then(|| {
            normal_tensor(
                &mut self.rng,
                &[3 * batch.len(), self.model.config.dim],
                1.0,
            )
        });
        StepDraw { block, noise }
    }

    /// Samples a batch and takes one optimizer step.
    pub fn step(&mut self, dataset: &Dataset, index: &SampleIndex) -> Result<StepReport> {
        let batch = sample_batch(index, self.config.batch_size, &mut self.rng)?;
        self.step_on(dataset, &batch)
    }

    /// One optimizer step on a given batch.
    pub fn step_on(&mut self, dataset: &Dataset, batch: &TripletBatch) -> Result<StepReport> {
        let draw = self.draw(batch);
        let inputs = dataset.image_features(&batch.stacked_images());
        let mut g = Graph::new();
        let (vars, leaves) = self.model.bind(&mut g);
        let loss = build_loss(
            &mut g,
            &vars,
            &self.model.config,
            &dataset.universe,
            batch,
            inputs,
            &self.config,
            &draw,
        )?;
        let losses = LossValues::read(&g, &loss);
        if !losses.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                terms: format!("{losses:?}"),
                batch: Box::new(batch.clone()),
            });
        }
        let grads = g.backward(loss.total)?;
        let grads: Vec<Tensor<T>> = leaves.iter().map(|&l| grads.get(l)).collect();
        self.optimizer.update(self.model.tensors_mut(), &grads);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            losses,
            block: draw.block,
            batch_size: batch.len(),
        })
    }

    /// Optimizer steps per epoch: one pass over the training images.
    pub fn steps_per_epoch(&self, index: &SampleIndex) -> usize {
        index.n_references().div_ceil(self.config.batch_size)
    }
}

/// Per-epoch record; loss terms are means over the epoch's steps that used them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_v")]
    pub visual: Option<f64>,
    #[serde(rename = "L_c")]
    pub concept: Option<f64>,
    #[serde(rename = "L_aux")]
    pub aux: Option<f64>,
    #[serde(rename = "L_r")]
    pub reconstruction: Option<f64>,
    pub total: f64,
    /// Top-1 validation AUC as a fraction.
    pub val_auc: f64,
}

pub struct TrainOutcome<T> {
    pub records: Vec<EpochRecord>,
    /// Epoch (1-based) with the best validation AUC, including epochs before a
    /// resume; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    /// Parameters of the best epoch if it happened during this call.
    pub best_model: Option<Model<T>>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs epochs until `trainer.config.epochs`, scoring the validation split
/// after each. `on_epoch` sees the record, the trainer and whether this epoch
/// is the best so far.
pub fn train<T: Real>(
    trainer: &mut Trainer<T>,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord, &Trainer<T>, bool) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    trainer.model.check_universe(&dataset.universe)?;
    let index = SampleIndex::from_dataset(dataset)?;
    let steps = trainer.steps_per_epoch(&index);
    let mut records = Vec::new();
    let mut best_model = None;
    while trainer.epoch < trainer.config.epochs {
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            reports.push(trainer.step(dataset, &index)?);
        }
        trainer.epoch += 1;
        let val_auc = eval::validation_auc(&trainer.model, dataset)?;
        let record = EpochRecord {
            epoch: trainer.epoch,
            visual: mean_of(reports.iter().map(|r| r.losses.visual)),
            concept: mean_of(reports.iter().map(|r| r.losses.concept)),
            aux: mean_of(reports.iter().map(|r| r.losses.aux)),
            reconstruction: mean_of(reports.iter().map(|r| r.losses.reconstruction)),
            total: reports.iter().map(|r| r.losses.total).sum::<f64>()
                / reports.len().max(1) as f64,
            val_auc,
        };
        let improved = trainer.best.is_none_or(|(_, auc)| val_auc > auc);
        if improved {
            trainer.best = Some((trainer.epoch, val_auc));
            best_model = Some(trainer.model.clone());
        }
        info!(
            "epoch {} total {:.4} val AUC {:.2}",
            record.epoch,
            record.total,
            100.0 * record.val_auc
        );
        on_epoch(&record, trainer, improved)?;
        records.push(record);
    }
    Ok(TrainOutcome {
        records,
        best_epoch: trainer.best.map(|b| b.0),
        best_val_auc: trainer.best.map(|b| b.1),
        best_model,
    })
}
