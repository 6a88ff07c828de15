//! Finite-difference fixtures: one small graph per primitive op and the full
//! training objective on a tiny world.

use bmp_core::data::{generate_synthetic, SyntheticWorldConfig};
use bmp_core::model::{Model, ModelConfig};
use bmp_core::nn::normal_tensor;
use bmp_core::tensor::{finite_difference_check, Graph, Tensor, Var};
use bmp_core::training::{
    build_loss, sample_batch, BranchBlock, SampleIndex, StepDraw, TrainConfig,
};
use bmp_core::visual::ResidueMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Reduces any output to a scalar through a random weighting, so every output
/// entry gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(uniform(rng, &shape, -2.0, 2.0));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

pub type Build = fn(&mut Graph<f64>, &mut ChaCha8Rng) -> (Var, Vec<Var>);

pub fn leaf(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, shape: &[usize]) -> Var {
    g.param(uniform(rng, shape, -2.0, 2.0))
}

pub fn primitives() -> Vec<(&'static str, Build)> {
    vec![
        ("matmul", |g, r| {
            let (a, b) = (leaf(g, r, &[3, 4]), leaf(g, r, &[4, 2]));
            (g.matmul(a, b).unwrap(), vec![a, b])
        }),
        ("batched_matvec", |g, r| {
            let (u, v) = (leaf(g, r, &[3, 4, 4]), leaf(g, r, &[3, 4]));
            (g.batched_matvec(u, v).unwrap(), vec![u, v])
        }),
        ("transpose", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            (g.transpose(a).unwrap(), vec![a])
        }),
        ("add", |g, r| {
            let (a, b) = (leaf(g, r, &[3, 4]), leaf(g, r, &[3, 4]));
            (g.add(a, b).unwrap(), vec![a, b])
        }),
        ("sub", |g, r| {
            let (a, b) = (leaf(g, r, &[3, 4]), leaf(g, r, &[3, 4]));
            (g.sub(a, b).unwrap(), vec![a, b])
        }),
        ("mul", |g, r| {
            let (a, b) = (leaf(g, r, &[3, 4]), leaf(g, r, &[3, 4]));
            (g.mul(a, b).unwrap(), vec![a, b])
        }),
        ("add_row", |g, r| {
            let (a, b) = (leaf(g, r, &[3, 4]), leaf(g, r, &[4]));
            (g.add_row(a, b).unwrap(), vec![a, b])
        }),
        ("scale", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            (g.scale(a, -0.7).unwrap(), vec![a])
        }),
        ("offset", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            (g.offset(a, 0.3).unwrap(), vec![a])
        }),
        ("concat", |g, r| {
            let (a, b) = (leaf(g, r, &[2, 4]), leaf(g, r, &[3, 4]));
            (g.concat(&[a, b]).unwrap(), vec![a, b])
        }),
        ("gather_rows", |g, r| {
            let a = leaf(g, r, &[4, 3]);
            (g.gather_rows(a, vec![2, 0, 2, 1]).unwrap(), vec![a])
        }),
        ("tanh", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            (g.tanh(a).unwrap(), vec![a])
        }),
        ("leaky_relu", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            (g.leaky_relu(a, 0.1).unwrap(), vec![a])
        }),
        ("exp", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            (g.exp(a).unwrap(), vec![a])
        }),
        ("log", |g, r| {
            let a = g.param(uniform(r, &[3, 4], 0.5, 2.0));
            (g.log(a).unwrap(), vec![a])
        }),
        ("softplus", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            (g.softplus(a).unwrap(), vec![a])
        }),
        ("masked_softmax", |g, r| {
            let a = leaf(g, r, &[3, 5]);
            let blocked = vec![
                false, true, false, false, false, //
                false, false, false, true, true, // fully blocked second group
                true, true, true, false, false, // fully blocked first group
            ];
            (g.masked_softmax(a, vec![3, 5], blocked).unwrap(), vec![a])
        }),
        ("log_softmax", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            (g.log_softmax(a).unwrap(), vec![a])
        }),
        ("pick_cols", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            (g.pick_cols(a, vec![1, 0, 3]).unwrap(), vec![a])
        }),
        ("distance", |g, r| {
            let (a, b) = (leaf(g, r, &[3, 4]), leaf(g, r, &[3, 4]));
            (g.distance(a, b).unwrap(), vec![a, b])
        }),
        ("distance_vector", |g, r| {
            let (a, b) = (leaf(g, r, &[5]), leaf(g, r, &[5]));
            (g.distance(a, b).unwrap(), vec![a, b])
        }),
        ("squared_distance", |g, r| {
            let (a, b) = (leaf(g, r, &[3, 4]), leaf(g, r, &[3, 4]));
            (g.squared_distance(a, b).unwrap(), vec![a, b])
        }),
        ("reparameterize_rows", |g, r| {
            let (mu, lv) = (leaf(g, r, &[3, 4]), leaf(g, r, &[3, 4]));
            let noise = uniform(r, &[3, 4], -2.0, 2.0);
            (g.reparameterize(mu, lv, noise).unwrap(), vec![mu, lv])
        }),
        ("reparameterize_broadcast", |g, r| {
            let (mu, lv) = (leaf(g, r, &[4]), leaf(g, r, &[4]));
            let noise = uniform(r, &[3, 4], -2.0, 2.0);
            (g.reparameterize(mu, lv, noise).unwrap(), vec![mu, lv])
        }),
        ("sum", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            let s = g.sum(a).unwrap();
            (s, vec![a])
        }),
        ("mean", |g, r| {
            let a = leaf(g, r, &[3, 4]);
            let s = g.mean(a).unwrap();
            (s, vec![a])
        }),
    ]
}

pub fn full_loss_graph(
    residue: ResidueMode,
    block: BranchBlock,
    seed: u64,
) -> (Graph<f64>, Var, Vec<Var>) {
    let world = generate_synthetic(&SyntheticWorldConfig {
        n_attrs: 3,
        n_objs: 3,
        dim: 16,
        images_per_pair: 4,
        seed,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = SampleIndex::from_dataset(&world).unwrap();
    let batch = sample_batch(&index, 4, &mut rng).unwrap();
    let mut cfg = ModelConfig::new(3, 3, 16, 16);
    cfg.residue = residue;
    let model: Model<f64> = Model::init(cfg.clone(), &mut rng);
    let noise =
        (residue != ResidueMode::Off).then(|| normal_tensor(&mut rng, &[3 * batch.len(), 16], 1.0));
    let draw = StepDraw { block, noise };
    let train = TrainConfig::default();
    let mut g = Graph::new();
    let (vars, leaves) = model.bind(&mut g);
    let inputs = world.image_features(&batch.stacked_images());
    let loss = build_loss(
        &mut g,
        &vars,
        &cfg,
        &world.universe,
        &batch,
        inputs,
        &train,
        &draw,
    )
    .unwrap();
    (g, loss.total, leaves)
}

/// A LeakyReLU pre-activation within `EPS` of zero makes the central
/// difference straddle the kink; such a leaf is re-checked with a smaller
/// step. Re-checks must stay rare.
pub fn check_leaves(g: &mut Graph<f64>, loss: Var, leaves: &[Var]) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut rechecked = 0;
    for &l in leaves {
        let mut err = finite_difference_check(g, loss, l, EPS).unwrap();
        if err >= TOL {
            rechecked += 1;
            err = finite_difference_check(g, loss, l, EPS / 10.0).unwrap();
        }
        worst = worst.max(err);
    }
    (worst, rechecked)
}
