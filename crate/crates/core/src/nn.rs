//! Parameter groups and the small dense building blocks shared by the model.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Graph, Real, Tensor, Var};

/// A bundle of learnable tensors. `collect`, `collect_mut` and `bind_from`
/// must all walk the tensors in the same order.
pub trait ParamGroup<T: Real> {
    type Vars;

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>);

    /// Builds the graph handles from leaves registered in `collect` order.
    fn bind_from(&self, leaves: &mut std::slice::Iter<'_, Var>) -> Self::Vars;
}

/// Registers every tensor of `group` as a learnable leaf of `g`.
/// Returns the typed handles and the flat leaf list in `collect` order.
pub fn bind<T: Real, P: ParamGroup<T>>(group: &P, g: &mut Graph<T>) -> (P::Vars, Vec<Var>) {
    let mut tensors = Vec::new();
    group.collect("", &mut tensors);
    let leaves: Vec<Var> = tensors
        .into_iter()
        .map(|(_, t)| g.param(t.clone()))
        .collect();
    let vars = group.bind_from(&mut leaves.iter());
    (vars, leaves)
}

pub(crate) fn next_leaf(leaves: &mut std::slice::Iter<'_, Var>) -> Var {
    *leaves.next().expect("parameter group bound out of order")
}

pub fn normal_tensor<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    std: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> Linear<T> {
    /// He-style initialization for LeakyReLU networks, zero bias.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, slope: f64) -> Self {
        let std = (2.0 / ((1.0 + slope * slope) * input as f64)).sqrt();
        Linear {
            weight: normal_tensor(rng, &[input, output], std),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: Tensor::identity(dim),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl LinearVars {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.weight)?;
        Ok(g.add_row(xw, self.bias)?)
    }
}

impl<T: Real> ParamGroup<T> for Linear<T> {
    type Vars = LinearVars;

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}weight"), &self.weight));
        out.push((format!("{prefix}bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    fn bind_from(&self, leaves: &mut std::slice::Iter<'_, Var>) -> LinearVars {
        LinearVars {
            weight: next_leaf(leaves),
            bias: next_leaf(leaves),
        }
    }
}

/// Two linear layers with a LeakyReLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub first: Linear<T>,
    pub second: Linear<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub first: LinearVars,
    pub second: LinearVars,
}

impl<T: Real> Mlp<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, dim: usize, slope: f64) -> Self {
        Mlp {
            first: Linear::init(rng, input, dim, slope),
            second: Linear::init(rng, dim, dim, slope),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Mlp {
            first: Linear::identity(dim),
            second: Linear::identity(dim),
        }
    }
}

impl MlpVars {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, slope: T) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.leaky_relu(h, slope)?;
        self.second.forward(g, h)
    }
}

impl<T: Real> ParamGroup<T> for Mlp<T> {
    type Vars = MlpVars;

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.first.collect(&format!("{prefix}first."), out);
        self.second.collect(&format!("{prefix}second."), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.first.collect_mut(out);
        self.second.collect_mut(out);
    }

    fn bind_from(&self, leaves: &mut std::slice::Iter<'_, Var>) -> MlpVars {
        MlpVars {
            first: self.first.bind_from(leaves),
            second: self.second.bind_from(leaves),
        }
    }
}
