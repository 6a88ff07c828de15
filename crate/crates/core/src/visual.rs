//! Visual module: backbone feature -> composite feature with the residue
//! removed -> attribute and object primitive features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{next_leaf, Linear, LinearVars, Mlp, MlpVars, ParamGroup};
use crate::tensor::{Graph, Real, Tensor, Var};

/// How the residue subtracted from the composite feature is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidueMode {
    /// One learned Gaussian shared by all images.
    Global,
    /// Mean and log-variance predicted from the transformed feature.
    Conditioned,
    /// No residue is subtracted.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// Residue sampled by reparameterization.
    Train,
    /// Residue is the distribution mean.
    Infer,
}

/// Initial residue log-variance.
pub const RESIDUE_LOGVAR_INIT: f64 = -4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VisualParams<T> {
    pub transform: Mlp<T>,
    /// `[d]`
    pub residue_mu: Tensor<T>,
    /// `[d]`
    pub residue_logvar: Tensor<T>,
    /// Present in [`ResidueMode::Conditioned`]: heads for mean and log-variance.
    pub residue_heads: Option<(Linear<T>, Linear<T>)>,
    pub attr_head: Mlp<T>,
    pub obj_head: Mlp<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct VisualVars {
    pub transform: MlpVars,
    pub residue_mu: Var,
    pub residue_logvar: Var,
    pub residue_heads: Option<(LinearVars, LinearVars)>,
    pub attr_head: MlpVars,
    pub obj_head: MlpVars,
}

impl<T: Real> VisualParams<T> {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        input_dim: usize,
        dim: usize,
        residue: ResidueMode,
        slope: f64,
    ) -> Self {
        let transform = Mlp::init(rng, input_dim, dim, slope);
        let residue_heads = match residue {
            ResidueMode::Conditioned => {
                let mu = Linear::init(rng, dim, dim, slope);
                let mut logvar = Linear::init(rng, dim, dim, slope);
                logvar.weight = logvar.weight.map(|w| w * T::lit(0.01));
                logvar.bias = Tensor::full(&[dim], T::lit(RESIDUE_LOGVAR_INIT));
                Some((mu, logvar))
            }
            _ => None,
        };
        VisualParams {
            transform,
            residue_mu: Tensor::zeros(&[dim]),
            residue_logvar: Tensor::full(&[dim], T::lit(RESIDUE_LOGVAR_INIT)),
            residue_heads,
            attr_head: Mlp::init(rng, dim, dim, slope),
            obj_head: Mlp::init(rng, dim, dim, slope),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.transform.first.input_dim()
    }

    pub fn dim(&self) -> usize {
        self.residue_mu.len()
    }
}

impl<T: Real> ParamGroup<T> for VisualParams<T> {
    type Vars = VisualVars;

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.transform.collect(&format!("{prefix}transform."), out);
        out.push((format!("{prefix}residue_mu"), &self.residue_mu));
        out.push((format!("{prefix}residue_logvar"), &self.residue_logvar));
        if let Some((mu, logvar)) = &self.residue_heads {
            mu.collect(&format!("{prefix}residue_mu_head."), out);
            logvar.collect(&format!("{prefix}residue_logvar_head."), out);
        }
        self.attr_head.collect(&format!("{prefix}attr_head."), out);
        self.obj_head.collect(&format!("{prefix}obj_head."), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.transform.collect_mut(out);
        out.push(&mut self.residue_mu);
        out.push(&mut self.residue_logvar);
        if let Some((mu, logvar)) = &mut self.residue_heads {
            mu.collect_mut(out);
            logvar.collect_mut(out);
        }
        self.attr_head.collect_mut(out);
        self.obj_head.collect_mut(out);
    }

    fn bind_from(&self, leaves: &mut std::slice::Iter<'_, Var>) -> VisualVars {
        let transform = self.transform.bind_from(leaves);
        let residue_mu = next_leaf(leaves);
        let residue_logvar = next_leaf(leaves);
        let residue_heads = self
            .residue_heads
            .as_ref()
            .map(|(mu, logvar)| (mu.bind_from(leaves), logvar.bind_from(leaves)));
        VisualVars {
            transform,
            residue_mu,
            residue_logvar,
            residue_heads,
            attr_head: self.attr_head.bind_from(leaves),
            obj_head: self.obj_head.bind_from(leaves),
        }
    }
}

impl VisualVars {
    /// Composite features `x' - r(x')` for a batch of backbone features
    /// `[N, d_in]`. `noise` (`[N, d]`, standard normal) is required in train
    /// mode unless the residue is off.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        features: Var,
        residue: ResidueMode,
        mode: EncodeMode,
        noise: Option<Tensor<T>>,
        slope: T,
    ) -> Result<Var> {
        let transformed = self.transform.forward(g, features, slope)?;
        let (mu, logvar) = match (residue, self.residue_heads) {
            (ResidueMode::Off, _) => return Ok(transformed),
            (ResidueMode::Conditioned, Some((mu_head, lv_head))) => (
                mu_head.forward(g, transformed)?,
                lv_head.forward(g, transformed)?,
            ),
            (ResidueMode::Conditioned, None) => {
                return Err(Error::config(
                    "residue",
                    "conditioned residue needs residue heads",
                ))
            }
            (ResidueMode::Global, _) => (self.residue_mu, self.residue_logvar),
        };
        let sample = match mode {
            EncodeMode::Infer => mu,
            EncodeMode::Train => {
                let noise =
                    noise.ok_or_else(|| Error::config("noise", "train mode needs a noise draw"))?;
                g.reparameterize(mu, logvar, noise)?
            }
        };
        let shape_of_sample = g.value(sample).rank();
        if shape_of_sample == 1 {
            let neg = g.scale(sample, -T::one())?;
            Ok(g.add_row(transformed, neg)?)
        } else {
            Ok(g.sub(transformed, sample)?)
        }
    }

    /// Attribute and object primitive features.
    pub fn extract<T: Real>(
        &self,
        g: &mut Graph<T>,
        composite: Var,
        slope: T,
    ) -> Result<(Var, Var)> {
        let a = self.attr_head.forward(g, composite, slope)?;
        let o = self.obj_head.forward(g, composite, slope)?;
        Ok((a, o))
    }
}

fn check_input<T: Real>(params: &VisualParams<T>, features: &Tensor<T>) -> Result<()> {
    let ok = features.rank() == 2 && features.shape()[1] == params.input_dim();
    if !ok {
        return Err(crate::tensor::TensorError::Shape {
            op: "encode_composite",
            lhs: vec![params.input_dim()],
            rhs: features.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Composite features of a `[N, d_in]` batch.
pub fn encode_composite<T: Real>(
    params: &VisualParams<T>,
    features: &Tensor<T>,
    residue: ResidueMode,
    mode: EncodeMode,
    noise: Option<Tensor<T>>,
    slope: T,
) -> Result<Tensor<T>> {
    check_input(params, features)?;
    let mut g = Graph::new();
    let (vars, _) = crate::nn::bind(params, &mut g);
    let x = g.constant(features.clone());
    let out = vars.encode(&mut g, x, residue, mode, noise, slope)?;
    Ok(g.value(out).clone())
}

/// Attribute and object features of `[N, d]` composite features.
pub fn extract_primitives<T: Real>(
    params: &VisualParams<T>,
    composite: &Tensor<T>,
    slope: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let (vars, _) = crate::nn::bind(params, &mut g);
    let x = g.constant(composite.clone());
    let (a, o) = vars.extract(&mut g, x, slope)?;
    Ok((g.value(a).clone(), g.value(o).clone()))
}
