use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptParams, ConceptVars, MpMode};
use crate::error::{Error, Result};
use crate::nn::{bind, Linear, LinearVars, ParamGroup};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::universe::PairUniverse;
use crate::visual::{ResidueMode, VisualParams, VisualVars};

/// Negative slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Architecture and the inference-relevant switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_attrs: usize,
    pub n_objs: usize,
    /// Dimension of the ingested backbone features.
    pub input_dim: usize,
    /// Dimension of concept and visual features.
    pub dim: usize,
    pub residue: ResidueMode,
    /// Edge blocking in the concept module. When off, naive message passing is
    /// used for training and inference alike.
    pub edge_blocking: bool,
    pub leaky_slope: f64,
}

impl ModelConfig {
    pub fn new(n_attrs: usize, n_objs: usize, input_dim: usize, dim: usize) -> Self {
        ModelConfig {
            n_attrs,
            n_objs,
            input_dim,
            dim,
            residue: ResidueMode::Global,
            edge_blocking: true,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    /// Mode used for the features that are matched against images.
    pub fn matching_mode(&self) -> MpMode {
        if self.edge_blocking {
            MpMode::Blocked
        } else {
            MpMode::Naive
        }
    }
}

/// Every learnable parameter of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub concept: ConceptParams<T>,
    pub visual: VisualParams<T>,
    /// Softmax classifier over attributes applied to attribute concept features.
    pub attr_classifier: Linear<T>,
    /// Softmax classifier over objects applied to object concept features.
    pub obj_classifier: Linear<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub concept: ConceptVars,
    pub visual: VisualVars,
    pub attr_classifier: LinearVars,
    pub obj_classifier: LinearVars,
}

impl<T: Real> Model<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let n = config.n_attrs + config.n_objs;
        let concept = ConceptParams::init(rng, n, config.dim);
        let visual = VisualParams::init(
            rng,
            config.input_dim,
            config.dim,
            config.residue,
            config.leaky_slope,
        );
        let attr_classifier = Linear::init(rng, config.dim, config.n_attrs, config.leaky_slope);
        let obj_classifier = Linear::init(rng, config.dim, config.n_objs, config.leaky_slope);
        Model {
            config,
            concept,
            visual,
            attr_classifier,
            obj_classifier,
        }
    }

    pub fn slope(&self) -> T {
        T::lit(self.config.leaky_slope)
    }

    pub fn check_universe(&self, universe: &PairUniverse) -> Result<()> {
        if universe.n_attrs() != self.config.n_attrs || universe.n_objs() != self.config.n_objs {
            return Err(Error::CheckpointMismatch(format!(
                "model vocabulary is {} attributes / {} objects, data has {} / {}",
                self.config.n_attrs,
                self.config.n_objs,
                universe.n_attrs(),
                universe.n_objs()
            )));
        }
        Ok(())
    }

    /// Named parameter tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers all parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> (ModelVars, Vec<Var>) {
        bind(self, g)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            concept: ConceptParams {
                keys: self.concept.keys.cast(),
                queries: self.concept.queries.cast(),
                values: self.concept.values.cast(),
                transforms: self.concept.transforms.cast(),
                biases: self.concept.biases.cast(),
                w_attr: self.concept.w_attr.cast(),
                w_obj: self.concept.w_obj.cast(),
            },
            visual: VisualParams {
                transform: cast_mlp(&self.visual.transform),
                residue_mu: self.visual.residue_mu.cast(),
                residue_logvar: self.visual.residue_logvar.cast(),
                residue_heads: self
                    .visual
                    .residue_heads
                    .as_ref()
                    .map(|(a, b)| (cast_linear(a), cast_linear(b))),
                attr_head: cast_mlp(&self.visual.attr_head),
                obj_head: cast_mlp(&self.visual.obj_head),
            },
            attr_classifier: cast_linear(&self.attr_classifier),
            obj_classifier: cast_linear(&self.obj_classifier),
        }
    }
}

fn cast_linear<T: Real, U: Real>(l: &Linear<T>) -> Linear<U> {
    Linear {
        weight: l.weight.cast(),
        bias: l.bias.cast(),
    }
}

fn cast_mlp<T: Real, U: Real>(m: &crate::nn::Mlp<T>) -> crate::nn::Mlp<U> {
    crate::nn::Mlp {
        first: cast_linear(&m.first),
        second: cast_linear(&m.second),
    }
}

impl<T: Real> ParamGroup<T> for Model<T> {
    type Vars = ModelVars;

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.concept.collect(&format!("{prefix}concept."), out);
        self.visual.collect(&format!("{prefix}visual."), out);
        self.attr_classifier
            .collect(&format!("{prefix}attr_classifier."), out);
        self.obj_classifier
            .collect(&format!("{prefix}obj_classifier."), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.concept.collect_mut(out);
        self.visual.collect_mut(out);
        self.attr_classifier.collect_mut(out);
        self.obj_classifier.collect_mut(out);
    }

    fn bind_from(&self, leaves: &mut std::slice::Iter<'_, Var>) -> ModelVars {
        ModelVars {
            concept: self.concept.bind_from(leaves),
            visual: self.visual.bind_from(leaves),
            attr_classifier: self.attr_classifier.bind_from(leaves),
            obj_classifier: self.obj_classifier.bind_from(leaves),
        }
    }
}
