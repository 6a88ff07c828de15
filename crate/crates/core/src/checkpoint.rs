//! Binary checkpoints of a model and, optionally, the full training state.
//!
//! ```text
//! "BMPC" | version: u32 | header length: u64 | JSON header
//!        | parameters, then Adam first and second moments (if present),
//!          each tensor as little-endian f64 in header order
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Real, Tensor};
use crate::training::{Adam, RngState, TrainConfig, Trainer};
use crate::universe::PairUniverse;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BMPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingMeta {
    config: TrainConfig,
    step: u64,
    epoch: usize,
    best: Option<(usize, f64)>,
    rng: RngState,
    adam_t: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    /// Precision the state was trained in.
    precision: String,
    model: ModelConfig,
    attributes: Vec<String>,
    objects: Vec<String>,
    tensors: Vec<TensorMeta>,
    training: Option<TrainingMeta>,
}

/// Training state beyond the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState<T> {
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: usize,
    pub best: Option<(usize, f64)>,
    pub rng: RngState,
    pub optimizer: Adam<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub precision: String,
    pub model: Model<T>,
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    pub training: Option<TrainingState<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, universe: &PairUniverse) -> Self {
        Checkpoint {
            precision: T::NAME.to_string(),
            model: model.clone(),
            attributes: universe.attributes().to_vec(),
            objects: universe.objects().to_vec(),
            training: None,
        }
    }

    pub fn from_trainer(trainer: &Trainer<T>, universe: &PairUniverse) -> Self {
        let mut ckpt = Self::from_model(&trainer.model, universe);
        ckpt.training = Some(TrainingState {
            config: trainer.config.clone(),
            step: trainer.step,
            epoch: trainer.epoch,
            best: trainer.best,
            rng: RngState::capture(&trainer.rng),
            optimizer: trainer.optimizer.clone(),
        });
        ckpt
    }

    /// Rejects data whose vocabulary differs from the checkpoint's.
    pub fn check_universe(&self, universe: &PairUniverse) -> Result<()> {
        if self.attributes.len() != universe.n_attrs() || self.objects.len() != universe.n_objs() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint vocabulary has {} attributes / {} objects, data has {} / {}",
                self.attributes.len(),
                self.objects.len(),
                universe.n_attrs(),
                universe.n_objs()
            )));
        }
        if self.attributes != universe.attributes() || self.objects != universe.objects() {
            return Err(Error::CheckpointMismatch(
                "attribute or object names differ from the data".into(),
            ));
        }
        Ok(())
    }

    /// Restores a trainer that continues exactly where this state left off.
    pub fn into_trainer(self) -> Result<Trainer<T>> {
        let state = self.training.ok_or_else(|| {
            Error::CheckpointMismatch("checkpoint holds no training state".into())
        })?;
        Ok(Trainer {
            model: self.model,
            optimizer: state.optimizer,
            config: state.config,
            rng: state.rng.restore(),
            step: state.step,
            epoch: state.epoch,
            best: state.best,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.model.named_tensors();
        let header = Header {
            precision: self.precision.clone(),
            model: self.model.config.clone(),
            attributes: self.attributes.clone(),
            objects: self.objects.clone(),
            tensors: named
                .iter()
                .map(|(name, t)| TensorMeta {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            training: self.training.as_ref().map(|s| TrainingMeta {
                config: s.config.clone(),
                step: s.step,
                epoch: s.epoch,
                best: s.best,
                rng: s.rng.clone(),
                adam_t: s.optimizer.t,
                adam_beta1: s.optimizer.beta1,
                adam_beta2: s.optimizer.beta2,
                adam_epsilon: s.optimizer.epsilon,
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |t: &Tensor<T>| {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        };
        for (_, t) in &named {
            push(t);
        }
        if let Some(s) = &self.training {
            s.optimizer.m.iter().for_each(&mut push);
            s.optimizer.v.iter().for_each(&mut push);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint (missing BMPC magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| {
            fail(format!(
                "header of {len} bytes runs past the end of the file"
            ))
        })?;
        let header: Header = serde_json::from_slice(body).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if header.attributes.len() != header.model.n_attrs
            || header.objects.len() != header.model.n_objs
        {
            return Err(fail("vocabulary and model configuration disagree".into()));
        }

        let mut cursor = bytes[16 + len..].chunks_exact(8);
        let mut read = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    cursor
                        .next()
                        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                        .ok_or_else(|| fail("tensor data is truncated".into()))
                })
                .collect::<Result<Vec<T>>>()?;
            Ok(Tensor::new(shape.to_vec(), data)?)
        };

        // the structure comes from the config; values are overwritten below
        let mut model: Model<T> =
            Model::init(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let stored: Vec<(String, Vec<usize>)> = header
            .tensors
            .iter()
            .map(|m| (m.name.clone(), m.shape.clone()))
            .collect();
        if expected != stored {
            return Err(Error::CheckpointMismatch(
                "stored tensors do not match the model configuration".into(),
            ));
        }
        for (slot, meta) in model.tensors_mut().into_iter().zip(&header.tensors) {
            *slot = read(&meta.shape)?;
        }
        let training = match header.training {
            None => None,
            Some(meta) => {
                let m = header
                    .tensors
                    .iter()
                    .map(|t| read(&t.shape))
                    .collect::<Result<Vec<_>>>()?;
                let v = header
                    .tensors
                    .iter()
                    .map(|t| read(&t.shape))
                    .collect::<Result<Vec<_>>>()?;
                Some(TrainingState {
                    optimizer: Adam {
                        learning_rate: meta.config.learning_rate,
                        beta1: meta.adam_beta1,
                        beta2: meta.adam_beta2,
                        epsilon: meta.adam_epsilon,
                        t: meta.adam_t,
                        m,
                        v,
                    },
                    config: meta.config,
                    step: meta.step,
                    epoch: meta.epoch,
                    best: meta.best,
                    rng: meta.rng,
                })
            }
        };
        if cursor.next().is_some() || !cursor.remainder().is_empty() {
            return Err(fail("trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint {
            precision: header.precision,
            model,
            attributes: header.attributes,
            objects: header.objects,
            training,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
