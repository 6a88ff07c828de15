use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bmp_core::model::ModelConfig;
use bmp_core::training::{LossWeights, TrainConfig};
use bmp_core::visual::ResidueMode;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

/// Switches that remove one ingredient of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[allow(clippy::enum_variant_names)]
pub enum Ablation {
    /// Naive message passing for training and inference; no branch blocking.
    NoBlocking,
    /// No residue is subtracted from the visual feature.
    NoResidue,
    NoLv,
    NoLc,
    NoAux,
    NoLr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    UtZappos,
    MitStates,
}

impl Preset {
    pub fn weights(self) -> LossWeights {
        match self {
            Preset::UtZappos => LossWeights::UT_ZAPPOS,
            Preset::MitStates => LossWeights::MIT_STATES,
        }
    }
}

fn default_residue() -> ResidueMode {
    ResidueMode::Global
}

fn default_true() -> bool {
    true
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Everything a training run needs. Relative paths are resolved against the
/// directory of the config file.
///
/// ```json
/// {
///   "manifest": "data/manifest.json",   // dataset manifest
///   "features": "data/features.bmpf",   // feature file
///   "out_dir": "runs/default",          // every output goes here
///   "dim": null,                        // model width; null = feature dimension
///   "residue": "global",                // global | conditioned | off
///   "edge_blocking": true,
///   "precision": "f32",                 // f32 | f64
///   "ablations": [],                    // no-blocking, no-residue, no-lv, no-lc, no-aux, no-lr
///   "train": { "margin": 0.5, "tau": 0.05, "batch_size": 512,
///              "learning_rate": 0.0003, "epochs": 200, "seed": 0,
///              "weights": { "visual": 10, "concept": 0.5, "aux": 1, "reconstruction": 10 } }
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub features: PathBuf,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default = "default_residue")]
    pub residue: ResidueMode,
    #[serde(default = "default_true")]
    pub edge_blocking: bool,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub preset: Option<Preset>,
    pub lambda_v: Option<f64>,
    pub lambda_c: Option<f64>,
    pub lambda_a: Option<f64>,
    pub lambda_r: Option<f64>,
    pub ablations: Vec<Ablation>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.features, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies overrides and ablations. Applying the same ablations twice is a
    /// no-op, so a resolved config re-runs identically.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(epochs) = o.epochs {
            self.train.epochs = epochs;
        }
        if let Some(p) = o.preset {
            self.train.weights = p.weights();
        }
        let w = &mut self.train.weights;
        for (slot, value) in [
            (&mut w.visual, o.lambda_v),
            (&mut w.concept, o.lambda_c),
            (&mut w.aux, o.lambda_a),
            (&mut w.reconstruction, o.lambda_r),
        ] {
            if let Some(v) = value {
                *slot = v;
            }
        }
        self.ablations.extend(o.ablations.iter().copied());
        self.ablations.sort();
        self.ablations.dedup();
        for a in self.ablations.clone() {
            match a {
                Ablation::NoBlocking => {
                    self.edge_blocking = false;
                    self.train.tau = 0.0;
                }
                Ablation::NoResidue => self.residue = ResidueMode::Off,
                Ablation::NoLv => self.train.weights.visual = 0.0,
                Ablation::NoLc => self.train.weights.concept = 0.0,
                Ablation::NoAux => self.train.weights.aux = 0.0,
                Ablation::NoLr => self.train.weights.reconstruction = 0.0,
            }
        }
        self.train.validate()?;
        if self.dim == Some(0) {
            bail!("invalid config field `dim`: must be positive");
        }
        Ok(self)
    }

    pub fn model_config(&self, n_attrs: usize, n_objs: usize, input_dim: usize) -> ModelConfig {
        let mut m = ModelConfig::new(n_attrs, n_objs, input_dim, self.dim.unwrap_or(input_dim));
        m.residue = self.residue;
        m.edge_blocking = self.edge_blocking;
        m
    }

    /// Same config with absolute paths, for writing next to the outputs.
    pub fn absolute(&self) -> Result<Self> {
        let mut cfg = self.clone();
        for p in [&mut cfg.manifest, &mut cfg.features, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = std::env::current_dir()?.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        serde_json::from_str(r#"{"manifest": "m.json", "features": "f.bmpf"}"#).unwrap()
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = base();
        assert_eq!(cfg.train, TrainConfig::default());
        assert!(cfg.edge_blocking);
        assert_eq!(cfg.residue, ResidueMode::Global);
        assert_eq!(cfg.dim, None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"manifest": "m", "features": "f", "lamda_r": 3}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("lamda_r"));
        let err = serde_json::from_str::<RunConfig>(
            r#"{"manifest": "m", "features": "f", "train": {"weights": {"visual": 1, "concept": 1, "aux": 1, "recon": 1}}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("recon"));
    }

    #[test]
    fn no_blocking_disables_both_kinds_of_blocking() {
        let o = Overrides {
            ablations: vec![Ablation::NoBlocking],
            ..Default::default()
        };
        let cfg = base().resolve(&o).unwrap();
        assert!(!cfg.edge_blocking);
        assert_eq!(cfg.train.tau, 0.0);
        assert_eq!(cfg.clone().resolve(&Overrides::default()).unwrap(), cfg);
    }

    #[test]
    fn lambda_override_wins_over_preset() {
        let o = Overrides {
            preset: Some(Preset::MitStates),
            lambda_r: Some(50.0),
            ..Default::default()
        };
        let cfg = base().resolve(&o).unwrap();
        assert_eq!(cfg.train.weights.visual, 20.0);
        assert_eq!(cfg.train.weights.reconstruction, 50.0);
    }

    #[test]
    fn loss_ablations_zero_their_weight() {
        let o = Overrides {
            ablations: vec![
                Ablation::NoLv,
                Ablation::NoLc,
                Ablation::NoAux,
                Ablation::NoLr,
                Ablation::NoResidue,
            ],
            ..Default::default()
        };
        let cfg = base().resolve(&o).unwrap();
        let w = cfg.train.weights;
        assert_eq!(
            (w.visual, w.concept, w.aux, w.reconstruction),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(cfg.residue, ResidueMode::Off);
    }
}
