use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bmp_core::checkpoint::Checkpoint;
use bmp_core::data::{
    generate_synthetic, load_dataset, Dataset, FeatureMatrix, Split, SyntheticWorldConfig,
};
use bmp_core::eval::{self, Report};
use bmp_core::model::Model;
use bmp_core::tensor::Real;
use bmp_core::training::{self, Trainer};
use bmp_core::Error;
use log::info;
use serde::Serialize;

use crate::config::{Precision, RunConfig};

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: SyntheticWorldConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticWorldConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dataset = generate_synthetic(&cfg)?;
    let (manifest, features) = dataset.save(out)?;
    write_json(&out.join("synth_config.json"), &cfg)?;
    println!(
        "wrote {} and {} ({} images, {} seen / {} unseen pairs)",
        manifest.display(),
        features.display(),
        dataset.images().len(),
        dataset.universe.seen().len(),
        dataset.universe.unseen().len()
    );
    Ok(())
}

pub fn convert(csv: &Path, out: &Path, header: bool) -> Result<()> {
    let features = FeatureMatrix::from_csv(csv, header)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    features.write(out)?;
    println!(
        "wrote {} ({} x {})",
        out.display(),
        features.count,
        features.dim
    );
    Ok(())
}

/// Paths of the files a training run produces.
pub struct RunFiles {
    pub resolved: PathBuf,
    pub metrics: PathBuf,
    pub last: PathBuf,
    pub best: PathBuf,
    pub batch_dump: PathBuf,
}

impl RunFiles {
    pub fn new(out: &Path) -> Self {
        RunFiles {
            resolved: out.join("resolved_config.json"),
            metrics: out.join("metrics.jsonl"),
            last: out.join("last.ckpt"),
            best: out.join("best.ckpt"),
            batch_dump: out.join("nonfinite_batch.json"),
        }
    }
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let dataset = load_dataset(&cfg.manifest, &cfg.features)?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, &dataset, resume),
        Precision::F64 => train_with::<f64>(cfg, &dataset, resume),
    }
}

fn train_with<T: Real>(cfg: &RunConfig, dataset: &Dataset, resume: bool) -> Result<()> {
    let out = &cfg.out_dir;
    create_dir(out)?;
    let files = RunFiles::new(out);
    write_json(&files.resolved, &cfg.absolute()?)?;

    let mut trainer: Trainer<T> = if resume {
        let ckpt = Checkpoint::<T>::read(&files.last)?;
        ckpt.check_universe(&dataset.universe)?;
        let mut t = ckpt.into_trainer()?;
        // the epoch budget may be extended on resume; everything else is restored
        t.config.epochs = cfg.train.epochs;
        info!(
            "resuming from {} at epoch {}",
            files.last.display(),
            t.epoch
        );
        t
    } else {
        let model_cfg = cfg.model_config(
            dataset.universe.n_attrs(),
            dataset.universe.n_objs(),
            dataset.input_dim(),
        );
        Trainer::new(model_cfg, cfg.train.clone())?
    };
    trainer.model.check_universe(&dataset.universe)?;

    let mut metrics = if resume && files.metrics.exists() {
        fs::OpenOptions::new().append(true).open(&files.metrics)
    } else {
        File::create(&files.metrics)
    }
    .with_context(|| format!("opening {}", files.metrics.display()))?;

    if !resume {
        Checkpoint::from_trainer(&trainer, &dataset.universe).write(&files.last)?;
        Checkpoint::from_model(&trainer.model, &dataset.universe).write(&files.best)?;
    }

    let universe = &dataset.universe;
    let result = training::train(&mut trainer, dataset, |record, t, improved| {
        let line = serde_json::to_string(&MetricsLine::from(record))
            .map_err(|e| Error::Evaluation(e.to_string()))?;
        writeln!(metrics, "{line}").map_err(|e| Error::Io {
            path: files.metrics.clone(),
            source: e,
        })?;
        Checkpoint::from_trainer(t, universe).write(&files.last)?;
        if improved {
            Checkpoint::from_model(&t.model, universe).write(&files.best)?;
        }
        Ok(())
    });
    let outcome = match result {
        Ok(o) => o,
        Err(Error::NonFiniteLoss { step, terms, batch }) => {
            write_json(&files.batch_dump, &batch)?;
            anyhow::bail!(
                "non-finite loss at step {step} ({terms}); offending batch written to {}",
                files.batch_dump.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    match (outcome.best_epoch, outcome.best_val_auc) {
        (Some(epoch), Some(auc)) => println!(
            "trained {} epochs; best validation AUC {:.2} at epoch {epoch}; checkpoint {}",
            trainer.epoch,
            100.0 * auc,
            files.best.display()
        ),
        _ => println!("no epochs run; initial checkpoint {}", files.best.display()),
    }
    Ok(())
}

/// One line of `metrics.jsonl`; AUC ×100.
#[derive(Serialize)]
struct MetricsLine {
    epoch: usize,
    #[serde(rename = "L_v")]
    visual: Option<f64>,
    #[serde(rename = "L_c")]
    concept: Option<f64>,
    #[serde(rename = "L_aux")]
    aux: Option<f64>,
    #[serde(rename = "L_r")]
    reconstruction: Option<f64>,
    total: f64,
    val_auc: f64,
}

impl From<&training::EpochRecord> for MetricsLine {
    fn from(r: &training::EpochRecord) -> Self {
        MetricsLine {
            epoch: r.epoch,
            visual: r.visual,
            concept: r.concept,
            aux: r.aux,
            reconstruction: r.reconstruction,
            total: r.total,
            val_auc: 100.0 * r.val_auc,
        }
    }
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub features: &'a Path,
    pub splits: &'a [Split],
    pub topk: &'a [usize],
    pub out: &'a Path,
}

pub fn evaluate(args: &EvalArgs<'_>) -> Result<Report> {
    let dataset = load_dataset(args.manifest, args.features)?;
    let ckpt = Checkpoint::<f64>::read(args.checkpoint)?;
    ckpt.check_universe(&dataset.universe)?;
    // scored in the precision the model was trained in; the f64 round trip of
    // f32 parameters is exact
    if ckpt.precision == f32::NAME {
        evaluate_model(&ckpt.model.cast::<f32>(), &dataset, args)
    } else {
        evaluate_model(&ckpt.model, &dataset, args)
    }
}

fn evaluate_model<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    args: &EvalArgs<'_>,
) -> Result<Report> {
    let mut evaluations = Vec::new();
    for &split in args.splits {
        evaluations.push(eval::evaluate_split(model, dataset, split, args.topk)?);
    }
    let report = eval::report(&evaluations);
    create_dir(args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    let csv = args.out.join("curve.csv");
    let mut w =
        BufWriter::new(File::create(&csv).with_context(|| format!("creating {}", csv.display()))?);
    w.write_all(eval::curves_csv(&evaluations).as_bytes())?;
    w.flush()?;
    Ok(report)
}
