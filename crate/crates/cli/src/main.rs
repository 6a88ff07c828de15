//! `bmp`: synthesize datasets, train and evaluate from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bmp_core::data::Split;
use clap::{Parser, Subcommand, ValueEnum};

use config::{Ablation, Overrides, Preset, RunConfig};

#[derive(Parser)]
#[command(
    name = "bmp",
    version,
    about = "Compositional zero-shot recognition with blocked message passing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic attribute-object world.
    Synth {
        /// Synthetic world config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes metrics.jsonl, last.ckpt and best.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Loss-weight preset.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        lambda_v: Option<f64>,
        #[arg(long)]
        lambda_c: Option<f64>,
        #[arg(long)]
        lambda_a: Option<f64>,
        #[arg(long)]
        lambda_r: Option<f64>,
        /// Remove one ingredient; may be repeated.
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// Continue from <out>/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint; writes report.json and curve.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "test")]
        split: Vec<SplitArg>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        topk: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a CSV of feature rows into a feature file.
    Convert {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// The first CSV line is a header.
        #[arg(long)]
        header: bool,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("BMP_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("BMP_THREADS must be a number, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Synth { config, out, seed } => commands::synth(config.as_deref(), &out, seed),
        Command::Train {
            config,
            out,
            seed,
            epochs,
            preset,
            lambda_v,
            lambda_c,
            lambda_a,
            lambda_r,
            ablate,
            resume,
        } => {
            let overrides = Overrides {
                out_dir: out,
                seed,
                epochs,
                preset,
                lambda_v,
                lambda_c,
                lambda_a,
                lambda_r,
                ablations: ablate,
            };
            let cfg = RunConfig::read(&config)?.resolve(&overrides)?;
            commands::train(&cfg, resume)
        }
        Command::Eval {
            checkpoint,
            manifest,
            features,
            split,
            topk,
            out,
        } => {
            if topk.contains(&0) {
                bail!("--topk values must be at least 1");
            }
            let splits: Vec<Split> = split.into_iter().map(Split::from).collect();
            let report = commands::evaluate(&commands::EvalArgs {
                checkpoint: &checkpoint,
                manifest: &manifest,
                features: &features,
                splits: &splits,
                topk: &topk,
                out: &out,
            })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Convert { csv, out, header } => commands::convert(&csv, &out, header),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
