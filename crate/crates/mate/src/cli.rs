//! Argument parsing. Flags are translated into config keys and applied on
//! top of `--config`, then `--set KEY=VALUE` overrides are applied last.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mate_core::datagen::Split;

use crate::commands::{self, Axis, CorruptTarget};
use crate::config::ExperimentConfig;
use crate::UsageError;

#[derive(Parser, Debug)]
#[command(name = "mate", version, about = "Masked-autoencoder test-time training for point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, applied after every other flag.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic labelled dataset.
    Dataset(DatasetArgs),
    /// Train a checkpoint (joint or classification-only).
    Train(TrainArgs),
    /// Write corrupted copies of a dataset split.
    Corrupt(CorruptArgs),
    /// Adapt a checkpoint on a test stream and report accuracy.
    Ttt(TttArgs),
    /// Sweep one adaptation setting.
    Ablate(AblateArgs),
    /// Summarize run directories into a CSV and SVG charts.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training samples per class; validation and test get a quarter each.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub val_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Points per training and validation cloud.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub test_points: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest or its directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// joint or classification_only.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    #[arg(long, required_unless_present = "describe")]
    pub data: Option<PathBuf>,
    #[arg(long, required_unless_present = "describe")]
    pub out: Option<PathBuf>,
    /// A corruption name, or `all` for one subdirectory per kind.
    #[arg(long, conflicts_with = "compose", required_unless_present_any = ["compose", "describe"])]
    pub kind: Option<String>,
    /// `random2` for a random pair per sample, or `KIND+KIND`.
    #[arg(long)]
    pub compose: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Print the corruption parameter table as JSON and exit.
    #[arg(long)]
    pub describe: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TttFlags {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corrupted manifest, or a directory of per-kind manifests.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// standard, online or source_only.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Masked replicas per step.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// desk, modelnet40c, shapenet-c or scanobjectnn-c.
    #[arg(long)]
    pub preset: Option<String>,
    /// Use only the first N samples of each stream.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TttArgs {
    #[command(flatten)]
    pub flags: TttFlags,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// mask_ratio, stride or batch.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values; defaults to the standard grid of the axis.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<String>,
    #[command(flatten)]
    pub flags: TttFlags,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories, or directories whose subdirectories are runs.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

fn base(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn finish(mut cfg: ExperimentConfig, common: &Common, pairs: Vec<(&str, Option<String>)>) -> Result<ExperimentConfig> {
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.apply_overrides(&common.set)?;
    Ok(cfg)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn ttt_config(f: &TttFlags) -> Result<ExperimentConfig> {
    finish(
        base(&f.common)?,
        &f.common,
        vec![
            ("checkpoint", path(&f.checkpoint)),
            ("data", path(&f.data)),
            ("out", Some(f.out.display().to_string())),
            ("ttt.mode", f.mode.clone()),
            ("ttt.mask_ratio", s(&f.mask_ratio)),
            ("ttt.batch", s(&f.batch)),
            ("ttt.steps", s(&f.steps)),
            ("ttt.stride", s(&f.stride)),
            ("ttt.lr", s(&f.lr)),
            ("preset", f.preset.clone()),
            ("ttt.limit", s(&f.limit)),
        ],
    )
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(a) => {
            let quarter = a.per_class.map(|n| n / 4);
            let cfg = finish(
                base(&a.common)?,
                &a.common,
                vec![
                    ("out", Some(a.out.display().to_string())),
                    ("dataset.train_per_class", s(&a.per_class)),
                    ("dataset.val_per_class", s(&quarter)),
                    ("dataset.test_per_class", s(&quarter)),
                    ("dataset.train_per_class", s(&a.train_per_class)),
                    ("dataset.val_per_class", s(&a.val_per_class)),
                    ("dataset.test_per_class", s(&a.test_per_class)),
                    ("dataset.train_points", s(&a.points)),
                    ("dataset.test_points", s(&a.test_points)),
                ],
            )?;
            let hash = commands::dataset(&cfg)?;
            println!("manifest sha256 {hash}");
        }
        Command::Train(a) => {
            let cfg = finish(
                base(&a.common)?,
                &a.common,
                vec![
                    ("data", path(&a.data)),
                    ("out", Some(a.out.display().to_string())),
                    ("train.mode", a.mode.clone()),
                    ("train.epochs", s(&a.epochs)),
                    ("train.lambda", s(&a.lambda)),
                    ("train.lr", s(&a.lr)),
                    ("train.batch_size", s(&a.batch_size)),
                    ("train.mask_ratio", s(&a.mask_ratio)),
                ],
            )?;
            let (_, _, m) = commands::train(&cfg)?;
            println!(
                "{} parameters, {} epochs, test accuracy {}",
                m.parameters,
                m.epochs,
                m.test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Corrupt(a) => {
            if a.describe {
                print!("{}", commands::describe_corruptions());
                return Ok(());
            }
            let target = match (&a.kind, &a.compose) {
                (Some(k), None) => CorruptTarget::parse_kind(k)?,
                (None, Some(c)) => CorruptTarget::parse_compose(c)?,
                _ => return Err(UsageError("give exactly one of --kind or --compose".into()).into()),
            };
            let split = Split::from_name(&a.split).ok_or_else(|| UsageError(format!("unknown split `{}`", a.split)))?;
            let cfg = finish(base(&a.common)?, &a.common, vec![("data", path(&a.data)), ("out", path(&a.out))])?;
            commands::corrupt(&cfg, &target, split)?;
        }
        Command::Ttt(a) => {
            let cfg = ttt_config(&a.flags)?;
            let sm = commands::ttt(&cfg)?;
            println!(
                "{}: {} samples, accuracy {:.4}, mean accuracy {:.4}, adapted {}, {:.2} samples/s",
                sm.mode, sm.samples, sm.accuracy, sm.mean_accuracy, sm.adapted, sm.fps
            );
        }
        Command::Ablate(a) => {
            let axis = Axis::parse(&a.axis)?;
            let cfg = ttt_config(&a.flags)?;
            let grid: Vec<String> =
                if a.grid.is_empty() { axis.default_grid().iter().map(|v| v.to_string()).collect() } else { a.grid.clone() };
            for r in commands::ablate(&cfg, axis, &grid)? {
                println!("{} = {}: mean accuracy {:.4} (source-only {:.4})", r.axis, r.value, r.mean_accuracy, r.source_only_mean_accuracy);
            }
        }
        Command::Report(a) => {
            let cfg = finish(base(&a.common)?, &a.common, vec![("out", Some(a.out.display().to_string()))])?;
            for r in commands::report(&cfg, &a.runs)? {
                println!("{}: {} mean accuracy {:.4}", r.run, r.mode, r.mean_accuracy);
            }
        }
    }
    Ok(())
}
