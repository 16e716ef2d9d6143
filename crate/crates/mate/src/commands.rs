//! The experiment commands behind the CLI. Each takes a resolved
//! `ExperimentConfig`, locks its output directory and writes the resolved
//! config and version string next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mate_core::corrupt::{corrupt as apply_corruption, corrupt_compose, random_pair, CorruptionKind};
use mate_core::datagen::{generate_split, Split};
use mate_core::nn::ModelParams;
use mate_core::rng::derive_seed;
use mate_core::train::{evaluate_clean, train_joint, EpochLog, EpochObserver, TrainLog};
use mate_core::ttt::{self, RunReport, StreamSample, TttMode};
use serde::Serialize;

use crate::config::{ExperimentConfig, RESOLVED_FILE};
use crate::lock::DirLock;
use crate::manifest::{self, Entry, Manifest};
use crate::report::{self, Summary, SAMPLES_FILE, SUMMARY_FILE, TRAIN_LOG_FILE};
use crate::svg::{Chart, Series};
use crate::{checkpoint, pcb, UsageError, WallClock};

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| UsageError(format!("missing {flag}")).into())
}

fn write_cloud(path: &Path, cloud: &mate_core::PointCloud) -> Result<Option<String>> {
    let bytes = pcb::encode(cloud);
    fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(Some(manifest::sha256_hex(&bytes)))
}

/// Generate the synthetic dataset; returns the manifest's SHA-256.
pub fn dataset(cfg: &ExperimentConfig) -> Result<String> {
    let out = required(&cfg.out, "--out")?;
    let _lock = DirLock::acquire(out)?;
    let spec = cfg.dataset_spec();
    let mut entries = Vec::new();
    for split in Split::ALL {
        let dir = out.join(split.name());
        fs::create_dir_all(&dir)?;
        for (i, s) in generate_split(&spec, split)?.iter().enumerate() {
            let rel = format!("{}/{:05}.pcb", split.name(), i);
            let sha256 = write_cloud(&out.join(&rel), &s.cloud)?;
            entries.push(Entry { path: rel, label: s.label, split: split.name().into(), corruption: None, sha256 });
        }
    }
    cfg.write_resolved(out)?;
    manifest::write_atomic(&out.join(manifest::FILE_NAME), &entries)
}

struct Progress;

impl EpochObserver for Progress {
    fn on_epoch(&mut self, e: &EpochLog, _: &ModelParams) -> bool {
        let val = e.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
        eprintln!(
            "epoch {} ce {:.4} recon {:.4} total {:.4} train_acc {:.4}{val} lr {:.2e}",
            e.epoch, e.ce_loss, e.recon_loss, e.total_loss, e.train_acc, e.lr
        );
        true
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainMetrics {
    pub version: String,
    pub mode: String,
    pub parameters: usize,
    pub epochs: usize,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

pub fn train(cfg: &ExperimentConfig) -> Result<(ModelParams, TrainLog, TrainMetrics)> {
    let out = required(&cfg.out, "--out")?;
    let data = required(&cfg.data, "--data")?;
    let _lock = DirLock::acquire(out)?;
    let man = Manifest::load(data)?;
    let model = cfg.model_config();
    ensure!(
        man.num_classes() <= model.num_classes,
        "manifest has labels up to {} but model.num_classes is {}",
        man.num_classes() - 1,
        model.num_classes
    );
    let has = |s: Split| man.split(s).next().is_some();
    let train_set = man.labeled(Split::Train, model.num_classes)?;
    let val_set = if has(Split::Val) { Some(man.labeled(Split::Val, model.num_classes)?) } else { None };
    let test_set = if has(Split::Test) { Some(man.labeled(Split::Test, model.num_classes)?) } else { None };

    let mut params = ModelParams::new(model)?;
    let log = train_joint(&mut params, &train_set, val_set.as_ref(), &cfg.joint_config(), &mut Progress)?;
    checkpoint::save(&out.join(checkpoint::FILE_NAME), &params)?;
    report::write_train_log(&out.join(TRAIN_LOG_FILE), &log)?;
    let metrics = TrainMetrics {
        version: crate::config::version_string(),
        mode: cfg.train.mode.name().into(),
        parameters: params.num_parameters(),
        epochs: log.epochs.len(),
        val_accuracy: val_set.as_ref().map(|v| evaluate_clean(v, &params)).transpose()?.map(|e| e.accuracy),
        test_accuracy: test_set.as_ref().map(|t| evaluate_clean(t, &params)).transpose()?.map(|e| e.accuracy),
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    cfg.write_resolved(out)?;
    Ok((params, log, metrics))
}

/// What `corrupt` applies to each sample.
#[derive(Clone, Debug, PartialEq)]
pub enum CorruptTarget {
    One(CorruptionKind),
    /// Every kind, each into its own subdirectory.
    All,
    /// A fixed ordered pair.
    Pair(CorruptionKind, CorruptionKind),
    /// A random pair drawn per sample.
    RandomPair,
}

impl CorruptTarget {
    pub fn parse_kind(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::All);
        }
        s.parse().map(Self::One).map_err(|_| UsageError(format!("unknown corruption kind `{s}`")).into())
    }

    pub fn parse_compose(s: &str) -> Result<Self> {
        if s == "random2" {
            return Ok(Self::RandomPair);
        }
        let bad = || anyhow::Error::from(UsageError(format!("`--compose` expects random2 or KIND+KIND, got `{s}`")));
        let (a, b) = s.split_once('+').ok_or_else(bad)?;
        Ok(Self::Pair(a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    }
}

fn corrupt_split(src: &Manifest, split: Split, out: &Path, seed: u64, pick: &dyn Fn(u64) -> (Vec<CorruptionKind>, String)) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for (i, e) in src.split(split).enumerate() {
        let cloud = src.read(e)?;
        let s = derive_seed(seed, i as u64);
        let (kinds, tag) = pick(s);
        let c = match kinds[..] {
            [k] => apply_corruption(&cloud, k, s),
            [a, b] => corrupt_compose(&cloud, (a, b), s),
            _ => unreachable!(),
        }
        .with_context(|| format!("{tag} on {}", e.path))?;
        let rel = format!("{i:05}.pcb");
        let sha256 = write_cloud(&out.join(&rel), &c)?;
        entries.push(Entry { path: rel, label: e.label, split: split.name().into(), corruption: Some(tag), sha256 });
    }
    ensure!(!entries.is_empty(), "input manifest has no `{}` samples", split.name());
    manifest::write_atomic(&out.join(manifest::FILE_NAME), &entries)?;
    Ok(())
}

pub fn corrupt(cfg: &ExperimentConfig, target: &CorruptTarget, split: Split) -> Result<()> {
    let out = required(&cfg.out, "--out")?;
    let data = required(&cfg.data, "--data")?;
    let src = Manifest::load(data)?;
    let _lock = DirLock::acquire(out)?;
    let seed = cfg.seed;
    match *target {
        CorruptTarget::One(k) => corrupt_split(&src, split, out, seed, &|_| (vec![k], k.name().into()))?,
        CorruptTarget::All => {
            for k in CorruptionKind::ALL {
                corrupt_split(&src, split, &out.join(k.name()), seed, &|_| (vec![k], k.name().into()))?;
            }
        }
        CorruptTarget::Pair(a, b) => corrupt_split(&src, split, out, seed, &|_| (vec![a, b], format!("{a}+{b}")))?,
        CorruptTarget::RandomPair => corrupt_split(&src, split, out, seed, &|s| {
            let (a, b) = random_pair(s);
            (vec![a, b], format!("{a}+{b}"))
        })?,
    }
    cfg.write_resolved(out)
}

/// The corruption parameter table as JSON.
pub fn describe_corruptions() -> String {
    let kinds: Vec<serde_json::Value> = CorruptionKind::ALL
        .iter()
        .map(|k| {
            let params: serde_json::Map<String, serde_json::Value> =
                k.parameters().iter().map(|(n, v)| (n.to_string(), serde_json::json!(v))).collect();
            serde_json::json!({
                "name": k.name(),
                "description": k.description(),
                "min_points": k.min_points(),
                "parameters": params,
            })
        })
        .collect();
    serde_json::to_string_pretty(&kinds).expect("table serializes") + "\n"
}

/// One stream per manifest: `data` itself, or every subdirectory holding a
/// manifest (as written by `corrupt --kind all`), in name order.
pub fn load_streams(data: &Path) -> Result<Vec<(String, Vec<StreamSample>)>> {
    if data.is_file() || data.join(manifest::FILE_NAME).is_file() {
        return Ok(vec![(data.display().to_string(), Manifest::load(data)?.stream()?)]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)
        .with_context(|| format!("reading {}", data.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(manifest::FILE_NAME).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no manifest in {} or its subdirectories", data.display());
    }
    dirs.iter().map(|d| Ok((d.display().to_string(), Manifest::load(d)?.stream()?))).collect()
}

/// Run each stream from the checkpoint independently and concatenate the
/// records; indices continue across streams.
pub fn run_streams(
    streams: &[(String, Vec<StreamSample>)],
    ckpt: &ModelParams,
    cfg: &ExperimentConfig,
) -> Result<RunReport> {
    let tcfg = cfg.ttt_config();
    let clock = WallClock::new();
    let mut all = RunReport { config: tcfg.clone(), records: Vec::new() };
    for (_, stream) in streams {
        let n = cfg.ttt.limit.unwrap_or(stream.len()).min(stream.len());
        let mut r = ttt::run(&stream[..n], ckpt, &tcfg, &clock)?;
        let offset = all.records.len();
        for rec in &mut r.records {
            rec.index += offset;
        }
        all.records.extend(r.records);
    }
    Ok(all)
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, report: &RunReport) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    report::write_samples(&dir.join(SAMPLES_FILE), report)?;
    let summary = Summary::of(report);
    summary.write(&dir.join(SUMMARY_FILE))?;
    cfg.write_resolved(dir)?;
    Ok(summary)
}

pub fn ttt(cfg: &ExperimentConfig) -> Result<Summary> {
    let out = required(&cfg.out, "--out")?;
    let ckpt = checkpoint::load(required(&cfg.checkpoint, "--checkpoint")?)?;
    let streams = load_streams(required(&cfg.data, "--data")?)?;
    let _lock = DirLock::acquire(out)?;
    let report = run_streams(&streams, &ckpt, cfg)?;
    write_run(out, cfg, &report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    MaskRatio,
    Stride,
    Batch,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask_ratio" => Ok(Self::MaskRatio),
            "stride" => Ok(Self::Stride),
            "batch" => Ok(Self::Batch),
            _ => Err(UsageError(format!("unknown ablation axis `{s}` (mask_ratio, stride, batch)")).into()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MaskRatio => "mask_ratio",
            Self::Stride => "stride",
            Self::Batch => "batch",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::MaskRatio => "ttt.mask_ratio",
            Self::Stride => "ttt.stride",
            Self::Batch => "ttt.batch",
        }
    }

    pub fn default_grid(self) -> &'static [&'static str] {
        match self {
            Self::MaskRatio => &["0.975", "0.95", "0.9", "0.8", "0.7", "0.6"],
            Self::Stride => &["1", "5", "20", "100", "300"],
            Self::Batch => &["1", "2", "8", "16", "24", "32", "40", "48"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub mode: String,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_accuracy: f64,
    pub adapted: usize,
    pub fps: f64,
    pub source_only_mean_accuracy: f64,
}

/// Run the base config once per grid value, plus one source-only run, and
/// write `ablation.csv`.
pub fn ablate(cfg: &ExperimentConfig, axis: Axis, grid: &[String]) -> Result<Vec<AblationRow>> {
    let out = required(&cfg.out, "--out")?;
    let ckpt = checkpoint::load(required(&cfg.checkpoint, "--checkpoint")?)?;
    let streams = load_streams(required(&cfg.data, "--data")?)?;
    let mut runs = Vec::new();
    for v in grid {
        let mut c = cfg.clone();
        c.set(axis.key(), v)?;
        c.ttt_config().validate(&ckpt)?;
        runs.push((v.clone(), c));
    }
    let _lock = DirLock::acquire(out)?;
    let mut base = cfg.clone();
    base.ttt.mode = TttMode::SourceOnly;
    let source = write_run(&out.join("source_only"), &base, &run_streams(&streams, &ckpt, &base)?)?;
    let mut rows = Vec::new();
    for (v, c) in runs {
        let s = write_run(&out.join(format!("{}-{v}", axis.name())), &c, &run_streams(&streams, &ckpt, &c)?)?;
        eprintln!("{} = {v}: mean accuracy {:.4}", axis.name(), s.mean_accuracy);
        rows.push(AblationRow {
            axis: axis.name().into(),
            value: v,
            mode: s.mode,
            samples: s.samples,
            accuracy: s.accuracy,
            mean_accuracy: s.mean_accuracy,
            adapted: s.adapted,
            fps: s.fps,
            source_only_mean_accuracy: source.mean_accuracy,
        });
    }
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    cfg.write_resolved(out)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub run: String,
    pub mode: String,
    pub mask_ratio: f64,
    pub stride: usize,
    pub batch: usize,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_accuracy: f64,
    pub adapted: usize,
    #[serde(skip)]
    pub loss_per_step: Vec<f64>,
}

/// Run directories under `root`: itself if it holds `samples.csv`, else its
/// immediate subdirectories that do.
fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(SAMPLES_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SAMPLES_FILE).is_file())
        .collect();
    v.sort();
    Ok(v)
}

fn summarize_run(dir: &Path) -> Result<RunRow> {
    let rows = report::read_samples(&dir.join(SAMPLES_FILE))?;
    ensure!(!rows.is_empty(), "{} has no samples", dir.display());
    let cfg = if dir.join(RESOLVED_FILE).is_file() {
        ExperimentConfig::load(&dir.join(RESOLVED_FILE))?
    } else {
        ExperimentConfig::default()
    };
    let (accuracy, mean_accuracy) = report::accuracy_from_rows(&rows);
    let steps = rows.iter().map(|r| r.losses.len()).max().unwrap_or(0);
    let loss_per_step = (0..steps)
        .map_while(|s| {
            let v: Vec<f64> = rows.iter().filter_map(|r| r.losses.get(s).copied()).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Ok(RunRow {
        run: dir.display().to_string(),
        mode: cfg.ttt.mode.name().into(),
        mask_ratio: cfg.ttt.mask_ratio,
        stride: cfg.ttt.stride,
        batch: cfg.ttt.batch,
        samples: rows.len(),
        accuracy,
        mean_accuracy,
        adapted: rows.iter().filter(|r| r.adapted).count(),
        loss_per_step,
    })
}

fn by_mode(runs: &[RunRow], x: impl Fn(&RunRow) -> f64, modes: &[TttMode]) -> Vec<Series> {
    modes
        .iter()
        .map(|m| Series {
            name: m.name().into(),
            points: runs.iter().filter(|r| r.mode == m.name()).map(|r| (x(r), r.mean_accuracy)).collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect()
}

/// Source-only accuracy drawn flat across the x-range of the other series.
fn baseline(runs: &[RunRow], series: &[Series]) -> Option<Series> {
    let base: Vec<&RunRow> = runs.iter().filter(|r| r.mode == TttMode::SourceOnly.name()).collect();
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    if base.is_empty() || xs.is_empty() {
        return None;
    }
    let y = base.iter().map(|r| r.mean_accuracy).sum::<f64>() / base.len() as f64;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(Series { name: "source_only".into(), points: vec![(lo, y), (hi, y)] })
}

/// Summarize run directories into `summary.csv` and three SVG charts.
pub fn report(cfg: &ExperimentConfig, roots: &[PathBuf]) -> Result<Vec<RunRow>> {
    let out = required(&cfg.out, "--out")?;
    let mut dirs = Vec::new();
    for r in roots {
        let found = find_runs(r)?;
        if found.is_empty() {
            bail!("{} contains no runs (no {SAMPLES_FILE})", r.display());
        }
        dirs.extend(found);
    }
    let runs = dirs.iter().map(|d| summarize_run(d)).collect::<Result<Vec<_>>>()?;
    let _lock = DirLock::acquire(out)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    for r in &runs {
        w.serialize(r)?;
    }
    w.flush()?;

    let adaptive = [TttMode::Online, TttMode::Standard];
    let mut stride = by_mode(&runs, |r| r.stride as f64, &[TttMode::Online]);
    stride.extend(baseline(&runs, &stride));
    let mut mask = by_mode(&runs, |r| r.mask_ratio, &adaptive);
    mask.extend(baseline(&runs, &mask));
    let multi: Vec<&RunRow> = runs.iter().filter(|r| r.loss_per_step.len() >= 2).collect();
    let traced: Vec<&RunRow> = if multi.is_empty() { runs.iter().filter(|r| !r.loss_per_step.is_empty()).collect() } else { multi };
    let loss = traced
        .iter()
        .map(|r| Series {
            name: Path::new(&r.run).file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_else(|| r.run.clone()),
            points: r.loss_per_step.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect(),
        })
        .collect();
    let charts = [
        ("accuracy_vs_stride.svg", Chart { title: "Accuracy vs stride".into(), x_label: "stride".into(), y_label: "mean accuracy".into(), log_x: true, series: stride }),
        ("accuracy_vs_mask_ratio.svg", Chart { title: "Accuracy vs mask ratio".into(), x_label: "mask ratio".into(), y_label: "mean accuracy".into(), log_x: false, series: mask }),
        ("loss_vs_step.svg", Chart { title: "Reconstruction loss vs step".into(), x_label: "step".into(), y_label: "mean reconstruction loss".into(), log_x: false, series: loss }),
    ];
    for (name, chart) in charts {
        fs::write(out.join(name), chart.render())?;
    }
    cfg.write_resolved(out)?;
    Ok(runs)
}
