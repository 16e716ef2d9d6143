//! Experiment configuration: a plain-text `key = value` file, overridden
//! by command-line flags, resolved into the core library's config types.
//!
//! Grammar: one `key = value` per line; `#` starts a comment; blank lines
//! are ignored; a key may appear once. Unknown keys are errors. See
//! `KEYS` for the accepted names.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mate_core::datagen::DatasetSpec;
use mate_core::nn::ModelConfig;
use mate_core::train::{JointConfig, TrainMode};
use mate_core::ttt::{TttConfig, TttMode, STANDARD_STEPS};

use crate::UsageError;

pub const RESOLVED_FILE: &str = "resolved.conf";
pub const VERSION_FILE: &str = "VERSION";

pub fn version_string() -> String {
    format!("mate {}", env!("CARGO_PKG_VERSION"))
}

/// Dataset-specific defaults for the adaptation learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    ModelNet40C,
    ShapeNetC,
    ScanObjectNNC,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Desk, Preset::ModelNet40C, Preset::ShapeNetC, Preset::ScanObjectNNC];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::ModelNet40C => "modelnet40c",
            Preset::ShapeNetC => "shapenet-c",
            Preset::ScanObjectNNC => "scanobjectnn-c",
        }
    }

    pub fn ttt_lr(self) -> f64 {
        match self {
            Preset::Desk | Preset::ModelNet40C => 5e-5,
            Preset::ShapeNetC | Preset::ScanObjectNNC => 1e-4,
        }
    }
}

/// Adaptation settings; `steps` and `lr` default by mode and preset.
#[derive(Clone, Debug, PartialEq)]
pub struct TttSettings {
    pub mode: TttMode,
    pub mask_ratio: f64,
    pub batch: usize,
    pub steps: Option<usize>,
    pub stride: usize,
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub track_steps: bool,
    /// Use only the first `limit` stream samples.
    pub limit: Option<usize>,
}

impl Default for TttSettings {
    fn default() -> Self {
        let base = TttConfig::new(TttMode::Online);
        Self {
            mode: TttMode::Online,
            mask_ratio: base.mask_ratio,
            batch: base.replicas,
            steps: None,
            stride: 1,
            lr: None,
            weight_decay: base.weight_decay,
            track_steps: true,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: Preset,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: JointConfig,
    pub ttt: TttSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::Desk,
            data: None,
            checkpoint: None,
            out: None,
            dataset: DatasetSpec::default(),
            model: ModelConfig::desk(),
            train: JointConfig::default(),
            ttt: TttSettings::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "preset",
    "data",
    "checkpoint",
    "out",
    "dataset.train_per_class",
    "dataset.val_per_class",
    "dataset.test_per_class",
    "dataset.train_points",
    "dataset.test_points",
    "model.embed_dim",
    "model.encoder_depth",
    "model.decoder_depth",
    "model.num_heads",
    "model.mlp_ratio",
    "model.num_classes",
    "model.group_count",
    "model.group_size",
    "model.embed_hidden",
    "model.head_hidden",
    "model.dropout",
    "model.input_points",
    "train.mode",
    "train.lambda",
    "train.epochs",
    "train.lr",
    "train.min_lr",
    "train.warmup_epochs",
    "train.weight_decay",
    "train.batch_size",
    "train.mask_ratio",
    "train.augment_scale",
    "train.augment_translate",
    "train.bn_calibration_samples",
    "ttt.mode",
    "ttt.mask_ratio",
    "ttt.batch",
    "ttt.steps",
    "ttt.stride",
    "ttt.lr",
    "ttt.weight_decay",
    "ttt.track_steps",
    "ttt.limit",
];

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| usage(format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(usage(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn train_mode(v: &str) -> Result<TrainMode> {
    [TrainMode::Joint, TrainMode::ClassificationOnly]
        .into_iter()
        .find(|m| m.name() == v)
        .ok_or_else(|| usage(format!("`train.mode`: expected joint or classification_only, got `{v}`")))
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "seed" => self.seed = num(key, v)?,
            "preset" => {
                self.preset = Preset::ALL
                    .into_iter()
                    .find(|p| p.name() == v)
                    .ok_or_else(|| usage(format!("unknown preset `{v}`")))?
            }
            "data" => self.data = path(),
            "checkpoint" => self.checkpoint = path(),
            "out" => self.out = path(),
            "dataset.train_per_class" => self.dataset.train_per_class = num(key, v)?,
            "dataset.val_per_class" => self.dataset.val_per_class = num(key, v)?,
            "dataset.test_per_class" => self.dataset.test_per_class = num(key, v)?,
            "dataset.train_points" => self.dataset.train_points = num(key, v)?,
            "dataset.test_points" => self.dataset.test_points = num(key, v)?,
            "model.embed_dim" => self.model.embed_dim = num(key, v)?,
            "model.encoder_depth" => self.model.encoder_depth = num(key, v)?,
            "model.decoder_depth" => self.model.decoder_depth = num(key, v)?,
            "model.num_heads" => self.model.num_heads = num(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = num(key, v)?,
            "model.num_classes" => self.model.num_classes = num(key, v)?,
            "model.group_count" => self.model.group_count = num(key, v)?,
            "model.group_size" => self.model.group_size = num(key, v)?,
            "model.embed_hidden" => self.model.embed_hidden = num(key, v)?,
            "model.head_hidden" => self.model.head_hidden = num(key, v)?,
            "model.dropout" => self.model.dropout = num(key, v)?,
            "model.input_points" => self.model.input_points = num(key, v)?,
            "train.mode" => self.train.mode = train_mode(v)?,
            "train.lambda" => self.train.lambda = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.min_lr" => self.train.min_lr = num(key, v)?,
            "train.warmup_epochs" => self.train.warmup_epochs = num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.mask_ratio" => self.train.mask_ratio = num(key, v)?,
            "train.augment_scale" => self.train.augment_scale = boolean(key, v)?,
            "train.augment_translate" => self.train.augment_translate = boolean(key, v)?,
            "train.bn_calibration_samples" => self.train.bn_calibration_samples = num(key, v)?,
            "ttt.mode" => {
                self.ttt.mode = TttMode::from_name(v)
                    .ok_or_else(|| usage(format!("`ttt.mode`: expected standard, online or source_only, got `{v}`")))?
            }
            "ttt.mask_ratio" => self.ttt.mask_ratio = num(key, v)?,
            "ttt.batch" => self.ttt.batch = num(key, v)?,
            "ttt.steps" => self.ttt.steps = Some(num(key, v)?),
            "ttt.stride" => self.ttt.stride = num(key, v)?,
            "ttt.lr" => self.ttt.lr = Some(num(key, v)?),
            "ttt.weight_decay" => self.ttt.weight_decay = num(key, v)?,
            "ttt.track_steps" => self.ttt.track_steps = boolean(key, v)?,
            "ttt.limit" => self.ttt.limit = if v.is_empty() { None } else { Some(num(key, v)?) },
            _ => return Err(usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Apply every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!("{origin}:{}: expected `key = value`", n + 1)));
            };
            let k = k.trim();
            if seen.iter().any(|s| s == k) {
                return Err(usage(format!("{origin}:{}: duplicate key `{k}`", n + 1)));
            }
            seen.push(k.to_string());
            self.set(k, v).map_err(|e| usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Apply `KEY=VALUE` overrides.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| usage(format!("override `{p}` is not KEY=VALUE")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn ttt_steps(&self) -> usize {
        self.ttt.steps.unwrap_or(if self.ttt.mode == TttMode::Standard { STANDARD_STEPS } else { 1 })
    }

    pub fn ttt_lr(&self) -> f64 {
        self.ttt.lr.unwrap_or(self.preset.ttt_lr())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec { seed: self.seed, ..self.dataset.clone() }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { init_seed: self.seed, ..self.model.clone() }
    }

    pub fn joint_config(&self) -> JointConfig {
        JointConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn ttt_config(&self) -> TttConfig {
        TttConfig {
            mode: self.ttt.mode,
            mask_ratio: self.ttt.mask_ratio,
            replicas: self.ttt.batch,
            steps: self.ttt_steps(),
            stride: self.ttt.stride,
            lr: self.ttt_lr(),
            weight_decay: self.ttt.weight_decay,
            seed: self.seed,
            track_steps: self.ttt.track_steps,
        }
    }

    /// Every key with its resolved value, in `KEYS` order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, m, t, a) = (&self.dataset, &self.model, &self.train, &self.ttt);
        let vals: Vec<String> = vec![
            self.seed.to_string(),
            self.preset.name().into(),
            opt_path(&self.data),
            opt_path(&self.checkpoint),
            opt_path(&self.out),
            d.train_per_class.to_string(),
            d.val_per_class.to_string(),
            d.test_per_class.to_string(),
            d.train_points.to_string(),
            d.test_points.to_string(),
            m.embed_dim.to_string(),
            m.encoder_depth.to_string(),
            m.decoder_depth.to_string(),
            m.num_heads.to_string(),
            m.mlp_ratio.to_string(),
            m.num_classes.to_string(),
            m.group_count.to_string(),
            m.group_size.to_string(),
            m.embed_hidden.to_string(),
            m.head_hidden.to_string(),
            m.dropout.to_string(),
            m.input_points.to_string(),
            t.mode.name().into(),
            t.lambda.to_string(),
            t.epochs.to_string(),
            t.lr.to_string(),
            t.min_lr.to_string(),
            t.warmup_epochs.to_string(),
            t.weight_decay.to_string(),
            t.batch_size.to_string(),
            t.mask_ratio.to_string(),
            t.augment_scale.to_string(),
            t.augment_translate.to_string(),
            t.bn_calibration_samples.to_string(),
            a.mode.name().into(),
            a.mask_ratio.to_string(),
            a.batch.to_string(),
            self.ttt_steps().to_string(),
            a.stride.to_string(),
            self.ttt_lr().to_string(),
            a.weight_decay.to_string(),
            a.track_steps.to_string(),
            a.limit.map(|l| l.to_string()).unwrap_or_default(),
        ];
        KEYS.iter().copied().zip(vals).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\n", version_string());
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    /// Write the resolved config and the version file into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(RESOLVED_FILE), self.to_text()).context("writing resolved config")?;
        fs::write(dir.join(VERSION_FILE), version_string() + "\n").context("writing version file")?;
        Ok(())
    }
}
