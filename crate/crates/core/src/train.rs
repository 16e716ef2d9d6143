//! Joint classification + masked reconstruction training, the
//! classification-only baseline mode, and clean evaluation.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::{BatchStats, Matrix, Tape, Var};
use crate::datagen::{LabeledCloud, Split};
use crate::error::{Error, Result};
use crate::geom::{random_token_mask, uniform_sym, TokenizedCloud};
use crate::nn::forward::{calibrate_batch_norm, masked_pass, predict, prepare_cloud, reconstruction_loss};
use crate::nn::{adamw_step, AdamHyper, Group, GroupFilter, HeadMode, ModelParams, Net};
use crate::rng::{content_hash, derive_seed, rng_from_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Joint,
    ClassificationOnly,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::ClassificationOnly => "classification_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointConfig {
    /// Weight of the reconstruction term.
    pub lambda: f64,
    pub epochs: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    /// Learning rate reached at the end of the schedule.
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fraction of tokens hidden from the encoder during joint training.
    pub mask_ratio: f64,
    pub augment_scale: bool,
    pub augment_translate: bool,
    pub seed: u64,
    pub mode: TrainMode,
    /// Training clouds used to recompute the classifier's batch-norm
    /// statistics with every token visible after each epoch; 0 keeps the
    /// running averages gathered during training.
    pub bn_calibration_samples: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epochs: 60,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 0,
            weight_decay: 0.05,
            batch_size: 32,
            mask_ratio: 0.9,
            augment_scale: true,
            augment_translate: true,
            seed: 0,
            mode: TrainMode::Joint,
            bn_calibration_samples: 256,
        }
    }
}

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const TRANSLATE_HALF: f64 = 0.1;

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::MaskRatioOutOfRange(self.mask_ratio));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch norm)");
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.lr.is_finite() && self.min_lr.is_finite()) {
            return bad("learning rates must be finite and >= 0");
        }
        Ok(())
    }

    /// Mask ratio actually used: zero in classification-only mode.
    pub fn effective_mask_ratio(&self) -> f64 {
        match self.mode {
            TrainMode::Joint => self.mask_ratio,
            TrainMode::ClassificationOnly => 0.0,
        }
    }

    /// Groups receiving updates.
    pub fn trainable(&self) -> GroupFilter {
        match self.mode {
            TrainMode::Joint => GroupFilter::all(),
            TrainMode::ClassificationOnly => GroupFilter::of(&[Group::Encoder, Group::Classifier]),
        }
    }

    /// Learning rate of `epoch` (0-based): linear warmup, then cosine decay
    /// from `lr` to `min_lr`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = self.epochs.saturating_sub(self.warmup_epochs).max(1) as f64;
        let t = (epoch - self.warmup_epochs) as f64 / span;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<LabeledCloud>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(samples: Vec<LabeledCloud>, num_classes: usize, split: Split) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
            return Err(Error::InvalidConfig(alloc::format!("label {} outside {} classes", s.label, num_classes)));
        }
        Ok(Self { samples, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Seed that fixes the input subsample of a cloud: a hash of its
/// coordinates, so the same cloud is prepared the same way everywhere.
pub fn sample_seed(sample: &LabeledCloud) -> u64 {
    content_hash(sample.cloud.points())
}

/// Draw a uniform scale in [`SCALE_RANGE`] and a per-axis shift within
/// +-[`TRANSLATE_HALF`]. Disabled parts draw nothing and stay at identity.
pub fn draw_augmentation(rng: &mut Rng, scale: bool, translate: bool) -> (f64, [f64; 3]) {
    let s = if scale { rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1) } else { 1.0 };
    let t = if translate {
        [uniform_sym(rng, TRANSLATE_HALF), uniform_sym(rng, TRANSLATE_HALF), uniform_sym(rng, TRANSLATE_HALF)]
    } else {
        [0.0; 3]
    };
    (s, t)
}

/// Similarity augmentation `p -> s p + t` of a cloud.
pub fn augment_scale_translate(cloud: &crate::PointCloud, rng: &mut Rng) -> crate::PointCloud {
    let (s, t) = draw_augmentation(rng, true, true);
    crate::PointCloud::new(cloud.points().iter().map(|p| [s * p[0] + t[0], s * p[1] + t[1], s * p[2] + t[2]]).collect())
}

/// Graph nodes of the joint objective over a batch.
pub struct JointTerms {
    pub logits: Var,
    pub ce: Var,
    pub recon: Option<Var>,
    pub total: Var,
}

/// `CE(classify(encode(visible)), labels) + lambda * Chamfer(reconstruction,
/// masked patches)`, both terms averaged over the batch. The reconstruction
/// term is absent when nothing is masked or `lambda` is zero.
pub fn joint_objective<'p>(
    net: &Net<'p>,
    tape: &mut Tape<'p>,
    batch: &[&TokenizedCloud],
    labels: &[usize],
    lambda: f64,
    mode: &mut HeadMode<'_>,
) -> Result<JointTerms> {
    let pass = masked_pass(net, tape, batch)?;
    let logits = net.classify(tape, pass.latents, pass.visible, mode);
    let ce = tape.cross_entropy(logits, labels);
    let (recon, total) = if pass.masked > 0 && lambda > 0.0 {
        let r = reconstruction_loss(tape, &pass, batch[0].group_size)?;
        let w = tape.scale(r, lambda);
        (Some(r), tape.add(ce, w))
    } else {
        (None, ce)
    };
    Ok(JointTerms { logits, ce, recon, total })
}

/// Loss value and parameter gradients of the joint objective for one
/// labeled sample with a fresh mask and augmentation from `rng`. The
/// classifier head runs in evaluation mode, since batch statistics are
/// undefined for a single sample.
pub fn joint_loss(sample: &LabeledCloud, params: &ModelParams, cfg: &JointConfig, rng: &mut Rng) -> Result<(f64, Vec<(usize, Matrix)>)> {
    let tok = prepare_cloud(&sample.cloud, &params.config, sample_seed(sample))?;
    let (s, t) = draw_augmentation(rng, cfg.augment_scale, cfg.augment_translate);
    let mask = random_token_mask(tok.num_tokens(), cfg.effective_mask_ratio(), rng)?;
    let tok = tok.scaled_shifted(s, t).with_mask(mask, cfg.effective_mask_ratio())?;
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, params, cfg.trainable());
    let lambda = if cfg.mode == TrainMode::Joint { cfg.lambda } else { 0.0 };
    let terms = joint_objective(&net, &mut tape, &[&tok], &[sample.label], lambda, &mut HeadMode::Eval)?;
    let loss = tape.scalar(terms.total);
    tape.backward(terms.total);
    Ok((loss, tape.param_grads()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce_loss: f64,
    pub recon_loss: f64,
    pub total_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Mean total loss over a trailing window of `window` epochs, for every
    /// epoch that has a full window.
    pub fn smoothed_total(&self, window: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.epochs.iter().map(|e| e.total_loss).collect();
        if window == 0 || totals.len() < window {
            return Vec::new();
        }
        totals.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }

    /// First epoch at or after `from` where the `window`-smoothed total loss
    /// rises above its previous value, if any.
    pub fn first_smoothed_increase(&self, window: usize, from: usize) -> Option<usize> {
        let sm = self.smoothed_total(window);
        (1..sm.len()).map(|i| (i + window - 1, sm[i - 1], sm[i])).find(|&(e, prev, cur)| e >= from && cur > prev).map(|(e, _, _)| e)
    }
}

/// Prepared (tokenized) training samples, computed once. Scale and shift
/// augmentation commute with tokenization, so epochs reuse them.
pub fn prepare_dataset(data: &LabeledDataset, params: &ModelParams) -> Result<Vec<TokenizedCloud>> {
    data.samples.iter().map(|s| prepare_cloud(&s.cloud, &params.config, sample_seed(s))).collect()
}

const CALIBRATION_STREAM: u64 = 0xCA11B;

fn update_running(params: &mut ModelParams, stats: &[BatchStats]) {
    const MOMENTUM: f64 = 0.1;
    for (rs, bs) in params.bn_running.iter_mut().zip(stats) {
        for (r, b) in rs.mean.iter_mut().zip(&bs.mean) {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b;
        }
        for (r, b) in rs.var.iter_mut().zip(&bs.var) {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b;
        }
    }
}

/// Callback invoked after every epoch; returning `false` stops training.
pub trait EpochObserver {
    fn on_epoch(&mut self, log: &EpochLog, params: &ModelParams) -> bool;
}

impl EpochObserver for () {
    fn on_epoch(&mut self, _: &EpochLog, _: &ModelParams) -> bool {
        true
    }
}

/// Train in place for `cfg.epochs` epochs of shuffled mini-batches. Batches
/// of a single sample (a trailing remainder) are skipped because batch norm
/// needs at least two. Deterministic given `cfg.seed`.
pub fn train_joint(
    params: &mut ModelParams,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &JointConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tokens = prepare_dataset(train, params)?;
    let val_tokens = match val {
        Some(v) => Some(prepare_dataset(v, params)?),
        None => None,
    };
    let m = cfg.effective_mask_ratio();
    let lambda = if cfg.mode == TrainMode::Joint { cfg.lambda } else { 0.0 };
    let trainable = cfg.trainable();
    let calibration: Vec<&TokenizedCloud> = {
        let mut idx: Vec<usize> = (0..tokens.len()).collect();
        idx.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, CALIBRATION_STREAM)));
        idx.truncate(cfg.bn_calibration_samples);
        idx.sort_unstable();
        idx.into_iter().map(|i| &tokens[i]).collect()
    };
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, epoch as u64));
        let lr = cfg.lr_at(epoch);
        let hyper = AdamHyper { lr, weight_decay: cfg.weight_decay, ..AdamHyper::default() };
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        order.shuffle(&mut rng);
        let (mut ce_sum, mut rec_sum, mut tot_sum, mut correct, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (s, t) = draw_augmentation(&mut rng, cfg.augment_scale, cfg.augment_translate);
                let mask = random_token_mask(tokens[i].num_tokens(), m, &mut rng)?;
                batch.push(tokens[i].scaled_shifted(s, t).with_mask(mask, m)?);
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.samples[i].label).collect();
            let refs: Vec<&TokenizedCloud> = batch.iter().collect();
            let mut tape = Tape::new();
            let net = Net::bind(&mut tape, params, trainable);
            let mut mode = HeadMode::Train { rng: &mut rng, stats: Vec::new() };
            let terms = joint_objective(&net, &mut tape, &refs, &labels, lambda, &mut mode)?;
            let HeadMode::Train { stats, .. } = mode else { unreachable!() };
            let total = tape.scalar(terms.total);
            if !total.is_finite() {
                return Err(Error::DivergenceDetected { epoch });
            }
            let n = chunk.len() as f64;
            ce_sum += tape.scalar(terms.ce) * n;
            rec_sum += terms.recon.map_or(0.0, |r| tape.scalar(r)) * n;
            tot_sum += total * n;
            let logits = tape.value(terms.logits);
            correct += labels.iter().enumerate().filter(|&(r, &y)| logits.argmax_row(r) == y).count();
            seen += chunk.len();
            tape.backward(terms.total);
            let grads = tape.param_grads();
            drop(tape);
            adamw_step(params, &grads, &hyper, trainable)?;
            update_running(params, &stats);
        }
        if cfg.bn_calibration_samples > 0 {
            calibrate_batch_norm(params, &calibration);
        }
        let denom = seen.max(1) as f64;
        let val_acc = match (&val_tokens, val) {
            (Some(vt), Some(v)) => Some(accuracy_of(params, vt, v)),
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            ce_loss: ce_sum / denom,
            recon_loss: rec_sum / denom,
            total_loss: tot_sum / denom,
            train_acc: correct as f64 / denom,
            val_acc,
            lr,
        };
        let go_on = observer.on_epoch(&entry, params);
        log.epochs.push(entry);
        if !go_on {
            break;
        }
    }
    Ok(log)
}

fn accuracy_of(params: &ModelParams, tokens: &[TokenizedCloud], data: &LabeledDataset) -> f64 {
    let correct = tokens.iter().zip(&data.samples).filter(|(t, s)| predict(params, t) == s.label).count();
    correct as f64 / tokens.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Top-1 accuracy with every token visible.
pub fn evaluate_clean(data: &LabeledDataset, params: &ModelParams) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = params.config.num_classes.max(data.num_classes);
    let mut confusion = alloc::vec![alloc::vec![0usize; c]; c];
    let mut predictions = Vec::with_capacity(data.len());
    for s in &data.samples {
        let tok = prepare_cloud(&s.cloud, &params.config, sample_seed(s))?;
        let p = predict(params, &tok);
        confusion[s.label][p] += 1;
        predictions.push(p);
    }
    let correct = data.samples.iter().zip(&predictions).filter(|(s, &p)| s.label == p).count();
    Ok(Evaluation { accuracy: correct as f64 / data.len() as f64, confusion, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, DatasetSpec};
    use crate::nn::ModelConfig;

    fn tiny() -> (ModelParams, LabeledDataset) {
        let cfg = ModelConfig { group_count: 8, group_size: 8, input_points: 64, ..ModelConfig::desk() };
        let spec = DatasetSpec { train_per_class: 1, val_per_class: 1, test_per_class: 1, train_points: 64, test_points: 64, seed: 1 };
        let data = LabeledDataset::new(generate_split(&spec, Split::Train).unwrap(), 8, Split::Train).unwrap();
        (ModelParams::new(cfg).unwrap(), data)
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = JointConfig { epochs: 10, lr: 1e-3, min_lr: 1e-5, ..JointConfig::default() };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!(cfg.lr_at(9) > 1e-5 && cfg.lr_at(9) < 1e-4);
        let warm = JointConfig { warmup_epochs: 2, ..cfg };
        assert_eq!(warm.lr_at(0), 0.5e-3);
        assert_eq!(warm.lr_at(2), 1e-3);
    }

    #[test]
    fn zero_epochs_leave_parameters_at_init() {
        let (mut p, data) = tiny();
        let init = p.clone();
        let cfg = JointConfig { epochs: 0, ..JointConfig::default() };
        let log = train_joint(&mut p, &data, None, &cfg, &mut ()).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(p, init);
    }

    #[test]
    fn classification_only_leaves_reconstruction_groups_alone() {
        let (mut p, data) = tiny();
        let init = p.clone();
        let cfg = JointConfig { epochs: 2, batch_size: 4, mode: TrainMode::ClassificationOnly, ..JointConfig::default() };
        train_joint(&mut p, &data, None, &cfg, &mut ()).unwrap();
        assert!(p.group_bits_equal(&init, Group::Decoder));
        assert!(p.group_bits_equal(&init, Group::Prediction));
        assert!(!p.group_bits_equal(&init, Group::Encoder));
        assert!(!p.group_bits_equal(&init, Group::Classifier));
    }

    #[test]
    fn training_is_deterministic() {
        let (p0, data) = tiny();
        let cfg = JointConfig { epochs: 2, batch_size: 4, ..JointConfig::default() };
        let (mut a, mut b) = (p0.clone(), p0);
        let la = train_joint(&mut a, &data, Some(&data), &cfg, &mut ()).unwrap();
        let lb = train_joint(&mut b, &data, Some(&data), &cfg, &mut ()).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.snapshot(), b.snapshot());
        assert!(la.epochs.iter().all(|e| e.recon_loss > 0.0 && e.val_acc.is_some()));
    }

    #[test]
    fn evaluation_counts() {
        let (p, data) = tiny();
        let ev = evaluate_clean(&data, &p).unwrap();
        assert_eq!(ev.confusion.iter().flatten().sum::<usize>(), data.len());
        assert_eq!(ev, evaluate_clean(&data, &p).unwrap());
        let one = LabeledDataset::new(alloc::vec![LabeledCloud { label: ev.predictions[0], ..data.samples[0].clone() }], 8, Split::Test).unwrap();
        assert_eq!(evaluate_clean(&one, &p).unwrap().accuracy, 1.0);
    }

    #[test]
    fn augmentation_identity_and_similarity() {
        let mut rng = rng_from_seed(3);
        assert_eq!(draw_augmentation(&mut rng, false, false), (1.0, [0.0; 3]));
        let (_, data) = tiny();
        let c = &data.samples[0].cloud;
        let out = augment_scale_translate(c, &mut rng);
        let d = |a: [f64; 3], b: [f64; 3]| crate::geom::norm(crate::geom::sub(a, b));
        let r01 = d(out.points()[0], out.points()[1]) / d(c.points()[0], c.points()[1]);
        let r23 = d(out.points()[2], out.points()[3]) / d(c.points()[2], c.points()[3]);
        assert!((r01 - r23).abs() < 1e-12);
    }

    #[test]
    fn smoothed_increase_detection() {
        let mk = |v: &[f64]| TrainLog {
            epochs: v
                .iter()
                .enumerate()
                .map(|(i, &t)| EpochLog { epoch: i, ce_loss: t, recon_loss: 0.0, total_loss: t, train_acc: 0.0, val_acc: None, lr: 0.0 })
                .collect(),
        };
        assert_eq!(mk(&[4.0, 3.0, 2.0, 1.0]).first_smoothed_increase(2, 0), None);
        assert_eq!(mk(&[4.0, 3.0, 2.0, 5.0]).first_smoothed_increase(2, 0), Some(3));
        assert_eq!(mk(&[4.0, 3.0, 2.0, 5.0]).first_smoothed_increase(2, 4), None);
    }
}
