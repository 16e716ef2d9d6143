//! Test-time training: masked reconstruction on the test sample itself,
//! run per sample from a restored checkpoint (standard) or accumulated over
//! a stream (online), and the un-adapted baseline.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geom::{random_token_mask, PointCloud, TokenizedCloud};
use crate::nn::forward::{predict, prepare_cloud, replica_reconstruction_loss};
use crate::nn::{adamw_step, AdamHyper, GroupFilter, ModelParams, Net};
use crate::rng::{content_hash, derive_seed, rng_from_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TttMode {
    Standard,
    Online,
    SourceOnly,
}

impl TttMode {
    pub fn name(self) -> &'static str {
        match self {
            TttMode::Standard => "standard",
            TttMode::Online => "online",
            TttMode::SourceOnly => "source_only",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [TttMode::Standard, TttMode::Online, TttMode::SourceOnly].into_iter().find(|m| m.name() == s)
    }
}

pub const DEFAULT_TTT_LR: f64 = 5e-5;
pub const DEFAULT_REPLICAS: usize = 48;
pub const DEFAULT_MASK_RATIO: f64 = 0.9;
pub const STANDARD_STEPS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct TttConfig {
    pub mode: TttMode,
    pub mask_ratio: f64,
    /// Number of independently masked copies of the sample per step.
    pub replicas: usize,
    /// Optimizer steps per adapted sample.
    pub steps: usize,
    /// Online only: adapt on samples whose stream index is a multiple.
    pub stride: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Standard only: also predict after every step.
    pub track_steps: bool,
}

impl TttConfig {
    pub fn new(mode: TttMode) -> Self {
        Self {
            mode,
            mask_ratio: DEFAULT_MASK_RATIO,
            replicas: DEFAULT_REPLICAS,
            steps: if mode == TttMode::Standard { STANDARD_STEPS } else { 1 },
            stride: 1,
            lr: DEFAULT_TTT_LR,
            weight_decay: 0.05,
            seed: 0,
            track_steps: true,
        }
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.stride == 0 || self.replicas == 0 || self.steps == 0 {
            return bad("stride, replicas and steps must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if self.mode == TttMode::Online && self.steps != 1 {
            return bad("online adaptation takes one step per adapted sample");
        }
        if self.mode != TttMode::SourceOnly && crate::geom::masked_count(params.config.group_count, self.mask_ratio)? == 0 {
            return Err(Error::NoMaskedTokens);
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, weight_decay: self.weight_decay, ..AdamHyper::default() }
    }
}

/// Updated groups during adaptation; the classifier never is.
pub fn update_groups() -> GroupFilter {
    GroupFilter::test_time()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSample {
    pub cloud: PointCloud,
    pub label: usize,
    /// Free-form tag, usually the corruption name(s).
    pub corruption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub corruption: String,
    pub label: usize,
    pub pred: usize,
    pub adapted: bool,
    /// Reconstruction loss of each step, before that step's update.
    pub losses: Vec<f64>,
    /// Prediction after each step (standard mode with step tracking).
    pub step_preds: Vec<usize>,
    /// Prediction fell back to the un-adapted path.
    pub fallback: bool,
    pub micros: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: TttConfig,
    pub records: Vec<SampleRecord>,
}

impl RunReport {
    pub fn accuracy(&self) -> f64 {
        accuracy(self.records.iter())
    }

    /// `(tag, accuracy, count)` for each corruption tag in first-seen order.
    pub fn per_corruption(&self) -> Vec<(String, f64, usize)> {
        let mut tags: Vec<&str> = Vec::new();
        for r in &self.records {
            if !tags.contains(&r.corruption.as_str()) {
                tags.push(&r.corruption);
            }
        }
        tags.into_iter()
            .map(|t| {
                let rs: Vec<&SampleRecord> = self.records.iter().filter(|r| r.corruption == t).collect();
                (String::from(t), accuracy(rs.iter().copied()), rs.len())
            })
            .collect()
    }

    /// Unweighted mean of the per-corruption accuracies.
    pub fn mean_corruption_accuracy(&self) -> f64 {
        let per = self.per_corruption();
        if per.is_empty() {
            return 0.0;
        }
        per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64
    }

    pub fn adapted_count(&self) -> usize {
        self.records.iter().filter(|r| r.adapted).count()
    }

    pub fn fallback_count(&self) -> usize {
        self.records.iter().filter(|r| r.fallback).count()
    }

    /// Mean loss at 1-based `step` over records that reached it.
    pub fn mean_loss_at_step(&self, step: usize) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter_map(|r| r.losses.get(step.wrapping_sub(1)).copied()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Accuracy of the predictions made after 1-based `step`.
    pub fn accuracy_at_step(&self, step: usize) -> Option<f64> {
        let hits: Vec<bool> = self
            .records
            .iter()
            .filter_map(|r| r.step_preds.get(step.wrapping_sub(1)).map(|&p| p == r.label))
            .collect();
        (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    }

    pub fn total_micros(&self) -> u64 {
        self.records.iter().map(|r| r.micros).sum()
    }
}

fn accuracy<'a>(records: impl Iterator<Item = &'a SampleRecord>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for r in records {
        n += 1;
        hit += usize::from(r.pred == r.label);
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Microsecond time source; the library itself never reads a clock.
pub trait Clock {
    fn now_micros(&self) -> u64;
}

/// A clock that always reads zero.
pub struct NoClock;

impl Clock for NoClock {
    fn now_micros(&self) -> u64 {
        0
    }
}

/// Replica masks for one step: `replicas` independent draws at `mask_ratio`.
pub fn replica_masks(g: usize, cfg: &TttConfig, rng: &mut Rng) -> Result<Vec<Vec<bool>>> {
    (0..cfg.replicas).map(|_| random_token_mask(g, cfg.mask_ratio, rng)).collect()
}

/// One adaptation step on a tokenized sample: mean Chamfer reconstruction
/// loss over the replicas, then one AdamW update of the encoder, decoder and
/// prediction head. Returns the loss before the update. A non-finite loss
/// leaves the parameters untouched.
pub fn ttt_step(params: &mut ModelParams, tok: &TokenizedCloud, cfg: &TttConfig, rng: &mut Rng) -> Result<f64> {
    let masks = replica_masks(tok.num_tokens(), cfg, rng)?;
    let (loss, grads) = {
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, params, update_groups());
        let l = replica_reconstruction_loss(&net, &mut tape, tok, &masks)?;
        let loss = tape.scalar(l);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        tape.backward(l);
        (loss, tape.param_grads())
    };
    if grads.iter().any(|(_, g)| g.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss);
    }
    adamw_step(params, &grads, &cfg.hyper(), update_groups())?;
    Ok(loss)
}

/// Seed of every random draw made for one sample: a hash of its points
/// mixed with the run seed, so it does not depend on stream position.
pub fn sample_stream_seed(cloud: &PointCloud, run_seed: u64) -> u64 {
    derive_seed(run_seed, content_hash(cloud.points()))
}

/// Prediction for a sample that cannot be tokenized as given: the finite
/// points only, or class 0 when none remain.
fn fallback_predict(params: &ModelParams, cloud: &PointCloud) -> usize {
    let finite = cloud.finite_part();
    match prepare_cloud(&finite, &params.config, content_hash(finite.points())) {
        Ok(tok) => predict(params, &tok),
        Err(_) => 0,
    }
}


fn record(index: usize, s: &StreamSample) -> SampleRecord {
    SampleRecord {
        index,
        corruption: s.corruption.clone(),
        label: s.label,
        pred: 0,
        adapted: false,
        losses: Vec::new(),
        step_preds: Vec::new(),
        fallback: false,
        micros: 0,
    }
}

/// Every sample adapted independently: restore the checkpoint (weights and
/// the optimizer state saved with them), take `cfg.steps` steps with fresh masks each, then
/// predict with every token visible.
pub fn run_standard(stream: &[StreamSample], checkpoint: &ModelParams, cfg: &TttConfig, clock: &dyn Clock) -> Result<RunReport> {
    cfg.validate(checkpoint)?;
    let mut records = Vec::with_capacity(stream.len());
    for (i, s) in stream.iter().enumerate() {
        let t0 = clock.now_micros();
        let mut rec = record(i, s);
        let seed = sample_stream_seed(&s.cloud, cfg.seed);
        match prepare_cloud(&s.cloud, &checkpoint.config, content_hash(s.cloud.points())) {
            Ok(tok) => {
                let mut params = checkpoint.clone();
                let mut rng = rng_from_seed(seed);
                rec.adapted = true;
                for _ in 0..cfg.steps {
                    match ttt_step(&mut params, &tok, cfg, &mut rng) {
                        Ok(l) => rec.losses.push(l),
                        Err(Error::NonFiniteLoss) => {
                            rec.fallback = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                    if cfg.track_steps {
                        rec.step_preds.push(predict(&params, &tok));
                    }
                }
                rec.pred = if rec.fallback { predict(checkpoint, &tok) } else { predict(&params, &tok) };
            }
            Err(Error::NonFinite) => {
                rec.fallback = true;
                rec.pred = fallback_predict(checkpoint, &s.cloud);
            }
            Err(e) => return Err(e),
        }
        rec.micros = clock.now_micros().saturating_sub(t0);
        records.push(rec);
    }
    Ok(RunReport { config: cfg.clone(), records })
}

/// One pass with accumulated updates: samples at stream indices divisible
/// by the stride get one step before being predicted; every sample is
/// predicted with the current parameters.
pub fn run_online(stream: &[StreamSample], checkpoint: &ModelParams, cfg: &TttConfig, clock: &dyn Clock) -> Result<RunReport> {
    cfg.validate(checkpoint)?;
    let mut params = checkpoint.clone();
    let mut records = Vec::with_capacity(stream.len());
    for (i, s) in stream.iter().enumerate() {
        let t0 = clock.now_micros();
        let mut rec = record(i, s);
        match prepare_cloud(&s.cloud, &checkpoint.config, content_hash(s.cloud.points())) {
            Ok(tok) => {
                if i % cfg.stride == 0 {
                    rec.adapted = true;
                    let mut rng = rng_from_seed(sample_stream_seed(&s.cloud, cfg.seed));
                    match ttt_step(&mut params, &tok, cfg, &mut rng) {
                        Ok(l) => rec.losses.push(l),
                        Err(Error::NonFiniteLoss) => rec.fallback = true,
                        Err(e) => return Err(e),
                    }
                }
                rec.pred = predict(&params, &tok);
            }
            Err(Error::NonFinite) => {
                rec.fallback = true;
                rec.pred = fallback_predict(&params, &s.cloud);
            }
            Err(e) => return Err(e),
        }
        rec.micros = clock.now_micros().saturating_sub(t0);
        records.push(rec);
    }
    Ok(RunReport { config: cfg.clone(), records })
}

/// Predictions of the checkpoint without adaptation.
pub fn run_source_only(stream: &[StreamSample], checkpoint: &ModelParams, clock: &dyn Clock) -> Result<RunReport> {
    let cfg = TttConfig::new(TttMode::SourceOnly);
    let mut records = Vec::with_capacity(stream.len());
    for (i, s) in stream.iter().enumerate() {
        let t0 = clock.now_micros();
        let mut rec = record(i, s);
        match prepare_cloud(&s.cloud, &checkpoint.config, content_hash(s.cloud.points())) {
            Ok(tok) => rec.pred = predict(checkpoint, &tok),
            Err(Error::NonFinite) => {
                rec.fallback = true;
                rec.pred = fallback_predict(checkpoint, &s.cloud);
            }
            Err(e) => return Err(e),
        }
        rec.micros = clock.now_micros().saturating_sub(t0);
        records.push(rec);
    }
    Ok(RunReport { config: cfg, records })
}

/// Dispatch on `cfg.mode`.
pub fn run(stream: &[StreamSample], checkpoint: &ModelParams, cfg: &TttConfig, clock: &dyn Clock) -> Result<RunReport> {
    match cfg.mode {
        TttMode::Standard => run_standard(stream, checkpoint, cfg, clock),
        TttMode::Online => run_online(stream, checkpoint, cfg, clock),
        TttMode::SourceOnly => run_source_only(stream, checkpoint, clock),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_shape, ShapeClass};
    use crate::nn::{Group, ModelConfig};

    fn small() -> (ModelParams, Vec<StreamSample>) {
        let cfg = ModelConfig { group_count: 8, group_size: 8, input_points: 64, ..ModelConfig::desk() };
        let stream = ShapeClass::ALL
            .iter()
            .take(5)
            .enumerate()
            .map(|(i, &c)| StreamSample { cloud: generate_shape(c, 80, i as u64).unwrap(), label: c.label(), corruption: "none".into() })
            .collect();
        (ModelParams::new(cfg).unwrap(), stream)
    }

    fn quick(mode: TttMode) -> TttConfig {
        TttConfig { replicas: 4, steps: if mode == TttMode::Standard { 3 } else { 1 }, lr: 1e-3, ..TttConfig::new(mode) }
    }

    #[test]
    fn classifier_is_bit_unchanged_by_a_step() {
        let (p, stream) = small();
        let tok = prepare_cloud(&stream[0].cloud, &p.config, 0).unwrap();
        let mut q = p.clone();
        let mut rng = rng_from_seed(1);
        let loss = ttt_step(&mut q, &tok, &quick(TttMode::Online), &mut rng).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(q.group_bits_equal(&p, Group::Classifier));
        assert!(!q.group_bits_equal(&p, Group::Encoder));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (p, stream) = small();
        let tok = prepare_cloud(&stream[0].cloud, &p.config, 0).unwrap();
        let mut q = p.clone();
        let cfg = TttConfig { lr: 0.0, ..quick(TttMode::Online) };
        ttt_step(&mut q, &tok, &cfg, &mut rng_from_seed(1)).unwrap();
        for (a, b) in q.tensors.iter().zip(&p.tensors) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn standard_and_online_with_zero_lr_match_source_only() {
        let (p, stream) = small();
        let src = run_source_only(&stream, &p, &NoClock).unwrap();
        for mode in [TttMode::Standard, TttMode::Online] {
            let cfg = TttConfig { lr: 0.0, ..quick(mode) };
            let rep = run(&stream, &p, &cfg, &NoClock).unwrap();
            let a: Vec<usize> = rep.records.iter().map(|r| r.pred).collect();
            let b: Vec<usize> = src.records.iter().map(|r| r.pred).collect();
            assert_eq!(a, b, "{mode:?}");
        }
    }

    #[test]
    fn stride_controls_adaptation_count() {
        let (p, stream) = small();
        for (s, want) in [(1, 5), (2, 3), (3, 2), (100, 1)] {
            let cfg = TttConfig { stride: s, ..quick(TttMode::Online) };
            let rep = run_online(&stream, &p, &cfg, &NoClock).unwrap();
            assert_eq!(rep.adapted_count(), want);
            for r in &rep.records {
                assert_eq!(r.losses.len(), usize::from(r.adapted));
            }
        }
    }

    #[test]
    fn standard_report_is_permutation_invariant() {
        let (p, stream) = small();
        let cfg = quick(TttMode::Standard);
        let a = run_standard(&stream, &p, &cfg, &NoClock).unwrap();
        let mut rev = stream.clone();
        rev.reverse();
        let b = run_standard(&rev, &p, &cfg, &NoClock).unwrap();
        for (x, y) in a.records.iter().zip(b.records.iter().rev()) {
            assert_eq!((x.pred, &x.losses, &x.step_preds), (y.pred, &y.losses, &y.step_preds));
        }
        assert!(a.records.iter().all(|r| r.losses.len() == 3 && r.step_preds.len() == 3));
    }

    #[test]
    fn non_finite_sample_falls_back() {
        let (p, mut stream) = small();
        let mut pts = stream[1].cloud.points().to_vec();
        pts[3][0] = f64::NAN;
        stream[1].cloud = PointCloud::new(pts);
        for mode in [TttMode::Standard, TttMode::Online, TttMode::SourceOnly] {
            let rep = run(&stream, &p, &quick(mode), &NoClock).unwrap();
            assert_eq!(rep.records.len(), 5);
            assert!(rep.records[1].fallback);
            assert_eq!(rep.fallback_count(), 1);
        }
    }

    #[test]
    fn config_validation() {
        let (p, _) = small();
        assert!(TttConfig { stride: 0, ..quick(TttMode::Online) }.validate(&p).is_err());
        assert!(TttConfig { steps: 2, ..quick(TttMode::Online) }.validate(&p).is_err());
        assert_eq!(TttConfig { mask_ratio: 0.0, ..quick(TttMode::Online) }.validate(&p), Err(Error::NoMaskedTokens));
        assert!(quick(TttMode::Standard).validate(&p).is_ok());
    }
}
