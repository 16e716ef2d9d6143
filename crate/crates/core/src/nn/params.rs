use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use super::adamw::AdamState;
use super::config::ModelConfig;
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// The four disjoint parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Token embedder, encoder positional embedding and encoder blocks.
    Encoder,
    /// Mask token, decoder positional embedding and decoder blocks.
    Decoder,
    /// Linear reconstruction head.
    Prediction,
    /// Classifier head.
    Classifier,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Decoder, Group::Prediction, Group::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::Prediction => "prediction",
            Group::Classifier => "classifier",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of parameter groups an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupFilter(u8);

impl GroupFilter {
    pub const fn none() -> Self {
        Self(0)
    }

    pub fn all() -> Self {
        Self::of(&Group::ALL)
    }

    /// Encoder, decoder and prediction head; the classifier stays frozen.
    pub fn test_time() -> Self {
        Self::of(&[Group::Encoder, Group::Decoder, Group::Prediction])
    }

    pub fn of(groups: &[Group]) -> Self {
        Self(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn without(self, g: Group) -> Self {
        Self(self.0 & !g.bit())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub group: Group,
    pub value: Matrix,
    /// Whether weight decay applies (matrices yes; biases, norms, tokens no).
    pub decay: bool,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub ln1: (usize, usize),
    pub qkv: LinearIds,
    pub proj: LinearIds,
    pub ln2: (usize, usize),
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// Tensor ids of every layer, derived deterministically from the config.
#[derive(Clone, Debug)]
pub struct Layout {
    pub embed: [LinearIds; 4],
    pub enc_pos: [LinearIds; 2],
    pub enc_blocks: Vec<BlockIds>,
    pub enc_norm: (usize, usize),
    pub mask_token: usize,
    pub dec_pos: [LinearIds; 2],
    pub dec_blocks: Vec<BlockIds>,
    pub dec_norm: (usize, usize),
    pub pred: LinearIds,
    pub cls: [LinearIds; 3],
    pub cls_bn: [(usize, usize); 2],
}

#[derive(Clone, Copy)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
    init: Init,
    decay: bool,
}

#[derive(Default)]
struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn push(&mut self, name: String, group: Group, rows: usize, cols: usize, init: Init, decay: bool) -> usize {
        self.specs.push(Spec { name, group, rows, cols, init, decay });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, group: Group, fan_in: usize, fan_out: usize) -> LinearIds {
        let w = self.push(format!("{name}.weight"), group, fan_in, fan_out, Init::TruncNormal, true);
        let b = self.push(format!("{name}.bias"), group, 1, fan_out, Init::Zeros, false);
        LinearIds { w, b }
    }

    fn norm(&mut self, name: &str, group: Group, width: usize) -> (usize, usize) {
        let g = self.push(format!("{name}.weight"), group, 1, width, Init::Ones, false);
        let b = self.push(format!("{name}.bias"), group, 1, width, Init::Zeros, false);
        (g, b)
    }

    fn block(&mut self, name: &str, group: Group, d: usize, ratio: usize) -> BlockIds {
        BlockIds {
            ln1: self.norm(&format!("{name}.norm1"), group, d),
            qkv: self.linear(&format!("{name}.attn.qkv"), group, d, 3 * d),
            proj: self.linear(&format!("{name}.attn.proj"), group, d, d),
            ln2: self.norm(&format!("{name}.norm2"), group, d),
            fc1: self.linear(&format!("{name}.mlp.fc1"), group, d, ratio * d),
            fc2: self.linear(&format!("{name}.mlp.fc2"), group, ratio * d, d),
        }
    }
}

impl Layout {
    fn build(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
        let mut b = Builder::default();
        let (d, h) = (cfg.embed_dim, cfg.embed_hidden);
        use Group::*;
        let embed = [
            b.linear("embed.point1", Encoder, 3, h),
            b.linear("embed.point2", Encoder, h, h),
            b.linear("embed.point3", Encoder, 2 * h, d),
            b.linear("embed.point4", Encoder, d, d),
        ];
        let enc_pos = [b.linear("encoder.pos1", Encoder, 3, d), b.linear("encoder.pos2", Encoder, d, d)];
        let enc_blocks = (0..cfg.encoder_depth)
            .map(|i| b.block(&format!("encoder.blocks.{i}"), Encoder, d, cfg.mlp_ratio))
            .collect();
        let enc_norm = b.norm("encoder.norm", Encoder, d);
        let mask_token = b.push("decoder.mask_token".into(), Decoder, 1, d, Init::TruncNormal, false);
        let dec_pos = [b.linear("decoder.pos1", Decoder, 3, d), b.linear("decoder.pos2", Decoder, d, d)];
        let dec_blocks = (0..cfg.decoder_depth)
            .map(|i| b.block(&format!("decoder.blocks.{i}"), Decoder, d, cfg.mlp_ratio))
            .collect();
        let dec_norm = b.norm("decoder.norm", Decoder, d);
        let pred = b.linear("prediction.head", Prediction, d, 3 * cfg.group_size);
        let hh = cfg.head_hidden;
        let cls1 = b.linear("classifier.fc1", Classifier, 2 * d, hh);
        let bn1 = b.norm("classifier.bn1", Classifier, hh);
        let cls2 = b.linear("classifier.fc2", Classifier, hh, hh);
        let bn2 = b.norm("classifier.bn2", Classifier, hh);
        let cls3 = b.linear("classifier.fc3", Classifier, hh, cfg.num_classes);
        let layout = Layout {
            embed,
            enc_pos,
            enc_blocks,
            enc_norm,
            mask_token,
            dec_pos,
            dec_blocks,
            dec_norm,
            pred,
            cls: [cls1, cls2, cls3],
            cls_bn: [bn1, bn2],
        };
        (layout, b.specs)
    }

    pub fn new(cfg: &ModelConfig) -> Layout {
        Self::build(cfg).0
    }
}

/// All network parameters, batch-norm buffers and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<ParamTensor>,
    /// One entry per classifier batch-norm layer.
    pub bn_running: Vec<RunningStats>,
    pub optimizer: AdamState,
}

pub const SNAPSHOT_VERSION: u16 = 1;
const SNAPSHOT_MAGIC: &[u8; 4] = b"MATS";

fn trunc_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ModelParams {
    /// Freshly initialized parameters for a validated config.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::new_unchecked(config))
    }

    /// Initialization without the encoder/decoder asymmetry check, for reduced
    /// networks (e.g. an empty encoder). Shapes must still be consistent.
    pub fn new_unchecked(config: ModelConfig) -> Self {
        config.validate_shapes().expect("inconsistent layer shapes");
        let (_, specs) = Layout::build(&config);
        let mut tensors = Vec::with_capacity(specs.len());
        for (i, s) in specs.into_iter().enumerate() {
            let mut rng = rng_from_seed(derive_seed(config.init_seed, i as u64));
            let n = s.rows * s.cols;
            let data = match s.init {
                Init::TruncNormal => (0..n).map(|_| trunc_normal(&mut rng, 0.02)).collect(),
                Init::Zeros => alloc::vec![0.0; n],
                Init::Ones => alloc::vec![1.0; n],
            };
            tensors.push(ParamTensor { name: s.name, group: s.group, value: Matrix::from_vec(s.rows, s.cols, data), decay: s.decay });
        }
        let hh = config.head_hidden;
        let bn_running = (0..2)
            .map(|_| RunningStats { mean: alloc::vec![0.0; hh], var: alloc::vec![1.0; hh] })
            .collect();
        let optimizer = AdamState::zeros_like(&tensors);
        Self { config, tensors, bn_running, optimizer }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn group_parameters(&self, g: Group) -> usize {
        self.tensors.iter().filter(|t| t.group == g).map(|t| t.value.len()).sum()
    }

    /// Bitwise equality of every tensor in group `g`.
    pub fn group_bits_equal(&self, other: &ModelParams, g: Group) -> bool {
        let a = self.tensors.iter().filter(|t| t.group == g);
        let b = other.tensors.iter().filter(|t| t.group == g);
        a.zip(b).all(|(x, y)| {
            x.value.data.len() == y.value.data.len()
                && x.value.data.iter().zip(&y.value.data).all(|(p, q)| p.to_bits() == q.to_bits())
        }) && (g != Group::Classifier || self.bn_running == other.bn_running)
    }

    /// Copy the values of the listed groups from `src` (same architecture).
    pub fn copy_groups_from(&mut self, src: &ModelParams, groups: GroupFilter) {
        for (dst, s) in self.tensors.iter_mut().zip(&src.tensors) {
            if groups.contains(dst.group) {
                dst.value.data.copy_from_slice(&s.value.data);
            }
        }
        if groups.contains(Group::Classifier) {
            self.bn_running = src.bn_running.clone();
        }
    }

    /// Versioned, bit-exact binary image of parameters, buffers and optimizer
    /// state.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.embed_dim,
            c.encoder_depth,
            c.decoder_depth,
            c.num_heads,
            c.mlp_ratio,
            c.num_classes,
            c.group_count,
            c.group_size,
            c.embed_hidden,
            c.head_hidden,
            c.input_points,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout.to_bits().to_le_bytes());
        out.extend_from_slice(&c.init_seed.to_le_bytes());
        let put = |out: &mut Vec<u8>, xs: &[f64]| {
            out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
            for x in xs {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        };
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            put(&mut out, &t.value.data);
        }
        out.extend_from_slice(&(self.bn_running.len() as u64).to_le_bytes());
        for s in &self.bn_running {
            put(&mut out, &s.mean);
            put(&mut out, &s.var);
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            put(&mut out, m);
            put(&mut out, v);
        }
        out
    }

    pub fn restore(blob: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: blob, pos: 0 };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(Error::CorruptBlob("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::CorruptBlob(format!("unsupported version {version}")));
        }
        let mut u = || r.u64().map(|v| v as usize);
        let config = ModelConfig {
            embed_dim: u()?,
            encoder_depth: u()?,
            decoder_depth: u()?,
            num_heads: u()?,
            mlp_ratio: u()?,
            num_classes: u()?,
            group_count: u()?,
            group_size: u()?,
            embed_hidden: u()?,
            head_hidden: u()?,
            input_points: u()?,
            dropout: f64::from_bits(r.u64()?),
            init_seed: r.u64()?,
        };
        config.validate_shapes().map_err(|e| Error::CorruptBlob(format!("{e}")))?;
        let mut params = ModelParams::new_unchecked(config);
        if r.u64()? as usize != params.tensors.len() {
            return Err(Error::CorruptBlob("tensor count".into()));
        }
        for t in &mut params.tensors {
            r.f64s_into(&mut t.value.data)?;
        }
        if r.u64()? as usize != params.bn_running.len() {
            return Err(Error::CorruptBlob("buffer count".into()));
        }
        for s in &mut params.bn_running {
            r.f64s_into(&mut s.mean)?;
            r.f64s_into(&mut s.var)?;
        }
        params.optimizer.step = r.u64()?;
        for (m, v) in params.optimizer.m.iter_mut().zip(params.optimizer.v.iter_mut()) {
            r.f64s_into(m)?;
            r.f64s_into(v)?;
        }
        if r.pos != blob.len() {
            return Err(Error::CorruptBlob("trailing bytes".into()));
        }
        Ok(params)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptBlob("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s_into(&mut self, dst: &mut [f64]) -> Result<()> {
        if self.u64()? as usize != dst.len() {
            return Err(Error::CorruptBlob("tensor length".into()));
        }
        for d in dst.iter_mut() {
            *d = f64::from_bits(self.u64()?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_are_disjoint_and_cover() {
        let p = ModelParams::new(ModelConfig::desk()).unwrap();
        let total: usize = Group::ALL.iter().map(|&g| p.group_parameters(g)).sum();
        assert_eq!(total, p.num_parameters());
        for g in Group::ALL {
            assert!(p.group_parameters(g) > 0, "{g:?}");
        }
    }

    #[test]
    fn parameter_count_is_stable() {
        let a = ModelParams::new(ModelConfig::desk()).unwrap();
        let b = ModelParams::new(ModelConfig::desk()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_parameters(), DESK_PARAMETER_COUNT);
    }

    /// Desk configuration counted by hand: embedder 9504, two positional
    /// MLPs 4416 each, blocks 33472 each (3 encoder + 1 decoder), final norms
    /// 128 each, mask token 64, prediction head 6240, classifier 13192.
    const DESK_PARAMETER_COUNT: usize = 171_976;

    #[test]
    fn snapshot_round_trip_is_bitwise() {
        let mut p = ModelParams::new(ModelConfig::desk()).unwrap();
        p.optimizer.step = 7;
        p.optimizer.m[3][0] = 0.125;
        p.bn_running[1].var[2] = 3.5;
        let q = ModelParams::restore(&p.snapshot()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn snapshot_rejects_other_versions_and_truncation() {
        let p = ModelParams::new(ModelConfig::desk()).unwrap();
        let mut blob = p.snapshot();
        blob[4] = 9;
        assert!(matches!(ModelParams::restore(&blob), Err(Error::CorruptBlob(_))));
        let blob = p.snapshot();
        assert!(matches!(ModelParams::restore(&blob[..blob.len() - 3]), Err(Error::CorruptBlob(_))));
        assert!(matches!(ModelParams::restore(b"nope"), Err(Error::CorruptBlob(_))));
    }

    #[test]
    fn filters() {
        let f = GroupFilter::test_time();
        assert!(f.contains(Group::Encoder) && f.contains(Group::Decoder) && f.contains(Group::Prediction));
        assert!(!f.contains(Group::Classifier));
        assert!(!GroupFilter::all().without(Group::Classifier).contains(Group::Classifier));
    }
}
