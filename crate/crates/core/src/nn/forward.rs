//! Whole-model passes assembled from [`Net`] pieces.

use alloc::vec::Vec;

use super::model::{HeadMode, Net};
use super::params::{GroupFilter, ModelParams};
use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::geom::{self, Point, PointCloud, TokenizedCloud};
use crate::nn::ModelConfig;
use crate::rng::{derive_seed, rng_from_seed};

const SUBSAMPLE_STREAM: u64 = 0x5AB5;

/// Bring the cloud to the configured input size and tokenize (FPS from
/// index 0, KNN groups). Larger clouds are subsampled with a draw from
/// `seed`; smaller ones are padded by repeating points cyclically.
pub fn prepare_cloud(cloud: &PointCloud, cfg: &ModelConfig, seed: u64) -> Result<TokenizedCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptySet);
    }
    if !cloud.is_finite() {
        return Err(Error::NonFinite);
    }
    let sized = if cloud.len() < cfg.input_points {
        let pts = cloud.points();
        PointCloud::new((0..cfg.input_points).map(|i| pts[i % pts.len()]).collect())
    } else {
        let mut rng = rng_from_seed(derive_seed(seed, SUBSAMPLE_STREAM));
        geom::subsample(cloud, cfg.input_points, &mut rng)
    };
    geom::tokenize(&sized, cfg.group_count, cfg.group_size)
}

fn patches_of(tok: &TokenizedCloud, tokens: &[usize]) -> Vec<Point> {
    tokens.iter().flat_map(|&g| tok.patch(g).iter().copied()).collect()
}

fn centers_of(tok: &TokenizedCloud, tokens: &[usize]) -> Vec<Point> {
    tokens.iter().map(|&g| tok.centers[g]).collect()
}

/// Pooled encoder features (`samples x 2d`) of clouds with every token
/// visible, computed in chunks.
pub fn pooled_features(params: &ModelParams, toks: &[&TokenizedCloud]) -> Matrix {
    const CHUNK: usize = 32;
    let width = 2 * params.config.embed_dim;
    let mut out = Matrix::zeros(0, width);
    for chunk in toks.chunks(CHUNK) {
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, params, GroupFilter::none());
        let seq = chunk[0].num_tokens();
        let patches: Vec<Point> = chunk.iter().flat_map(|t| t.patches.iter().copied()).collect();
        let centers: Vec<Point> = chunk.iter().flat_map(|t| t.centers.iter().copied()).collect();
        let patches = tape.constant(Matrix::from_points(&patches));
        let emb = net.embed_tokens(&mut tape, patches, chunk[0].group_size);
        let centers = tape.constant(Matrix::from_points(&centers));
        let pos = net.encoder_pos(&mut tape, centers);
        let lat = net.encode(&mut tape, emb, pos, seq);
        let pooled = net.pool(&mut tape, lat, seq);
        out.rows += chunk.len();
        out.data.extend_from_slice(&tape.value(pooled).data);
    }
    out
}

/// Replace the classifier's running batch-norm statistics by the exact
/// statistics of `toks` evaluated with every token visible.
pub fn calibrate_batch_norm(params: &mut ModelParams, toks: &[&TokenizedCloud]) {
    if toks.len() < 2 {
        return;
    }
    let pooled = pooled_features(params, toks);
    let stats = {
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, params, GroupFilter::none());
        let x = tape.constant(pooled);
        let mut mode = HeadMode::Calibrate { stats: Vec::new() };
        net.head(&mut tape, x, &mut mode);
        let HeadMode::Calibrate { stats } = mode else { unreachable!() };
        stats
    };
    for (rs, bs) in params.bn_running.iter_mut().zip(stats) {
        rs.mean = bs.mean;
        rs.var = bs.var;
    }
}

/// Evaluation-mode logits with every token visible.
pub fn predict_logits(params: &ModelParams, tok: &TokenizedCloud) -> Vec<f64> {
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, params, GroupFilter::none());
    let all: Vec<usize> = (0..tok.num_tokens()).collect();
    let patches = tape.constant(Matrix::from_points(&tok.patches));
    let emb = net.embed_tokens(&mut tape, patches, tok.group_size);
    let centers = tape.constant(Matrix::from_points(&centers_of(tok, &all)));
    let pos = net.encoder_pos(&mut tape, centers);
    let lat = net.encode(&mut tape, emb, pos, all.len());
    let logits = net.classify(&mut tape, lat, all.len(), &mut HeadMode::Eval);
    tape.value(logits).data.clone()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ModelParams, tok: &TokenizedCloud) -> usize {
    argmax(&predict_logits(params, tok))
}

/// Graph nodes of a masked forward pass over a batch of tokenized clouds.
pub struct MaskedPass {
    pub latents: Var,
    /// Predicted local points of every masked token, `(S * M * k) x 3`.
    pub reconstruction: Var,
    /// Ground-truth local points aligned with `reconstruction`.
    pub targets: Vec<Point>,
    pub samples: usize,
    pub visible: usize,
    pub masked: usize,
}

fn mask_split(tok: &TokenizedCloud) -> (Vec<usize>, Vec<usize>) {
    (tok.visible_indices(), tok.masked_indices())
}

/// Encoder on the visible tokens and decoder on the masked ones for a batch
/// of clouds that share token layout and mask count. Each cloud uses its own
/// mask.
pub fn masked_pass<'p>(net: &Net<'p>, tape: &mut Tape<'p>, batch: &[&TokenizedCloud]) -> Result<MaskedPass> {
    let first = batch.first().ok_or(Error::EmptyDataset)?;
    let k = first.group_size;
    let (v0, m0) = mask_split(first);
    let (visible, masked) = (v0.len(), m0.len());
    if visible == 0 {
        return Err(Error::EmptyVisibleSet);
    }
    let mut vis_patches = Vec::new();
    let mut vis_centers = Vec::new();
    let mut mask_centers = Vec::new();
    let mut targets = Vec::new();
    for tok in batch {
        let (v, m) = mask_split(tok);
        if v.len() != visible || m.len() != masked || tok.group_size != k {
            return Err(Error::ShapeMismatch("batch clouds differ in token layout".into()));
        }
        vis_patches.extend(patches_of(tok, &v));
        vis_centers.extend(centers_of(tok, &v));
        mask_centers.extend(centers_of(tok, &m));
        targets.extend(patches_of(tok, &m));
    }
    let samples = batch.len();
    let patches = tape.constant(Matrix::from_points(&vis_patches));
    let emb = net.embed_tokens(tape, patches, k);
    let vc = tape.constant(Matrix::from_points(&vis_centers));
    let pos = net.encoder_pos(tape, vc);
    let latents = net.encode(tape, emb, pos, visible);
    let reconstruction = if masked > 0 {
        let dvp = net.decoder_pos(tape, vc);
        let mc = tape.constant(Matrix::from_points(&mask_centers));
        let dmp = net.decoder_pos(tape, mc);
        net.decode_reconstruct(tape, latents, dvp, dmp, samples, visible, masked)
    } else {
        tape.constant(Matrix::zeros(0, 3))
    };
    Ok(MaskedPass { latents, reconstruction, targets, samples, visible, masked })
}

/// Mean per-token Chamfer loss of a masked pass.
pub fn reconstruction_loss<'p>(tape: &mut Tape<'p>, pass: &MaskedPass, k: usize) -> Result<Var> {
    if pass.masked == 0 {
        return Err(Error::NoMaskedTokens);
    }
    Ok(tape.chamfer(pass.reconstruction, &pass.targets, k, k))
}

/// Reconstruction loss averaged over replicas of one cloud, each with its own
/// mask. Token embeddings and positional embeddings are computed once for
/// all tokens and shared by the replicas.
pub fn replica_reconstruction_loss<'p>(net: &Net<'p>, tape: &mut Tape<'p>, tok: &TokenizedCloud, masks: &[Vec<bool>]) -> Result<Var> {
    let g = tok.num_tokens();
    let k = tok.group_size;
    let first = masks.first().ok_or(Error::InvalidConfig("no replicas".into()))?;
    let masked = first.iter().filter(|&&b| b).count();
    let visible = g - masked;
    if visible == 0 {
        return Err(Error::EmptyVisibleSet);
    }
    if masked == 0 {
        return Err(Error::NoMaskedTokens);
    }
    let patches = tape.constant(Matrix::from_points(&tok.patches));
    let emb_all = net.embed_tokens(tape, patches, k);
    let centers = tape.constant(Matrix::from_points(&tok.centers));
    let enc_pos_all = net.encoder_pos(tape, centers);
    let dec_pos_all = net.decoder_pos(tape, centers);
    let mut vis_idx = Vec::with_capacity(masks.len() * visible);
    let mut mask_idx = Vec::with_capacity(masks.len() * masked);
    let mut targets = Vec::with_capacity(masks.len() * masked * k);
    for m in masks {
        if m.len() != g || m.iter().filter(|&&b| b).count() != masked {
            return Err(Error::ShapeMismatch("replica masks differ in size".into()));
        }
        for (t, &hidden) in m.iter().enumerate() {
            if hidden {
                mask_idx.push(t);
                targets.extend_from_slice(tok.patch(t));
            } else {
                vis_idx.push(t);
            }
        }
    }
    let samples = masks.len();
    let emb = tape.gather(emb_all, vis_idx.clone());
    let pos = tape.gather(enc_pos_all, vis_idx.clone());
    let lat = net.encode(tape, emb, pos, visible);
    let dvp = tape.gather(dec_pos_all, vis_idx);
    let dmp = tape.gather(dec_pos_all, mask_idx);
    let rec = net.decode_reconstruct(tape, lat, dvp, dmp, samples, visible, masked);
    Ok(tape.chamfer(rec, &targets, k, k))
}
