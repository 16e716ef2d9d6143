//! Checkpoint files: `MATE`, a little-endian `u16` format version, a `u32`
//! header length, a JSON header naming every stored array with its shape,
//! then the arrays as little-endian `f32` in header order.
//!
//! Stored arrays are the parameter tensors, the classifier's batch-norm
//! running statistics (`bn.<i>.mean`, `bn.<i>.var`) and the optimizer
//! moments (`adam.m.<name>`, `adam.v.<name>`). Values are rounded to `f32`,
//! so a checkpoint reproduces the in-memory model only up to that rounding;
//! saving a loaded checkpoint again gives identical bytes.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mate_core::nn::{ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"MATE";
pub const VERSION: u16 = 1;
pub const FILE_NAME: &str = "checkpoint.mate";

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct Header {
    config: ConfigRecord,
    optimizer_step: u64,
    arrays: Vec<ArrayRecord>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct ConfigRecord {
    embed_dim: usize,
    encoder_depth: usize,
    decoder_depth: usize,
    num_heads: usize,
    mlp_ratio: usize,
    num_classes: usize,
    group_count: usize,
    group_size: usize,
    embed_hidden: usize,
    head_hidden: usize,
    dropout: f64,
    input_points: usize,
    init_seed: u64,
}

impl From<&ModelConfig> for ConfigRecord {
    fn from(c: &ModelConfig) -> Self {
        Self {
            embed_dim: c.embed_dim,
            encoder_depth: c.encoder_depth,
            decoder_depth: c.decoder_depth,
            num_heads: c.num_heads,
            mlp_ratio: c.mlp_ratio,
            num_classes: c.num_classes,
            group_count: c.group_count,
            group_size: c.group_size,
            embed_hidden: c.embed_hidden,
            head_hidden: c.head_hidden,
            dropout: c.dropout,
            input_points: c.input_points,
            init_seed: c.init_seed,
        }
    }
}

impl From<&ConfigRecord> for ModelConfig {
    fn from(c: &ConfigRecord) -> Self {
        Self {
            embed_dim: c.embed_dim,
            encoder_depth: c.encoder_depth,
            decoder_depth: c.decoder_depth,
            num_heads: c.num_heads,
            mlp_ratio: c.mlp_ratio,
            num_classes: c.num_classes,
            group_count: c.group_count,
            group_size: c.group_size,
            embed_hidden: c.embed_hidden,
            head_hidden: c.head_hidden,
            dropout: c.dropout,
            input_points: c.input_points,
            init_seed: c.init_seed,
        }
    }
}

/// Every stored array as (name, shape, values), in file order.
fn arrays(p: &ModelParams) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = Vec::new();
    for t in &p.tensors {
        out.push((t.name.clone(), vec![t.value.rows, t.value.cols], &t.value.data[..]));
    }
    for (i, s) in p.bn_running.iter().enumerate() {
        out.push((format!("bn.{i}.mean"), vec![s.mean.len()], &s.mean[..]));
        out.push((format!("bn.{i}.var"), vec![s.var.len()], &s.var[..]));
    }
    for (t, (m, v)) in p.tensors.iter().zip(p.optimizer.m.iter().zip(&p.optimizer.v)) {
        out.push((format!("adam.m.{}", t.name), vec![t.value.rows, t.value.cols], &m[..]));
        out.push((format!("adam.v.{}", t.name), vec![t.value.rows, t.value.cols], &v[..]));
    }
    out
}

pub fn encode(p: &ModelParams) -> Vec<u8> {
    let arrays = arrays(p);
    let header = Header {
        config: (&p.config).into(),
        optimizer_step: p.optimizer.step,
        arrays: arrays.iter().map(|(n, s, _)| ArrayRecord { name: n.clone(), shape: s.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, values) in &arrays {
        for v in *values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    ensure!(bytes.len() >= 10 && &bytes[..4] == MAGIC, "not a checkpoint file");
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    ensure!(version == VERSION, "unsupported checkpoint version {version}");
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    ensure!(bytes.len() >= 10 + hlen, "truncated checkpoint header");
    let header: Header = serde_json::from_slice(&bytes[10..10 + hlen]).context("checkpoint header")?;
    let config = ModelConfig::from(&header.config);
    config.validate_shapes().context("checkpoint model config")?;
    let mut params = ModelParams::new_unchecked(config);
    params.optimizer.step = header.optimizer_step;

    let expected = arrays(&params);
    ensure!(expected.len() == header.arrays.len(), "checkpoint holds {} arrays, model needs {}", header.arrays.len(), expected.len());
    for ((name, shape, _), rec) in expected.iter().zip(&header.arrays) {
        ensure!(name == &rec.name && shape == &rec.shape, "array `{}` {:?} where `{name}` {shape:?} was expected", rec.name, rec.shape);
    }
    let mut body = &bytes[10 + hlen..];
    let total: usize = expected.iter().map(|(_, _, v)| v.len()).sum();
    ensure!(body.len() == total * 4, "checkpoint body has {} bytes, expected {}", body.len(), total * 4);
    let mut next = |dst: &mut [f64]| {
        for d in dst.iter_mut() {
            *d = f32::from_le_bytes(body[..4].try_into().unwrap()) as f64;
            body = &body[4..];
        }
    };
    for t in &mut params.tensors {
        next(&mut t.value.data);
    }
    for s in &mut params.bn_running {
        next(&mut s.mean);
        next(&mut s.var);
    }
    for (m, v) in params.optimizer.m.iter_mut().zip(params.optimizer.v.iter_mut()) {
        next(m);
        next(v);
    }
    Ok(params)
}

pub fn save(path: &Path, p: &ModelParams) -> Result<()> {
    fs::write(path, encode(p)).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match decode(&bytes) {
        Ok(p) => Ok(p),
        Err(e) => bail!("{}: {e:#}", path.display()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        let cfg = ModelConfig { group_count: 8, group_size: 8, input_points: 64, ..ModelConfig::desk() };
        let mut p = ModelParams::new(cfg).unwrap();
        p.optimizer.step = 17;
        p.optimizer.v[3][1] = 0.25;
        p.bn_running[1].mean[2] = -0.5;
        p
    }

    #[test]
    fn save_load_save_is_stable() {
        let p = small();
        let once = decode(&encode(&p)).unwrap();
        assert_eq!(encode(&once), encode(&decode(&encode(&once)).unwrap()));
        assert_eq!(once.optimizer.step, 17);
        assert_eq!(once.optimizer.v[3][1], 0.25);
        assert_eq!(once.bn_running[1].mean[2], -0.5);
        assert_eq!(once.config, p.config);
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let mut b = encode(&small());
        b.truncate(b.len() - 1);
        assert!(decode(&b).is_err());
        let mut b = encode(&small());
        b[4] = 9;
        assert!(decode(&b).is_err());
        assert!(decode(b"MATS").is_err());
    }
}
