//! `PCB1` cloud files: the magic bytes, a little-endian `u32` point count,
//! then `3 * N` little-endian `f32` coordinates.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mate_core::PointCloud;

pub const MAGIC: &[u8; 4] = b"PCB1";

pub fn encode(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        bail!("not a PCB1 file");
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != n * 12 {
        bail!("PCB1 header says {n} points but the body holds {} bytes", body.len());
    }
    let f = |i: usize| f32::from_le_bytes(body[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
    Ok(PointCloud::new((0..n).map(|i| [f(3 * i), f(3 * i + 1), f(3 * i + 2)]).collect()))
}

pub fn write(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode(cloud)).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}
