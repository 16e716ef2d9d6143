//! JSON manifests: an array of `{path, label, split}` records, with an
//! optional corruption tag on corrupted datasets and the SHA-256 of each
//! cloud file, so the manifest hash covers the data. Paths are relative to
//! the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mate_core::datagen::{LabeledCloud, Split};
use mate_core::PointCloud;
use mate_core::train::LabeledDataset;
use mate_core::ttt::StreamSample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pcb;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub label: usize,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<String>,
    /// SHA-256 of the cloud file, checked when the file is read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<Entry>,
}

pub fn to_bytes(entries: &[Entry]) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(entries).expect("manifest entries serialize");
    out.push(b'\n');
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Write through a temporary file and rename, so a reader never sees a
/// partial manifest. Returns the SHA-256 of the written bytes.
pub fn write_atomic(path: &Path, entries: &[Entry]) -> Result<String> {
    let bytes = to_bytes(entries);
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, &bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    /// `path` may be the manifest file itself or the directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(FILE_NAME) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        let entries: Vec<Entry> = serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { dir, entries })
    }

    pub fn resolve(&self, e: &Entry) -> PathBuf {
        self.dir.join(&e.path)
    }

    /// Read an entry's cloud, verifying its recorded hash.
    pub fn read(&self, e: &Entry) -> Result<PointCloud> {
        let path = self.resolve(e);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        if let Some(want) = &e.sha256 {
            if *want != sha256_hex(&bytes) {
                bail!("{} does not match its manifest hash", path.display());
            }
        }
        pcb::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split.name())
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn labeled(&self, split: Split, num_classes: usize) -> Result<LabeledDataset> {
        let samples = self
            .split(split)
            .map(|e| Ok(LabeledCloud { cloud: self.read(e)?, label: e.label }))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            bail!("manifest has no `{}` samples", split.name());
        }
        Ok(LabeledDataset::new(samples, num_classes, split)?)
    }

    /// Every entry as a test-stream sample, in manifest order.
    pub fn stream(&self) -> Result<Vec<StreamSample>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(StreamSample {
                    cloud: self.read(e)?,
                    label: e.label,
                    corruption: e.corruption.clone().unwrap_or_else(|| "clean".into()),
                })
            })
            .collect()
    }
}
