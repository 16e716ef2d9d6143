//! Per-sample CSV rows, JSON run summaries and training-log CSV.
//!
//! `samples.csv` columns: `idx, corruption, label, pred, adapted,
//! loss_step_1 .. loss_step_k, ms, fallback`. Loss cells of samples that were
//! not adapted are empty.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mate_core::train::TrainLog;
use mate_core::ttt::RunReport;
use serde::{Deserialize, Serialize};

pub const SAMPLES_FILE: &str = "samples.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub idx: usize,
    pub corruption: String,
    pub label: usize,
    pub pred: usize,
    pub adapted: bool,
    pub losses: Vec<f64>,
    pub ms: f64,
    pub fallback: bool,
}

pub fn write_samples(path: &Path, report: &RunReport) -> Result<()> {
    let k = report.records.iter().map(|r| r.losses.len()).max().unwrap_or(0).max(report.config.steps);
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header: Vec<String> = ["idx", "corruption", "label", "pred", "adapted"].map(String::from).to_vec();
    header.extend((1..=k).map(|i| format!("loss_step_{i}")));
    header.push("ms".into());
    header.push("fallback".into());
    w.write_record(&header)?;
    for r in &report.records {
        let mut row = vec![
            r.index.to_string(),
            r.corruption.clone(),
            r.label.to_string(),
            r.pred.to_string(),
            u8::from(r.adapted).to_string(),
        ];
        row.extend((0..k).map(|i| r.losses.get(i).map(|l| l.to_string()).unwrap_or_default()));
        row.push(format!("{:.3}", r.micros as f64 / 1000.0));
        row.push(u8::from(r.fallback).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn flag(s: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => bail!("expected 0 or 1, got `{s}`"),
    }
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).with_context(|| format!("{}: no `{name}` column", path.display()));
    let (ci, cc, cl, cp, ca, cm) = (col("idx")?, col("corruption")?, col("label")?, col("pred")?, col("adapted")?, col("ms")?);
    let cf = header.iter().position(|h| h == "fallback");
    let loss_cols: Vec<usize> = (1..).map_while(|i| header.iter().position(|h| h == format!("loss_step_{i}"))).collect();
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = || -> Result<SampleRow> {
            let mut losses = Vec::new();
            for &c in &loss_cols {
                match &rec[c] {
                    "" => break,
                    v => losses.push(v.parse()?),
                }
            }
            Ok(SampleRow {
                idx: rec[ci].parse()?,
                corruption: rec[cc].to_string(),
                label: rec[cl].parse()?,
                pred: rec[cp].parse()?,
                adapted: flag(&rec[ca])?,
                losses,
                ms: rec[cm].parse()?,
                fallback: cf.map(|c| flag(&rec[c])).transpose()?.unwrap_or(false),
            })
        };
        rows.push(parse().with_context(|| format!("{} row {}", path.display(), n + 2))?);
    }
    Ok(rows)
}

/// Overall accuracy and the unweighted mean of per-corruption accuracies,
/// computed from raw rows.
pub fn accuracy_from_rows(rows: &[SampleRow]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let hit = |rs: &[&SampleRow]| rs.iter().filter(|r| r.pred == r.label).count() as f64 / rs.len() as f64;
    let all: Vec<&SampleRow> = rows.iter().collect();
    let mut tags: Vec<&str> = Vec::new();
    for r in rows {
        if !tags.contains(&r.corruption.as_str()) {
            tags.push(&r.corruption);
        }
    }
    let mean = tags
        .iter()
        .map(|t| hit(&rows.iter().filter(|r| r.corruption == *t).collect::<Vec<_>>()))
        .sum::<f64>()
        / tags.len() as f64;
    (hit(&all), mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionAccuracy {
    pub corruption: String,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub mode: String,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_accuracy: f64,
    pub per_corruption: Vec<CorruptionAccuracy>,
    pub adapted: usize,
    pub fallback: usize,
    pub total_ms: f64,
    pub fps: f64,
    pub mean_loss_per_step: Vec<f64>,
    pub accuracy_per_step: Vec<f64>,
}

impl Summary {
    pub fn of(report: &RunReport) -> Self {
        let secs = report.total_micros() as f64 / 1e6;
        let steps = report.records.iter().map(|r| r.losses.len()).max().unwrap_or(0);
        Self {
            version: crate::config::version_string(),
            mode: report.config.mode.name().into(),
            samples: report.records.len(),
            accuracy: report.accuracy(),
            mean_accuracy: report.mean_corruption_accuracy(),
            per_corruption: report
                .per_corruption()
                .into_iter()
                .map(|(corruption, accuracy, count)| CorruptionAccuracy { corruption, accuracy, count })
                .collect(),
            adapted: report.adapted_count(),
            fallback: report.fallback_count(),
            total_ms: secs * 1000.0,
            fps: if secs > 0.0 { report.records.len() as f64 / secs } else { 0.0 },
            mean_loss_per_step: (1..=steps).map_while(|s| report.mean_loss_at_step(s)).collect(),
            accuracy_per_step: (1..=steps).map_while(|s| report.accuracy_at_step(s)).collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["epoch", "ce_loss", "recon_loss", "total_loss", "train_acc", "val_acc", "lr"])?;
    for e in &log.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.ce_loss.to_string(),
            e.recon_loss.to_string(),
            e.total_loss.to_string(),
            e.train_acc.to_string(),
            e.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            e.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of a training log, as `(epoch, total_loss, val_acc)`.
pub fn read_train_log(path: &Path) -> Result<Vec<(usize, f64, Option<f64>)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ensure!(rec.len() == 7, "{}: expected 7 columns", path.display());
        let val = if rec[5].is_empty() { None } else { Some(rec[5].parse()?) };
        out.push((rec[0].parse()?, rec[3].parse()?, val));
    }
    Ok(out)
}
