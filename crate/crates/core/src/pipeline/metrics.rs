//! Append-only JSON-lines metrics.
//!
//! Fields: `phase`, `epoch`, `step`, `loss`, `lr`, `clip_acc`, `top1`,
//! `topk`, `wall_time` (seconds since the run started) and `extra`, a map of
//! phase-specific values such as per-teacher losses (`loss/<head>`) or the
//! entropy-filter keep fraction (`kept`). Absent values are omitted.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clip_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub topk: Option<f64>,
    #[serde(default)]
    pub wall_time: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub extra: BTreeMap<String, f64>,
}

impl MetricRecord {
    pub fn new(phase: &str, epoch: usize, step: usize) -> Self {
        MetricRecord { phase: phase.to_string(), epoch, step, ..Default::default() }
    }
}

pub struct MetricsLog {
    path: Option<PathBuf>,
    file: Option<File>,
    start: Instant,
    last: Option<(String, usize, usize)>,
    records: Vec<MetricRecord>,
}

impl MetricsLog {
    /// Appends to `path`, creating it if needed.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            path: Some(path.to_path_buf()),
            file: Some(file),
            start: Instant::now(),
            last: None,
            records: Vec::new(),
        })
    }

    /// Keeps records in memory only.
    pub fn in_memory() -> Self {
        MetricsLog { path: None, file: None, start: Instant::now(), last: None, records: Vec::new() }
    }

    /// Appends one row. Within a phase, `(epoch, step)` must not go backwards.
    pub fn log(&mut self, mut rec: MetricRecord) -> Result<()> {
        if let Some((phase, epoch, step)) = &self.last {
            if *phase == rec.phase && (rec.epoch, rec.step) < (*epoch, *step) {
                return Err(Error::invalid(
                    "metrics",
                    format!("{} row ({}, {}) after ({epoch}, {step})", rec.phase, rec.epoch, rec.step),
                ));
            }
        }
        rec.wall_time = self.start.elapsed().as_secs_f64();
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&rec).expect("metrics serialize");
            let path = self.path.as_deref().unwrap_or(Path::new("metrics"));
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.last = Some((rec.phase.clone(), rec.epoch, rec.step));
        self.records.push(rec);
        Ok(())
    }

    /// Rows logged through this handle.
    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: i as u64,
            msg: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Renders every value except wall time at 4 decimals, for comparing runs.
pub fn fingerprint(records: &[MetricRecord]) -> Vec<String> {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    records
        .iter()
        .map(|r| {
            let extra: Vec<String> = r.extra.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            format!(
                "{} {} {} {} {} {} {} {} {}",
                r.phase,
                r.epoch,
                r.step,
                f(r.loss),
                f(r.lr),
                f(r.clip_acc),
                f(r.top1),
                f(r.topk),
                extra.join(",")
            )
        })
        .collect()
}
