//! Rows written by a training run and read back by the evaluation tools.
//!
//! `metrics.csv` holds one [`StepRecord`] per optimizer step, `epochs.csv`
//! one [`EpochRecord`] per epoch, `batches.jsonl` one [`BatchTrace`] per
//! batch and `scheduler_trace.jsonl` one [`SchedulerTrace`] per learned-policy
//! batch. Wall-clock timings go to `timing.csv` so the other files stay
//! byte-identical across repeated runs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const BATCHES_FILE: &str = "batches.jsonl";
pub const SCHEDULER_FILE: &str = "scheduler_trace.jsonl";
pub const TIMING_FILE: &str = "timing.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RECALL_FILE: &str = "recall.csv";
pub const FN_CURVE_FILE: &str = "fn_curve.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub space: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss_itc: f64,
    pub loss_itm: f64,
    pub loss_mlm: f64,
    pub loss_total: f64,
    pub mlm_after: f64,
    pub delta: f64,
    /// Mean and standard deviation of the quantiles consumed by chaining;
    /// NaN for uniformly drawn batches.
    pub q_mean: f64,
    pub q_std: f64,
    pub n_quantiles: usize,
    pub log_density: f64,
    pub update: String,
    /// False negatives among all ordered off-diagonal in-batch pairs.
    pub fn_in_batch: usize,
    pub in_batch_negatives: usize,
    /// False negatives among the negatives formed by consecutive picks.
    pub fn_selected: usize,
    pub selected_negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub uniform: bool,
    pub loss_itc: f64,
    pub loss_itm: f64,
    pub loss_mlm: f64,
    pub loss_total: f64,
    pub delta_mean: f64,
    pub fn_selected_rate: f64,
    pub fn_in_batch_rate: f64,
    pub q_mean: f64,
    pub alpha_mean: f64,
    pub beta_mean: f64,
    pub scheduler_updates: u64,
    pub eval_r1_mean: f64,
}

/// Composition of one batch, in selection order, as global pair indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchTrace {
    pub epoch: usize,
    pub step: u64,
    pub space: usize,
    pub pairs: Vec<usize>,
    /// Quantile used after each chaining anchor (`pairs[k]` → `pairs[k+1]`);
    /// empty for uniform batches.
    pub quantiles: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerTrace {
    pub epoch: usize,
    pub step: u64,
    pub delta: f64,
    pub update: String,
    pub log_density: f64,
    pub anchors: Vec<usize>,
    pub q: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: u64,
    pub wall_ms: f64,
}

/// Appends serde rows to a CSV file.
pub struct CsvSink {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        Self::open(path, false)
    }

    /// With `append`, rows go after the existing ones and no header is written.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let f = open_file(path, append)?;
        let inner = csv::WriterBuilder::new().has_headers(!append).from_writer(f);
        Ok(CsvSink {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.inner.serialize(row).map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Appends serde rows to a JSON-lines file.
pub struct JsonlSink {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        Self::open(path, false)
    }

    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let f = open_file(path, append)?;
        Ok(JsonlSink {
            path: path.to_path_buf(),
            inner: BufWriter::new(f),
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, row).map_err(|e| Error::format(&self.path, e.to_string()))?;
        self.inner.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn open_file(path: &Path, append: bool) -> Result<File> {
    let mut o = std::fs::OpenOptions::new();
    if append {
        o.append(true);
    } else {
        o.write(true).create(true).truncate(true);
    }
    o.open(path).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rd.deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(row);
    }
    Ok(out)
}
