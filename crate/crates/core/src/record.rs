//! On-disk run directories.
//!
//! ```text
//! <run>/manifest.json      status, files, config hash
//! <run>/config.toml        resolved config echo
//! <run>/summary.json       AA/FM/FT, final rows, selection accuracy, storage
//! <run>/{miou,mf1,mmae}.csv accuracy matrices (rows = step, cols = task)
//! <run>/timing.json        wall-clock per step (excluded from summary)
//! <run>/adapters/task_NN.adpt
//! <run>/buffer.bin, selector.bin
//! <run>/masks/*.pgm        optional prediction dumps
//! ```
//!
//! [`RunWriter`] is a [`RunObserver`], so the directory is rewritten after
//! every task and a failed run still leaves its completed rows behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::{Error, Result};
use crate::harness::{MetricSummary, Mode, RunObserver, RunRecord, RunState};
use crate::io;
use crate::metrics::{AccuracyMatrix, Metric};
use crate::selector::StorageReport;

pub const RUN_FORMAT: &str = "augseg-run";
pub const RUN_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub permutation: u64,
    pub config_sha256: String,
    pub tasks_total: usize,
    pub tasks_done: usize,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Relative path → sha256 of every artifact written so far.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub aa: Option<f64>,
    pub fm: Option<f64>,
    pub ft: Option<f64>,
    /// Last completed row, tasks in stream order.
    pub final_row: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub permutation: u64,
    pub order: Vec<String>,
    pub start_block: usize,
    pub base_fingerprint: String,
    pub tasks_done: usize,
    pub metrics: BTreeMap<String, MetricBlock>,
    pub selection_accuracy: Vec<Option<f64>>,
    pub selector_train_accuracy: Vec<Option<f64>>,
    pub storage: Vec<Option<StorageReport>>,
    pub adapter_stored_bytes: Vec<usize>,
    pub adapter_trainable_count: Vec<usize>,
    pub train_losses: Vec<Vec<f64>>,
    pub config: RunConfig,
}

impl Summary {
    pub fn from_record(record: &RunRecord, config: &RunConfig) -> Self {
        let metrics = Metric::ALL
            .iter()
            .map(|&m| {
                let MetricSummary { aa, fm, ft } = record.summary(m);
                let mat = record.matrices.get(m);
                let done = record.tasks_done();
                let final_row = if done == 0 {
                    Vec::new()
                } else {
                    (0..mat.tasks()).map(|j| if j < done { mat.get(done - 1, j) } else { None }).collect()
                };
                (
                    m.name().to_string(),
                    MetricBlock {
                        aa,
                        fm,
                        ft,
                        final_row,
                    },
                )
            })
            .collect();
        Self {
            format: RUN_FORMAT.into(),
            version: RUN_VERSION,
            mode: record.mode,
            seed: record.seed,
            permutation: record.permutation,
            order: record.order.clone(),
            start_block: record.start_block,
            base_fingerprint: record.base_fingerprint.clone(),
            tasks_done: record.tasks_done(),
            metrics,
            selection_accuracy: record.steps.iter().map(|s| s.selection_accuracy).collect(),
            selector_train_accuracy: record.steps.iter().map(|s| s.selector_train_accuracy).collect(),
            storage: record.steps.iter().map(|s| s.storage).collect(),
            adapter_stored_bytes: record.steps.iter().map(|s| s.adapter_stored_bytes).collect(),
            adapter_trainable_count: record.steps.iter().map(|s| s.adapter_trainable_count).collect(),
            train_losses: record.steps.iter().map(|s| s.train_losses.clone()).collect(),
            config: config.echo(),
        }
    }

    pub fn metric(&self, m: Metric) -> Result<&MetricBlock> {
        self.metrics
            .get(m.name())
            .ok_or_else(|| Error::Validation(format!("summary lacks metric {}", m.name())))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("summary.json");
        let s: Summary = serde_json::from_slice(&io::read(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
        if s.format != RUN_FORMAT || s.version != RUN_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported run summary {} v{}", s.format, s.version),
            ));
        }
        Ok(s)
    }
}

/// Matrix as CSV: header `step,<task names>`, empty cells for unfilled entries.
pub fn matrix_csv(m: &AccuracyMatrix, order: &[String]) -> String {
    let mut out = String::from("step");
    for name in order {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for (i, row) in m.rows().iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            match v {
                Some(x) => {
                    let _ = write!(out, ",{x:?}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub struct RunWriter {
    pub dir: PathBuf,
    config: RunConfig,
    config_sha: String,
    tasks_total: usize,
    files: BTreeMap<String, String>,
    last: Option<RunRecord>,
}

impl RunWriter {
    pub fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = config.echo().to_toml();
        let mut w = Self {
            dir: dir.to_path_buf(),
            config: config.clone(),
            config_sha: hex(&Sha256::digest(echo.as_bytes())),
            tasks_total: config.stream.domains.len(),
            files: BTreeMap::new(),
            last: None,
        };
        w.put("config.toml", echo.as_bytes())?;
        Ok(w)
    }

    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        io::write_atomic(&self.dir.join(rel), bytes)?;
        self.files.insert(rel.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    fn write_record(&mut self, record: &RunRecord) -> Result<()> {
        for m in Metric::ALL {
            let csv = matrix_csv(record.matrices.get(m), &record.order);
            self.put(&format!("{}.csv", m.name()), csv.as_bytes())?;
        }
        let summary = Summary::from_record(record, &self.config);
        self.put("summary.json", &to_json(&summary))?;
        let timing: Vec<_> = record
            .steps
            .iter()
            .map(|s| serde_json::json!({ "task": s.task, "domain": s.domain, "seconds": s.seconds }))
            .collect();
        self.put(
            "timing.json",
            &to_json(&serde_json::json!({ "steps": timing, "total_seconds": record.total_seconds() })),
        )?;
        self.last = Some(record.clone());
        Ok(())
    }

    fn write_manifest(&mut self, error: Option<String>) -> Result<()> {
        let (mode, seed, permutation, done) = match &self.last {
            Some(r) => (r.mode, r.seed, r.permutation, r.tasks_done()),
            None => (Mode::Samcl, self.config.seed, self.config.stream.permutation, 0),
        };
        let m = Manifest {
            format: RUN_FORMAT.into(),
            version: RUN_VERSION,
            mode,
            seed,
            permutation,
            config_sha256: self.config_sha.clone(),
            tasks_total: self.tasks_total,
            tasks_done: done,
            complete: error.is_none() && done == self.tasks_total,
            error,
            files: self.files.clone(),
        };
        let path = self.dir.join("manifest.json");
        io::write_atomic(&path, &to_json(&m))
    }

    /// Records a failure in the manifest; completed rows stay on disk.
    pub fn fail(&mut self, err: &Error) -> Result<()> {
        self.write_manifest(Some(err.to_string()))
    }

    pub fn finish(&mut self) -> Result<()> {
        self.write_manifest(None)
    }

    /// Writes a PGM per predicted mask under `masks/`.
    pub fn dump_mask(&mut self, name: &str, pgm: &[u8]) -> Result<()> {
        self.put(&format!("masks/{name}.pgm"), pgm)
    }
}

impl RunObserver for RunWriter {
    fn task_done(&mut self, state: &RunState<'_>) -> Result<()> {
        for set in state.modules.iter() {
            let rel = format!("adapters/task_{:02}.adpt", set.task_id);
            let bytes = io::encode_adapter(set)?;
            let digest = hex(&Sha256::digest(&bytes));
            // Isolated modules are write-once; the baseline's single adapter is replaced every step.
            if let Some(old) = self.files.get(&rel) {
                if *old != digest && state.record.mode != Mode::BaselineLora {
                    return Err(Error::InvariantViolation(format!("{rel} changed after it was written")));
                }
                if *old == digest {
                    continue;
                }
            }
            self.put(&rel, &bytes)?;
        }
        if state.record.mode == Mode::BaselineLora {
            let keep: Vec<String> = state
                .modules
                .iter()
                .map(|s| format!("adapters/task_{:02}.adpt", s.task_id))
                .collect();
            let stale: Vec<String> = self
                .files
                .keys()
                .filter(|k| k.starts_with("adapters/") && !keep.contains(k))
                .cloned()
                .collect();
            for k in stale {
                let _ = std::fs::remove_file(self.dir.join(&k));
                self.files.remove(&k);
            }
        }
        if let Some(b) = state.buffer {
            self.put("buffer.bin", &io::encode_buffer(b)?)?;
        }
        if let Some(s) = state.selector {
            self.put("selector.bin", &io::encode_selector(s)?)?;
        }
        self.write_record(state.record)?;
        self.write_manifest(None)
    }
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = serde_json::from_slice(&io::read(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != RUN_FORMAT || m.version != RUN_VERSION {
        return Err(Error::format(&path, format!("unsupported run manifest {} v{}", m.format, m.version)));
    }
    Ok(m)
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("record serializes");
    s.push(b'\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_leaves_unfilled_cells_empty() {
        let m = AccuracyMatrix::from_rows(vec![vec![Some(0.5), Some(0.25)], vec![None, None]]).unwrap();
        let csv = matrix_csv(&m, &["a".into(), "b".into()]);
        assert_eq!(csv, "step,a,b\n0,0.5,0.25\n1,,\n");
    }
}
