//! Consolidated tables from run directories. Only summary fields are printed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::record::Summary;

pub struct Report {
    pub runs: Vec<(PathBuf, Summary)>,
    pub skipped: Vec<(PathBuf, Error)>,
}

impl Report {
    pub fn load(dirs: &[PathBuf]) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::Validation("report needs at least one run directory".into()));
        }
        let mut runs = Vec::new();
        let mut skipped = Vec::new();
        for d in dirs {
            match Summary::load(d) {
                Ok(s) => runs.push((d.clone(), s)),
                Err(e) => skipped.push((d.clone(), e)),
            }
        }
        Ok(Self { runs, skipped })
    }

    /// AA / FM / FT for each metric, one row per run.
    pub fn overall_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<28} {:<14}", "run", "mode");
        for m in Metric::ALL {
            for k in ["AA", "FM", "FT"] {
                let _ = write!(out, " {:>9}", format!("{k}/{}", m.name()));
            }
        }
        out.push('\n');
        for (dir, s) in &self.runs {
            let _ = write!(out, "{:<28} {:<14}", run_name(dir), s.mode.name());
            for m in Metric::ALL {
                let b = s.metric(m).ok();
                for v in [b.and_then(|b| b.aa), b.and_then(|b| b.fm), b.and_then(|b| b.ft)] {
                    let _ = write!(out, " {:>9}", cell(v));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Final-row score per task, with AA as the closing column.
    pub fn per_task_table(&self) -> String {
        let mut out = String::new();
        for (dir, s) in &self.runs {
            let _ = writeln!(out, "{} ({})", run_name(dir), s.mode.name());
            let _ = write!(out, "  {:<6}", "metric");
            for name in &s.order {
                let _ = write!(out, " {:>20}", name);
            }
            let _ = writeln!(out, " {:>8}", "AA");
            for m in Metric::ALL {
                let Ok(b) = s.metric(m) else { continue };
                let _ = write!(out, "  {:<6}", m.name());
                for v in &b.final_row {
                    let _ = write!(out, " {:>20}", cell(*v));
                }
                let _ = writeln!(out, " {:>8}", cell(b.aa));
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = self.overall_table();
        out.push('\n');
        out.push_str(&self.per_task_table());
        for (d, e) in &self.skipped {
            let _ = writeln!(out, "skipped {}: {e}", d.display());
        }
        out
    }
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}
