//! Parameter sweeps: one run directory per grid cell plus an aggregate table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterVariant;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{permutation_order, run, Mode};
use crate::metrics::Metric;
use crate::model::SegModel;
use crate::record::{RunWriter, Summary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Variant,
    Block,
    Buffer,
    Order,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Variant => "variant",
            SweepKind::Block => "block",
            SweepKind::Buffer => "buffer",
            SweepKind::Order => "order",
        }
    }
}

/// One grid point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepValue {
    Variant(AdapterVariant),
    Block(usize),
    Buffer(usize),
    Permutation(u64),
}

impl SweepValue {
    pub fn label(&self) -> String {
        match self {
            SweepValue::Variant(v) => v.name().to_string(),
            SweepValue::Block(k) => format!("k{k}"),
            SweepValue::Buffer(m) => format!("m{m}"),
            SweepValue::Permutation(p) => format!("p{p}"),
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        match *self {
            SweepValue::Variant(v) => cfg.train.variant = v,
            SweepValue::Block(k) => cfg.train.start_block = Some(k),
            SweepValue::Buffer(m) => cfg.train.buffer_cap = m,
            SweepValue::Permutation(p) => cfg.stream.permutation = p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sweep {
    pub kind: SweepKind,
    pub values: Vec<SweepValue>,
}

/// The first `count` permutation ids whose task orders are pairwise distinct.
pub fn distinct_permutations(tasks: usize, count: usize) -> Result<Vec<u64>> {
    let total: usize = (1..=tasks).product();
    if count > total {
        return Err(Error::Validation(format!(
            "{count} distinct orders requested but {tasks} tasks only have {total}"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    let mut ids = Vec::with_capacity(count);
    let mut id = 0u64;
    while ids.len() < count {
        if seen.insert(permutation_order(tasks, id)) {
            ids.push(id);
        }
        id += 1;
    }
    Ok(ids)
}

impl Sweep {
    /// Parses `kind` or `kind=v1,v2,...`.
    ///
    /// Defaults: variant = frozen-a, vanilla, slora, augmodule; block = 2, 4, 6;
    /// buffer = 50, 100, 300; order = 6 distinct permutations (`order=N` for N).
    pub fn parse(spec: &str, tasks: usize) -> Result<Self> {
        let (kind, rest) = match spec.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (spec.trim(), None),
        };
        let items: Option<Vec<&str>> = rest.map(|r| r.split(',').map(str::trim).filter(|s| !s.is_empty()).collect());
        if matches!(&items, Some(v) if v.is_empty()) {
            return Err(Error::Validation(format!("sweep {kind:?} has an empty grid")));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Validation(format!("sweep value {s:?} is not a non-negative integer")))
        };
        let (kind, values) = match kind {
            "variant" => {
                let vs = match items {
                    Some(v) => v.iter().map(|s| s.parse()).collect::<Result<Vec<AdapterVariant>>>()?,
                    None => AdapterVariant::ALL.to_vec(),
                };
                (SweepKind::Variant, vs.into_iter().map(SweepValue::Variant).collect())
            }
            "block" => {
                let ks = match items {
                    Some(v) => v.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?,
                    None => vec![2, 4, 6],
                };
                (SweepKind::Block, ks.into_iter().map(SweepValue::Block).collect())
            }
            "buffer" => {
                let ms = match items {
                    Some(v) => v.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?,
                    None => vec![50, 100, 300],
                };
                (SweepKind::Buffer, ms.into_iter().map(SweepValue::Buffer).collect())
            }
            "order" => {
                let n = match items.as_deref() {
                    Some([one]) => num(one)?,
                    Some(_) => return Err(Error::Validation("order sweep takes one count, e.g. order=6".into())),
                    None => 6,
                };
                if n == 0 {
                    return Err(Error::Validation("sweep \"order\" has an empty grid".into()));
                }
                let ids = distinct_permutations(tasks, n)?;
                (SweepKind::Order, ids.into_iter().map(SweepValue::Permutation).collect())
            }
            other => {
                return Err(Error::Validation(format!(
                    "unknown sweep {other:?} (variant, block, buffer, order)"
                )))
            }
        };
        Ok(Self { kind, values })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub mode: Mode,
    pub dir: PathBuf,
    pub summary: Summary,
}

impl Cell {
    pub fn value(&self, metric: Metric, f: fn(&crate::record::MetricBlock) -> Option<f64>) -> Option<f64> {
        self.summary.metric(metric).ok().and_then(f)
    }

    pub fn final_selection(&self) -> Option<f64> {
        self.summary.selection_accuracy.last().copied().flatten()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min,
            max,
        })
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSpread {
    pub mode: Mode,
    pub aa: Option<Spread>,
    pub fm: Option<Spread>,
    pub ft: Option<Spread>,
    pub selection: Option<Spread>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: SweepKind,
    pub cells: Vec<Cell>,
    pub spreads: Vec<ModeSpread>,
}

impl AblationReport {
    pub fn spread(&self, mode: Mode) -> Option<&ModeSpread> {
        self.spreads.iter().find(|s| s.mode == mode)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:<14} {:>8} {:>8} {:>8} {:>8} {:>10}",
            "cell", "mode", "AA", "FM", "FT", "sel", "bytes"
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<14} {:<14} {:>8} {:>8} {:>8} {:>8} {:>10}",
                c.label,
                c.mode.name(),
                fmt(c.value(Metric::MIou, |b| b.aa)),
                fmt(c.value(Metric::MIou, |b| b.fm)),
                fmt(c.value(Metric::MIou, |b| b.ft)),
                fmt(c.final_selection()),
                c.summary.adapter_stored_bytes.last().copied().unwrap_or(0)
            );
        }
        out.push('\n');
        let _ = writeln!(out, "mIoU spread across {} cells (mean / max-min):", self.kind.name());
        for s in &self.spreads {
            let f = |x: &Option<Spread>| x.map_or("-".to_string(), |s| format!("{:.4} / {:.4}", s.mean, s.range()));
            let _ = writeln!(
                out,
                "  {:<14} AA {}  FM {}  FT {}  sel {}",
                s.mode.name(),
                f(&s.aa),
                f(&s.fm),
                f(&s.ft),
                f(&s.selection)
            );
        }
        out
    }

    fn rows(&self, sep: char) -> String {
        let mut out = String::new();
        let mut header = vec!["cell".to_string(), "mode".to_string()];
        for m in Metric::ALL {
            for k in ["aa", "fm", "ft"] {
                header.push(format!("{k}_{}", m.name()));
            }
        }
        header.extend(["selection_accuracy".into(), "adapter_stored_bytes".into(), "dir".into()]);
        let _ = writeln!(out, "{}", header.join(&sep.to_string()));
        for c in &self.cells {
            let mut row = vec![c.label.clone(), c.mode.name().to_string()];
            for m in Metric::ALL {
                row.push(raw(c.value(m, |b| b.aa)));
                row.push(raw(c.value(m, |b| b.fm)));
                row.push(raw(c.value(m, |b| b.ft)));
            }
            row.push(raw(c.final_selection()));
            row.push(c.summary.adapter_stored_bytes.last().copied().unwrap_or(0).to_string());
            row.push(c.dir.display().to_string());
            let _ = writeln!(out, "{}", row.join(&sep.to_string()));
        }
        out
    }

    pub fn csv(&self) -> String {
        self.rows(',')
    }

    pub fn tsv(&self) -> String {
        self.rows('\t')
    }
}

fn fmt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

fn raw(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:?}"))
}

/// Runs every `(value, mode)` cell under `root/<kind>/<label>-<mode>`.
pub fn ablate(model: &SegModel, base: &RunConfig, sweep: &Sweep, modes: &[Mode], root: &Path) -> Result<AblationReport> {
    if sweep.values.is_empty() || modes.is_empty() {
        return Err(Error::Validation("empty sweep grid".into()));
    }
    let mut cells = Vec::new();
    for v in &sweep.values {
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        cfg.validate()?;
        for &mode in modes {
            let label = v.label();
            let dir = root.join(sweep.kind.name()).join(format!("{label}-{}", mode.name()));
            log::info!("ablate {}: {label} {}", sweep.kind.name(), mode.name());
            let mut writer = RunWriter::create(&dir, &cfg)?;
            match run(model, &cfg.task_stream(), &cfg.train, mode, cfg.seed, &mut writer) {
                Ok(_) => writer.finish()?,
                Err(e) => {
                    writer.fail(&e)?;
                    return Err(e);
                }
            }
            cells.push(Cell {
                label,
                mode,
                summary: Summary::load(&dir)?,
                dir,
            });
        }
    }
    let spreads = modes
        .iter()
        .map(|&mode| {
            let of = |f: &dyn Fn(&Cell) -> Option<f64>| {
                let xs: Vec<f64> = cells.iter().filter(|c| c.mode == mode).filter_map(f).collect();
                Spread::of(&xs)
            };
            ModeSpread {
                mode,
                aa: of(&|c| c.value(Metric::MIou, |b| b.aa)),
                fm: of(&|c| c.value(Metric::MIou, |b| b.fm)),
                ft: of(&|c| c.value(Metric::MIou, |b| b.ft)),
                selection: of(&|c| c.final_selection()),
            }
        })
        .collect();
    let report = AblationReport {
        kind: sweep.kind,
        cells,
        spreads,
    };
    let dir = root.join(sweep.kind.name());
    crate::io::write_atomic(&dir.join("ablation.csv"), report.csv().as_bytes())?;
    crate::io::write_atomic(&dir.join("ablation.tsv"), report.tsv().as_bytes())?;
    crate::io::write_atomic(&dir.join("comparison.txt"), report.table().as_bytes())?;
    crate::io::write_atomic(&dir.join("ablation.json"), &crate::record::to_json(&report))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_default_and_explicit_grids() {
        let s = Sweep::parse("variant=frozen-a,vanilla,slora", 5).unwrap();
        assert_eq!(s.values.len(), 3);
        assert_eq!(Sweep::parse("block", 5).unwrap().values, vec![
            SweepValue::Block(2),
            SweepValue::Block(4),
            SweepValue::Block(6)
        ]);
        assert_eq!(Sweep::parse("buffer=50,100", 5).unwrap().values.len(), 2);
        assert_eq!(Sweep::parse("order", 5).unwrap().values.len(), 6);
    }

    #[test]
    fn empty_or_unknown_grids_are_validation_errors() {
        for bad in ["buffer=", "variant=,", "order=0", "colour=1", "order=200", "variant=lora"] {
            let e = Sweep::parse(bad, 5).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn order_ids_give_distinct_orders() {
        let ids = distinct_permutations(5, 6).unwrap();
        assert_eq!(ids[0], 0);
        let orders: std::collections::HashSet<_> = ids.iter().map(|&i| permutation_order(5, i)).collect();
        assert_eq!(orders.len(), 6);
        assert_eq!(distinct_permutations(2, 2).unwrap().len(), 2);
        assert!(distinct_permutations(2, 3).is_err());
    }

    #[test]
    fn spread_range() {
        let s = Spread::of(&[0.2, 0.5, 0.3]).unwrap();
        assert!((s.mean - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.range() - 0.3).abs() < 1e-12);
        assert!(Spread::of(&[]).is_none());
    }
}
