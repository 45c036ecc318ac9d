//! Fixtures shared by the integration suites: one cached base model and a
//! memo of full continual runs keyed by (mode, seed, permutation).
#![allow(dead_code)]

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use augseg::config::{Preset, RunConfig};
use augseg::harness::{run, Mode, RunOutput, TaskStream};
use augseg::model::SegModel;
use augseg::pipeline;

/// Compact preset sized so a five-task run takes well under a minute.
pub fn config() -> RunConfig {
    let mut cfg = RunConfig::for_preset(Preset::Compact);
    cfg.seed = 1;
    cfg.pretrain.epochs = 10;
    cfg.pretrain.train_samples = 300;
    cfg.pretrain.test_samples = 60;
    cfg.pretrain.min_miou = 0.7;
    cfg.train.epochs = 10;
    cfg.train.train_samples = 150;
    cfg.train.test_samples = 60;
    cfg
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("augseg-base-{}.ckpt", &cfg.base_key()[..16]))
}

/// The pretrained, frozen base; trained once and reused across test binaries.
pub fn base() -> &'static SegModel {
    static BASE: OnceLock<SegModel> = OnceLock::new();
    BASE.get_or_init(|| {
        let cfg = config();
        let (model, _) = pipeline::ensure_base(&cfg, &checkpoint_path(&cfg)).expect("base pretraining");
        model
    })
}

pub fn stream(permutation: u64) -> TaskStream {
    TaskStream::new(config().domains(), permutation)
}

/// Memoized `run` with the fixture training config.
pub fn run_cached(mode: Mode, seed: u64, permutation: u64) -> Arc<RunOutput> {
    static RUNS: OnceLock<Mutex<HashMap<(Mode, u64, u64), Arc<RunOutput>>>> = OnceLock::new();
    let model = base();
    let mut memo = RUNS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    memo.entry((mode, seed, permutation))
        .or_insert_with(|| {
            let out = run(model, &stream(permutation), &config().train, mode, seed, &mut ()).expect("continual run");
            Arc::new(out)
        })
        .clone()
}

/// Writes straight to the process stderr so the line survives test output capture.
pub fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}
