//! Config-driven entry points shared by the command line and the C API.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{load_task, predict_prepared, run, Mode, RunOutput};
use crate::image::{prob_to_pgm, Mask};
use crate::io;
use crate::model::{pretrain_base, PretrainReport, SegModel};
use crate::record::{to_json, RunWriter};
use crate::rng;
use crate::synth::{generate_domain, DomainKind, DomainSpec, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseLog {
    /// Hash of the model, pretrain and seed settings that produced the checkpoint.
    pub base_key: String,
    pub report: PretrainReport,
}

pub fn base_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Generates the base-domain splits and pretrains a fresh model.
pub fn pretrain(cfg: &RunConfig) -> Result<(SegModel, PretrainReport)> {
    cfg.validate()?;
    let spec = DomainSpec::default_for(DomainKind::Base);
    let size = cfg.model.image_size;
    let k = cfg.train.prompts_per_sample;
    let seed = rng::mix(&[rng::tag::BASE_DATA, cfg.seed]);
    let train = generate_domain(&spec, size, cfg.pretrain.train_samples, k, seed, Split::Train)?;
    let test = generate_domain(&spec, size, cfg.pretrain.test_samples, k, seed, Split::Test)?;
    let model = SegModel::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    pretrain_base(model, &train, &test, &cfg.pretrain, cfg.seed)
}

pub enum BaseStatus {
    Trained(PretrainReport),
    UpToDate(PretrainReport),
}

/// Loads the checkpoint at `path` if its log matches `cfg`, else pretrains and writes it.
pub fn ensure_base(cfg: &RunConfig, path: &Path) -> Result<(SegModel, BaseStatus)> {
    let log_path = base_log_path(path);
    if path.exists() && log_path.exists() {
        let log: BaseLog =
            serde_json::from_slice(&io::read(&log_path)?).map_err(|e| Error::format(&log_path, e.to_string()))?;
        if log.base_key == cfg.base_key() {
            let model = io::load_checkpoint(path)?;
            if model.fingerprint() == log.report.fingerprint {
                return Ok((model, BaseStatus::UpToDate(log.report)));
            }
            log::warn!("{} does not match its log; retraining", path.display());
        }
    }
    let (model, report) = pretrain(cfg)?;
    io::save_checkpoint(path, &model)?;
    let log = BaseLog {
        base_key: cfg.base_key(),
        report: report.clone(),
    };
    io::write_atomic(&log_path, &to_json(&log))?;
    Ok((model, BaseStatus::Trained(report)))
}

/// Loads a frozen base checkpoint whose architecture matches `cfg`.
pub fn load_base(cfg: &RunConfig, path: &Path) -> Result<SegModel> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "base checkpoint missing; run `pretrain` first"),
        ));
    }
    let model = io::load_checkpoint(path)?;
    if model.config() != &cfg.model {
        return Err(Error::Validation(format!(
            "checkpoint {} was built for a different model config",
            path.display()
        )));
    }
    if !model.is_frozen() {
        return Err(Error::Validation(format!("checkpoint {} is not frozen", path.display())));
    }
    Ok(model)
}

/// Runs `mode` and persists every artifact under `dir`; on failure the
/// manifest records the error next to whatever rows completed.
pub fn run_to_dir(model: &SegModel, cfg: &RunConfig, mode: Mode, dir: &Path, dump_masks: usize) -> Result<RunOutput> {
    cfg.validate()?;
    let mut writer = RunWriter::create(dir, cfg)?;
    let out = match run(model, &cfg.task_stream(), &cfg.train, mode, cfg.seed, &mut writer) {
        Ok(o) => o,
        Err(e) => {
            writer.fail(&e)?;
            return Err(e);
        }
    };
    if dump_masks > 0 {
        if let Err(e) = write_masks(model, cfg, &out, &mut writer, dump_masks) {
            writer.fail(&e)?;
            return Err(e);
        }
    }
    writer.finish()?;
    Ok(out)
}

fn write_masks(model: &SegModel, cfg: &RunConfig, out: &RunOutput, writer: &mut RunWriter, n: usize) -> Result<()> {
    let k = cfg.train.start_block_for(model);
    let s = model.config().image_size;
    let mut train = cfg.train.clone();
    train.test_samples = train.test_samples.min(n);
    for (j, spec) in cfg.task_stream().ordered().iter().enumerate() {
        let data = load_task(model, spec, &train, cfg.seed)?;
        for (i, p) in data.test.iter().enumerate() {
            let set = match (&out.selector, out.record.mode) {
                (Some(sel), Mode::Samcl) => out.modules.get(sel.select(&p.embedding, k)?.task)?,
                (_, Mode::SamclOracle) => out.modules.get(j as u32)?,
                _ => out.modules.iter().last().ok_or_else(|| Error::State("no module to dump".into()))?,
            };
            let logits = predict_prepared(model, Some(set), p, k)?;
            let stem = format!("task{j:02}_{i:03}");
            writer.dump_mask(&format!("{stem}_pred"), &Mask::from_logits(s, s, logits.data())?.to_pgm())?;
            let prob: Vec<f64> = logits.data().iter().map(|&z| crate::tensor::sigmoid(z)).collect();
            writer.dump_mask(&format!("{stem}_prob"), &prob_to_pgm(s, s, &prob))?;
            writer.dump_mask(&format!("{stem}_gt"), &p.mask.to_pgm())?;
        }
    }
    Ok(())
}

/// Writes the base domain and every stream domain as `<dir>/<domain>/<split>/`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let size = cfg.model.image_size;
    let k = cfg.train.prompts_per_sample;
    let base_seed = rng::mix(&[rng::tag::BASE_DATA, cfg.seed]);
    let mut jobs = vec![(
        DomainSpec::default_for(DomainKind::Base),
        base_seed,
        cfg.pretrain.train_samples,
        cfg.pretrain.test_samples,
    )];
    jobs.extend(
        cfg.domains()
            .into_iter()
            .map(|d| (d, cfg.seed, cfg.train.train_samples, cfg.train.test_samples)),
    );
    let mut written = Vec::new();
    for (spec, seed, n_train, n_test) in jobs {
        for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
            let samples = generate_domain(&spec, size, n, k, seed, split)?;
            let out = dir.join(spec.kind.name()).join(match split {
                Split::Train => "train",
                Split::Test => "test",
            });
            crate::synth::dump_dataset(&out, &samples, Some(&spec), Some(seed), Some(split))?;
            written.push(out);
        }
    }
    Ok(written)
}
