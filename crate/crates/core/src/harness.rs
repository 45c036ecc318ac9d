//! Continual training loop, evaluation routes and the sequential baseline.
//!
//! Adapters only live in blocks `k..n`, so each sample's block-`k` state is
//! computed once with the frozen base and reused for training, selection
//! and evaluation. Per-task randomness is keyed by domain id rather than
//! stream position, which makes isolated modules order-independent.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{count_params, AdapterSet, AdapterVariant};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::loss::loss_seg;
use crate::metrics::{self, AccuracyMatrix, Metric, SegScores};
use crate::model::{score_logits, PromptHeatmap, PromptSet, SegModel};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng;
use crate::selector::{
    extract_embedding, storage_report, train_selector, EmbeddingBuffer, SelectionResult, SelectorConfig, SelectorMlp,
    StorageReport,
};
use crate::synth::{generate_domain, DomainSpec, Sample, Split};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub rank: usize,
    pub batch_size: usize,
    /// Frozen leading blocks; defaults to half the encoder.
    pub start_block: Option<usize>,
    pub buffer_cap: usize,
    pub variant: AdapterVariant,
    pub train_samples: usize,
    pub test_samples: usize,
    pub prompts_per_sample: usize,
    pub selector: SelectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.005,
            rank: 4,
            batch_size: 8,
            start_block: None,
            buffer_cap: 300,
            variant: AdapterVariant::Augmodule,
            train_samples: 200,
            test_samples: 80,
            prompts_per_sample: 3,
            selector: SelectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn start_block_for(&self, model: &SegModel) -> usize {
        self.start_block.unwrap_or_else(|| model.config().default_start_block())
    }

    pub fn validate(&self, model: &SegModel) -> Result<()> {
        let n = model.config().num_blocks;
        let k = self.start_block_for(model);
        if k >= n {
            return Err(Error::Validation(format!("start block {k} must be below {n} blocks")));
        }
        if self.rank == 0 || self.batch_size == 0 || self.buffer_cap == 0 {
            return Err(Error::Validation("rank, batch size and buffer cap must be >= 1".into()));
        }
        if self.train_samples == 0 || self.test_samples == 0 || self.prompts_per_sample == 0 {
            return Err(Error::Validation("sample and prompt counts must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Validation("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Samcl,
    SamclOracle,
    BaselineLora,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Samcl => "samcl",
            Mode::SamclOracle => "samcl-oracle",
            Mode::BaselineLora => "baseline-lora",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::Samcl, Mode::SamclOracle, Mode::BaselineLora]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown mode {s:?} (samcl, samcl-oracle, baseline-lora)")))
    }
}

/// Domain order for permutation `id`: 0 is the given order, others a seeded shuffle.
pub fn permutation_order(n: usize, id: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if id != 0 {
        order.shuffle(&mut rng::stream(&[rng::tag::ORDER, id]));
    }
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub domains: Vec<DomainSpec>,
    pub permutation: u64,
}

impl TaskStream {
    pub fn new(domains: Vec<DomainSpec>, permutation: u64) -> Self {
        Self { domains, permutation }
    }

    pub fn ordered(&self) -> Vec<DomainSpec> {
        permutation_order(self.domains.len(), self.permutation)
            .into_iter()
            .map(|i| self.domains[i].clone())
            .collect()
    }
}

/// A sample with everything the post-`k` path needs precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub prefix: Tensor,
    pub embedding: Tensor,
    pub heat: PromptHeatmap,
    pub gt: Tensor,
    pub mask: Mask,
}

pub fn prepare(model: &SegModel, samples: &[Sample], k: usize) -> Result<Vec<Prepared>> {
    let c = model.config();
    samples
        .iter()
        .map(|s| {
            let prefix = model.prefix(&s.image, k)?;
            let embedding = extract_embedding(std::slice::from_ref(&prefix), 0, c.grid())?;
            Ok(Prepared {
                prefix,
                embedding,
                heat: model.heatmap(&s.prompts)?,
                gt: Tensor::new(vec![s.mask.height, s.mask.width], s.mask.to_f64())?,
                mask: s.mask.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: DomainSpec,
    pub train: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

pub fn load_task(model: &SegModel, spec: &DomainSpec, cfg: &TrainConfig, seed: u64) -> Result<TaskData> {
    let size = model.config().image_size;
    let k = cfg.start_block_for(model);
    let train = generate_domain(spec, size, cfg.train_samples, cfg.prompts_per_sample, seed, Split::Train)?;
    let test = generate_domain(spec, size, cfg.test_samples, cfg.prompts_per_sample, seed, Split::Test)?;
    Ok(TaskData {
        spec: spec.clone(),
        train: prepare(model, &train, k)?,
        test: prepare(model, &test, k)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Optimizes only the adapter tensors of `set` on `data`, resuming from the cached prefixes.
pub fn train_task(
    model: &SegModel,
    mut set: AdapterSet,
    data: &[Prepared],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(AdapterSet, TrainLog)> {
    if !model.is_frozen() {
        return Err(Error::State("adapter training needs a frozen base".into()));
    }
    set.validate_for(model.config())?;
    let before = model.fingerprint();
    let k = set.start_block;
    let n = model.config().num_blocks;
    let sizes: Vec<usize> = set.trainable_mut().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &sizes,
    );
    let heat: Vec<Tensor> = data.iter().map(|p| model.heat_tensor(&p.heat)).collect::<Result<_>>()?;
    let total = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(&[rng::tag::SHUFFLE, seed, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Tensor> = sizes.iter().map(|&s| Tensor::zeros(&[s])).collect();
            for &i in batch {
                let p = &data[i];
                let mut tape = Tape::new();
                let vars = model.register(&mut tape, false);
                let av = set.register(&mut tape, true);
                let h = tape.constant(&heat[i]);
                let prompt = av.prompt_projection(&mut tape, Some(h))?;
                let x = tape.constant(&p.prefix);
                let x = model.blocks_on(&mut tape, &vars, x, k..n, Some(&av), prompt, None)?;
                let f = model.final_norm_on(&mut tape, &vars, x)?;
                let (logits, iou) = model.decode_on(&mut tape, &vars, f, h)?;
                let (loss, _) = loss_seg(&mut tape, logits, &p.gt, iou)?;
                epoch_loss += tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;
                for (a, &v) in acc.iter_mut().zip(&av.trainable) {
                    if let Some(g) = grads.raw(v) {
                        for (x, y) in a.data_mut().iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            let mut params = set.trainable_mut();
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = acc
                .into_iter()
                .zip(&params)
                .map(|(g, p)| g.scale(inv).reshape(p.shape()))
                .collect::<Result<_>>()?;
            opt.step(&mut params, &grads, cosine_lr(cfg.lr, log.steps, total))?;
            log.steps += 1;
        }
        let mean = epoch_loss / data.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingFailure(format!("adapter loss diverged in epoch {epoch}")));
        }
        log.epoch_losses.push(mean);
    }
    if model.fingerprint() != before {
        return Err(Error::InvariantViolation("base weights changed while training an adapter".into()));
    }
    Ok((set, log))
}

/// Post-`k` forward with a given adapter (or none).
pub fn predict_prepared(model: &SegModel, set: Option<&AdapterSet>, p: &Prepared, k: usize) -> Result<Tensor> {
    let f = model.resume(&p.prefix, k, set, Some(&p.heat))?;
    Ok(model.decode(&f, &p.heat)?.logits)
}

pub fn evaluate_fixed(model: &SegModel, set: Option<&AdapterSet>, data: &[Prepared], k: usize) -> Result<SegScores> {
    let scores = data
        .iter()
        .map(|p| score_logits(&predict_prepared(model, set, p, k)?, &p.mask))
        .collect::<Result<Vec<_>>>()?;
    SegScores::mean(&scores)
}

/// Per-task adapters, write-once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModuleSet {
    modules: BTreeMap<u32, AdapterSet>,
}

impl ModuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, set: AdapterSet) -> Result<()> {
        if self.modules.contains_key(&set.task_id) {
            return Err(Error::State(format!("module for task {} already stored", set.task_id)));
        }
        self.modules.insert(set.task_id, set);
        Ok(())
    }

    pub fn get(&self, task: u32) -> Result<&AdapterSet> {
        self.modules
            .get(&task)
            .ok_or_else(|| Error::State(format!("no stored module for task {task}")))
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdapterSet> {
        self.modules.values()
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub mask: Mask,
    pub predicted_iou: f64,
    pub selection: SelectionResult,
    /// Encoder blocks executed for this image.
    pub blocks_run: usize,
    pub selector_calls: usize,
}

fn route(
    model: &SegModel,
    modules: &ModuleSet,
    selector: &SelectorMlp,
    prefix: &Tensor,
    heat: &PromptHeatmap,
    k: usize,
) -> Result<Inference> {
    let emb = extract_embedding(std::slice::from_ref(prefix), 0, model.config().grid())?;
    let selection = selector.select(&emb, k)?;
    let set = modules.get(selection.task)?;
    let before = model.block_calls();
    let f = model.resume(prefix, k, Some(set), Some(heat))?;
    let resumed = model.block_calls() - before;
    let out = model.decode(&f, heat)?;
    let s = model.config().image_size;
    Ok(Inference {
        mask: Mask::from_logits(s, s, out.logits.data())?,
        logits: out.logits,
        predicted_iou: out.iou,
        selection,
        blocks_run: resumed,
        selector_calls: 1,
    })
}

/// Task-agnostic inference: one pass through blocks `..k`, one selector call,
/// then the chosen adapter on blocks `k..` from the cached state.
pub fn infer_with_selection(
    model: &SegModel,
    modules: &ModuleSet,
    selector: &SelectorMlp,
    image: &Image,
    prompts: &PromptSet,
    k: usize,
) -> Result<Inference> {
    if modules.is_empty() {
        return Err(Error::State("module set is empty".into()));
    }
    let heat = model.heatmap(prompts)?;
    let before = model.block_calls();
    let prefix = model.prefix(image, k)?;
    let prefix_blocks = model.block_calls() - before;
    let mut out = route(model, modules, selector, &prefix, &heat, k)?;
    out.blocks_run += prefix_blocks;
    Ok(out)
}

/// Scores on `data` routing each sample through the selector; also returns the hit count for `truth`.
pub fn evaluate_routed(
    model: &SegModel,
    modules: &ModuleSet,
    selector: &SelectorMlp,
    data: &[Prepared],
    truth: u32,
    k: usize,
) -> Result<(SegScores, usize)> {
    let mut scores = Vec::with_capacity(data.len());
    let mut hits = 0;
    for p in data {
        let out = route(model, modules, selector, &p.prefix, &p.heat, k)?;
        hits += usize::from(out.selection.task == truth);
        scores.push(score_logits(&out.logits, &p.mask)?);
    }
    Ok((SegScores::mean(&scores)?, hits))
}

fn selection_hits(selector: &SelectorMlp, data: &[Prepared], truth: u32, k: usize) -> Result<usize> {
    let mut hits = 0;
    for p in data {
        hits += usize::from(selector.select(&p.embedding, k)?.task == truth);
    }
    Ok(hits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrices {
    pub miou: AccuracyMatrix,
    pub mf1: AccuracyMatrix,
    pub mmae: AccuracyMatrix,
}

impl Matrices {
    pub fn new(t: usize) -> Self {
        Self {
            miou: AccuracyMatrix::new(t),
            mf1: AccuracyMatrix::new(t),
            mmae: AccuracyMatrix::new(t),
        }
    }

    pub fn get(&self, m: Metric) -> &AccuracyMatrix {
        match m {
            Metric::MIou => &self.miou,
            Metric::MF1 => &self.mf1,
            Metric::MMae => &self.mmae,
        }
    }

    fn set(&mut self, i: usize, j: usize, s: SegScores) -> Result<()> {
        self.miou.set(i, j, s.iou)?;
        self.mf1.set(i, j, s.f1)?;
        self.mmae.set(i, j, s.mae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: u32,
    pub domain: String,
    pub train_losses: Vec<f64>,
    /// Held-out routing accuracy of the learned selector over tasks seen so far.
    pub selection_accuracy: Option<f64>,
    pub selector_train_accuracy: Option<f64>,
    pub storage: Option<StorageReport>,
    pub adapter_stored_bytes: usize,
    pub adapter_trainable_count: usize,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub permutation: u64,
    pub order: Vec<String>,
    pub start_block: usize,
    pub base_fingerprint: String,
    pub matrices: Matrices,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub aa: Option<f64>,
    pub fm: Option<f64>,
    pub ft: Option<f64>,
}

impl RunRecord {
    /// AA/FM/FT of `metric`; `None` where the matrix is not yet complete enough.
    pub fn summary(&self, metric: Metric) -> MetricSummary {
        let m = self.matrices.get(metric);
        MetricSummary {
            aa: metrics::aa(m).ok(),
            fm: metrics::fm(m).ok(),
            ft: metrics::ft(m).ok(),
        }
    }

    pub fn tasks_done(&self) -> usize {
        self.steps.len()
    }

    pub fn total_seconds(&self) -> f64 {
        self.steps.iter().map(|s| s.seconds).sum()
    }
}

/// Receives the run state after every completed task, e.g. to flush artifacts.
pub trait RunObserver {
    fn task_done(&mut self, _state: &RunState<'_>) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

pub struct RunState<'a> {
    pub record: &'a RunRecord,
    pub modules: &'a ModuleSet,
    pub buffer: Option<&'a EmbeddingBuffer>,
    pub selector: Option<&'a SelectorMlp>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    pub modules: ModuleSet,
    pub buffer: Option<EmbeddingBuffer>,
    pub selector: Option<SelectorMlp>,
}

fn new_record(model: &SegModel, mode: Mode, stream: &TaskStream, order: &[DomainSpec], k: usize, seed: u64) -> RunRecord {
    RunRecord {
        mode,
        seed,
        permutation: stream.permutation,
        order: order.iter().map(|d| d.kind.name().to_string()).collect(),
        start_block: k,
        base_fingerprint: model.fingerprint(),
        matrices: Matrices::new(order.len()),
        steps: Vec::new(),
    }
}

fn check_stream(stream: &TaskStream) -> Result<()> {
    if stream.domains.is_empty() {
        return Err(Error::Validation("task stream is empty".into()));
    }
    let mut kinds: Vec<_> = stream.domains.iter().map(|d| d.kind).collect();
    kinds.sort();
    kinds.dedup();
    if kinds.len() != stream.domains.len() {
        return Err(Error::Validation("task stream repeats a domain".into()));
    }
    Ok(())
}

/// Runs the stream in `mode`.
pub fn run(
    model: &SegModel,
    stream: &TaskStream,
    cfg: &TrainConfig,
    mode: Mode,
    seed: u64,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput> {
    match mode {
        Mode::BaselineLora => baseline_sequential(model, stream, cfg, seed, observer),
        _ => run_continual(model, stream, cfg, mode == Mode::SamclOracle, seed, observer),
    }
}

/// One isolated adapter per task plus a retrained selector; `oracle` routes
/// seen tasks by ground truth instead of the selector.
pub fn run_continual(
    model: &SegModel,
    stream: &TaskStream,
    cfg: &TrainConfig,
    oracle: bool,
    seed: u64,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput> {
    cfg.validate(model)?;
    check_stream(stream)?;
    let k = cfg.start_block_for(model);
    let order = stream.ordered();
    let t_total = order.len();
    let mode = if oracle { Mode::SamclOracle } else { Mode::Samcl };
    let mut record = new_record(model, mode, stream, &order, k, seed);
    let tasks: Vec<TaskData> = order.iter().map(|d| load_task(model, d, cfg, seed)).collect::<Result<_>>()?;
    let sites = model.default_sites(k);
    let mut modules = ModuleSet::new();
    let mut buffer = EmbeddingBuffer::new(cfg.buffer_cap, model.config().embed_dim)?;
    let mut selector: Option<SelectorMlp> = None;
    let s = model.config().image_size;

    for (i, task) in tasks.iter().enumerate() {
        let clock = Instant::now();
        let tid = i as u32;
        let dom = task.spec.kind.id() as u64;
        let init = AdapterSet::new(
            tid,
            cfg.variant,
            cfg.rank,
            k,
            &sites,
            &mut rng::stream(&[rng::tag::ADAPTER_INIT, seed, dom]),
        )?;
        let emb: Vec<Tensor> = task.train.iter().map(|p| p.embedding.clone()).collect();
        buffer.add(tid, &emb, rng::mix(&[seed, dom]))?;
        let (sel, sel_report) = train_selector(&buffer, &cfg.selector, rng::mix(&[seed, i as u64]))?;
        let (set, log) = train_task(model, init, &task.train, cfg, rng::mix(&[seed, dom]))?;
        let params = count_params(set.variant, &set.site_dims(), set.rank)?;
        modules.insert(set)?;

        let mut hits = 0;
        let mut seen = 0;
        for (j, tj) in tasks.iter().enumerate().take(i + 1) {
            let scores = if oracle {
                hits += selection_hits(&sel, &tj.test, j as u32, k)?;
                evaluate_fixed(model, Some(modules.get(j as u32)?), &tj.test, k)?
            } else {
                let (scores, h) = evaluate_routed(model, &modules, &sel, &tj.test, j as u32, k)?;
                hits += h;
                scores
            };
            seen += tj.test.len();
            record.matrices.set(i, j, scores)?;
        }
        if i + 1 < t_total {
            let next = &tasks[i + 1];
            let (scores, _) = evaluate_routed(model, &modules, &sel, &next.test, u32::MAX, k)?;
            record.matrices.set(i, i + 1, scores)?;
        }
        record.steps.push(StepRecord {
            task: tid,
            domain: task.spec.kind.name().to_string(),
            train_losses: log.epoch_losses,
            selection_accuracy: Some(hits as f64 / seen as f64),
            selector_train_accuracy: Some(sel_report.train_accuracy),
            storage: Some(storage_report(&buffer, Some(&sel), (3, s, s, 1), 8)),
            adapter_stored_bytes: params.stored_bytes,
            adapter_trainable_count: params.trainable_count,
            seconds: clock.elapsed().as_secs_f64(),
        });
        selector = Some(sel);
        log::info!(
            "{} task {i} ({}) done in {:.1}s",
            mode.name(),
            task.spec.kind,
            record.steps[i].seconds
        );
        observer.task_done(&RunState {
            record: &record,
            modules: &modules,
            buffer: Some(&buffer),
            selector: selector.as_ref(),
        })?;
    }
    Ok(RunOutput {
        record,
        modules,
        buffer: Some(buffer),
        selector,
    })
}

/// One vanilla LoRA adapter trained through the whole stream, no isolation, no selector.
pub fn baseline_sequential(
    model: &SegModel,
    stream: &TaskStream,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput> {
    cfg.validate(model)?;
    check_stream(stream)?;
    let k = cfg.start_block_for(model);
    let order = stream.ordered();
    let t_total = order.len();
    let mut record = new_record(model, Mode::BaselineLora, stream, &order, k, seed);
    let tasks: Vec<TaskData> = order.iter().map(|d| load_task(model, d, cfg, seed)).collect::<Result<_>>()?;
    let sites = model.default_sites(k);
    let mut set = AdapterSet::new(
        0,
        AdapterVariant::Vanilla,
        cfg.rank,
        k,
        &sites,
        &mut rng::stream(&[rng::tag::ADAPTER_INIT, seed, u64::MAX]),
    )?;
    let params = count_params(AdapterVariant::Vanilla, &sites, cfg.rank)?;
    let mut snapshot = ModuleSet::new();
    for (i, task) in tasks.iter().enumerate() {
        let clock = Instant::now();
        let dom = task.spec.kind.id() as u64;
        let (next, log) = train_task(model, set, &task.train, cfg, rng::mix(&[seed, dom]))?;
        set = next;
        for (j, tj) in tasks.iter().enumerate().take((i + 2).min(t_total)) {
            record.matrices.set(i, j, evaluate_fixed(model, Some(&set), &tj.test, k)?)?;
        }
        record.steps.push(StepRecord {
            task: i as u32,
            domain: task.spec.kind.name().to_string(),
            train_losses: log.epoch_losses,
            selection_accuracy: None,
            selector_train_accuracy: None,
            storage: None,
            adapter_stored_bytes: params.stored_bytes,
            adapter_trainable_count: params.trainable_count,
            seconds: clock.elapsed().as_secs_f64(),
        });
        snapshot = ModuleSet::new();
        let mut current = set.clone();
        current.task_id = i as u32;
        snapshot.insert(current)?;
        observer.task_done(&RunState {
            record: &record,
            modules: &snapshot,
            buffer: None,
            selector: None,
        })?;
    }
    Ok(RunOutput {
        record,
        modules: snapshot,
        buffer: None,
        selector: None,
    })
}
