//! Module selector: a capped per-task buffer of pooled block-`k` embeddings
//! and a small MLP that maps an embedding to the task whose adapter to use.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Spatial mean of `activations[k]` (`[tokens, D]` on a `grid × grid` layout).
pub fn extract_embedding(activations: &[Tensor], k: usize, grid: usize) -> Result<Tensor> {
    let a = activations
        .get(k)
        .ok_or_else(|| Error::Index(format!("block {k} not among {} activations", activations.len())))?;
    let (t, d) = a.dims2()?;
    if t != grid * grid {
        return Err(Error::dim("extract_embedding", a.shape(), &[grid * grid, d]));
    }
    a.clone().reshape(&[1, grid, grid, d])?.mean_pool_hw()?.reshape(&[d])
}

/// Partial Fisher-Yates: the first `m` entries of a seeded shuffle of `0..n`.
pub fn sample_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(&[rng::tag::BUFFER, seed]);
    let mut idx: Vec<usize> = (0..n).collect();
    let m = m.min(n);
    for i in 0..m {
        let j = r.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbeddings {
    pub task: u32,
    pub vectors: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBuffer {
    pub cap: usize,
    pub dim: usize,
    pub tasks: Vec<TaskEmbeddings>,
}

impl EmbeddingBuffer {
    pub fn new(cap: usize, dim: usize) -> Result<Self> {
        if cap == 0 || dim == 0 {
            return Err(Error::Validation("buffer cap and dimension must be >= 1".into()));
        }
        Ok(Self {
            cap,
            dim,
            tasks: Vec::new(),
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(|t| t.vectors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `min(cap, candidates)` vectors for `task`, chosen without replacement.
    pub fn add(&mut self, task: u32, candidates: &[Tensor], seed: u64) -> Result<()> {
        if self.tasks.iter().any(|t| t.task == task) {
            return Err(Error::State(format!("task {task} already buffered")));
        }
        if let Some(bad) = candidates.iter().find(|c| c.shape() != [self.dim]) {
            return Err(Error::dim("buffer_add", bad.shape(), &[self.dim]));
        }
        let picks = sample_indices(candidates.len(), self.cap, rng::mix(&[seed, task as u64]));
        self.tasks.push(TaskEmbeddings {
            task,
            vectors: picks.into_iter().map(|i| candidates[i].clone()).collect(),
        });
        Ok(())
    }

    /// Every vector with its class index (buffer order) as a label.
    fn labelled(&self) -> (Vec<&Tensor>, Vec<usize>) {
        let mut xs = Vec::with_capacity(self.len());
        let mut ys = Vec::with_capacity(self.len());
        for (c, t) in self.tasks.iter().enumerate() {
            for v in &t.vectors {
                xs.push(v);
                ys.push(c);
            }
        }
        (xs, ys)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            lr: 0.002,
            batch_size: 32,
        }
    }
}

/// `D → D → D/4 → D/4 → T` with GELU between layers, on standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorMlp {
    /// Task id of each output column.
    pub tasks: Vec<u32>,
    /// Per-coordinate centre of the training buffer.
    pub mean: Tensor,
    /// One RMS scale shared by all coordinates, so relative spreads survive.
    pub std: Tensor,
    /// `[w1, b1, w2, b2, w3, b3, w4, b4]`, weights stored `[out, in]`.
    pub layers: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub task: u32,
    pub index: usize,
    pub logits: Vec<f64>,
    pub block: usize,
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub const LAYER_NAMES: [&str; 8] = ["w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"];

impl SelectorMlp {
    pub fn init<R: Rng + ?Sized>(dim: usize, tasks: Vec<u32>, rng: &mut R) -> Result<Self> {
        if dim < 4 || tasks.is_empty() {
            return Err(Error::Validation("selector needs D >= 4 and at least one task".into()));
        }
        let q = dim / 4;
        let t = tasks.len();
        let lin = |o: usize, i: usize, rng: &mut R| Tensor::randn(&[o, i], 1.0 / (i as f64).sqrt(), rng);
        let layers = vec![
            lin(dim, dim, rng),
            Tensor::zeros(&[dim]),
            lin(q, dim, rng),
            Tensor::zeros(&[q]),
            lin(q, q, rng),
            Tensor::zeros(&[q]),
            lin(t, q, rng),
            Tensor::zeros(&[t]),
        ];
        Ok(Self {
            tasks,
            mean: Tensor::zeros(&[dim]),
            std: Tensor::scalar(1.0),
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum::<usize>() + self.dim() + 1
    }

    fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d) = x.dims2()?;
        if d != self.dim() {
            return Err(Error::dim("selector input", x.shape(), &[b, self.dim()]));
        }
        let scale = self.std.data()[0];
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            for (v, m) in row.iter_mut().zip(self.mean.data()) {
                *v = (*v - m) / scale;
            }
        }
        Tensor::new(vec![b, d], out)
    }

    /// Logits for a standardized `[B, D]` input already on the tape.
    pub fn forward_on(&self, tape: &mut Tape<'_>, x: Var, layers: &[Var]) -> Result<Var> {
        let mut h = x;
        for l in 0..4 {
            h = tape.linear(h, layers[2 * l], layers[2 * l + 1])?;
            if l < 3 {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// `[B, T]` logits for a `[B, D]` batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let x = self.standardize(batch)?;
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let lv: Vec<Var> = self.layers.iter().map(|l| tape.constant(l)).collect();
        let out = self.forward_on(&mut tape, xv, &lv)?;
        Ok(tape.value(out).clone())
    }

    pub fn select(&self, embedding: &Tensor, block: usize) -> Result<SelectionResult> {
        if embedding.shape() != [self.dim()] {
            return Err(Error::dim("select", embedding.shape(), &[self.dim()]));
        }
        let logits = self.logits(&embedding.clone().reshape(&[1, self.dim()])?)?.into_data();
        Ok(self.result(logits, block))
    }

    /// One selection per row of a `[B, D]` batch.
    pub fn select_batch(&self, batch: &Tensor, block: usize) -> Result<Vec<SelectionResult>> {
        let logits = self.logits(batch)?;
        let t = self.tasks.len();
        Ok(logits.data().chunks(t).map(|row| self.result(row.to_vec(), block)).collect())
    }

    fn result(&self, logits: Vec<f64>, block: usize) -> SelectionResult {
        let index = argmax(&logits);
        SelectionResult {
            task: self.tasks[index],
            index,
            logits,
            block,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorReport {
    pub train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

fn stack(rows: &[&Tensor], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), dim], data)
}

/// Fresh selector trained from scratch on the whole buffer.
pub fn train_selector(buffer: &EmbeddingBuffer, cfg: &SelectorConfig, seed: u64) -> Result<(SelectorMlp, SelectorReport)> {
    if buffer.is_empty() {
        return Err(Error::State("cannot train a selector on an empty buffer".into()));
    }
    if cfg.epochs > 25 {
        return Err(Error::Validation(format!("selector epochs {} above 25", cfg.epochs)));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Validation("selector batch size and learning rate must be positive".into()));
    }
    let d = buffer.dim;
    let tasks: Vec<u32> = buffer.tasks.iter().map(|t| t.task).collect();
    let mut r = rng::stream(&[rng::tag::SELECTOR, seed, tasks.len() as u64]);
    let mut mlp = SelectorMlp::init(d, tasks, &mut r)?;
    let (xs, ys) = buffer.labelled();
    let all = stack(&xs, d)?;
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for row in all.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut var = 0.0;
    for row in all.data().chunks(d) {
        for (v, m) in row.iter().zip(&mean) {
            var += (v - m) * (v - m) / (n * d as f64);
        }
    }
    mlp.mean = Tensor::new(vec![d], mean)?;
    mlp.std = Tensor::scalar(var.sqrt().max(1e-9));
    let x_all = mlp.standardize(&all)?;

    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &mlp.layers.iter().map(|l| l.len()).collect::<Vec<_>>(),
    );
    let single = mlp.tasks.len() == 1;
    let steps = cfg.epochs * xs.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if single {
            break;
        }
        order.shuffle(&mut rng::stream(&[rng::tag::SHUFFLE, seed, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| &x_all.data()[i * d..(i + 1) * d]).collect();
            let xb = Tensor::new(vec![batch.len(), d], rows.concat())?;
            let yb: Vec<usize> = batch.iter().map(|&i| ys[i]).collect();
            let grads = {
                let mut tape = Tape::new();
                let xv = tape.constant(&xb);
                let lv: Vec<Var> = mlp.layers.iter().map(|l| tape.param(l)).collect();
                let logits = mlp.forward_on(&mut tape, xv, &lv)?;
                let loss = tape.softmax_cross_entropy(logits, &yb)?;
                total += tape.value(loss).data()[0] * batch.len() as f64;
                let g = tape.backward(loss)?;
                lv.iter().map(|&v| g.wrt(v)).collect::<Vec<_>>()
            };
            let mut params: Vec<&mut Tensor> = mlp.layers.iter_mut().collect();
            opt.step(&mut params, &grads, cosine_lr(cfg.lr, step, steps))?;
            step += 1;
        }
        epoch_losses.push(total / n);
    }
    let preds = mlp.select_batch(&all, 0)?;
    let hits = preds.iter().zip(&ys).filter(|(p, &y)| p.index == y).count();
    let report = SelectorReport {
        train_accuracy: hits as f64 / n,
        epoch_losses,
    };
    Ok((mlp, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub buffer_bytes: usize,
    pub selector_bytes: usize,
    pub per_task_bytes: usize,
    pub raw_image_ratio: f64,
}

/// Bytes of one full task slot: `M · D · float_bytes`.
pub fn per_task_bytes(cap: usize, dim: usize, float_bytes: usize) -> usize {
    cap * dim * float_bytes
}

/// Storage accounting; `image` is `(channels, H, W, bytes per channel)`.
pub fn storage_report(
    buffer: &EmbeddingBuffer,
    mlp: Option<&SelectorMlp>,
    image: (usize, usize, usize, usize),
    float_bytes: usize,
) -> StorageReport {
    let (c, h, w, depth) = image;
    StorageReport {
        buffer_bytes: buffer.len() * buffer.dim * float_bytes,
        selector_bytes: mlp.map_or(0, |m| m.param_count() * float_bytes),
        per_task_bytes: per_task_bytes(buffer.cap, buffer.dim, float_bytes),
        raw_image_ratio: (c * h * w * depth) as f64 / (buffer.dim * float_bytes) as f64,
    }
}
