//! Tiny promptable ViT segmenter.
//!
//! Patch embedding, pre-LN transformer blocks and a per-token MLP decoder
//! with an IoU head. Every forward pass runs on a [`Tape`], so training and
//! inference share one code path and the zero-update identities hold bitwise.

mod config;
mod pretrain;
mod prompt;

use std::fmt;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::ModelConfig;
pub use pretrain::{evaluate, pretrain_base, score_logits, PretrainConfig, PretrainReport};
pub use prompt::{make_heatmap, sample_prompts, PromptHeatmap, PromptSet};

use crate::adapters::{site_linear, AdapterSet, AdapterVars};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    AttnQuery,
    AttnValue,
    MlpIn,
}

impl SiteKind {
    pub const ALL: [SiteKind; 3] = [SiteKind::AttnQuery, SiteKind::AttnValue, SiteKind::MlpIn];

    pub fn tag(self) -> u8 {
        match self {
            SiteKind::AttnQuery => 0,
            SiteKind::AttnValue => 1,
            SiteKind::MlpIn => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == t)
    }

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::AttnQuery => "attn_query",
            SiteKind::AttnValue => "attn_value",
            SiteKind::MlpIn => "mlp_in",
        }
    }
}

/// A linear layer that can host an adapter; `block` is 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub block: usize,
    pub kind: SiteKind,
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BLOCK_NAMES: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

impl BlockWeights {
    fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], s, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], s, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], s, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], 0.5 * s, rng),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::randn(&[hidden, d], s, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[d, hidden], 0.5 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo,
            &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }
}

/// All base weights. Linear weights are stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
    /// Decoder input is `[features | heat]`, width `D + 1`.
    pub dec_w1: Tensor,
    pub dec_b1: Tensor,
    pub dec_w2: Tensor,
    pub dec_b2: Tensor,
    pub iou_w: Tensor,
    pub iou_b: Tensor,
}

const HEAD_NAMES: [&str; 3] = ["patch_w", "patch_b", "pos"];
const TAIL_NAMES: [&str; 8] = ["ln_f_g", "ln_f_b", "dec_w1", "dec_b1", "dec_w2", "dec_b2", "iou_w", "iou_b"];

impl Weights {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.decoder_hidden;
        let cells = cfg.mask_cells * cfg.mask_cells;
        Self {
            patch_w: Tensor::randn(&[d, cfg.patch_dim()], 1.0 / (cfg.patch_dim() as f64).sqrt(), rng),
            patch_b: Tensor::zeros(&[d]),
            pos: Tensor::randn(&[cfg.tokens(), d], 0.1, rng),
            blocks: (0..cfg.num_blocks)
                .map(|_| BlockWeights::init(d, cfg.mlp_hidden(), rng))
                .collect(),
            ln_f_g: Tensor::ones(&[d]),
            ln_f_b: Tensor::zeros(&[d]),
            dec_w1: Tensor::randn(&[h, d + 1], 1.0 / ((d + 1) as f64).sqrt(), rng),
            dec_b1: Tensor::zeros(&[h]),
            dec_w2: Tensor::randn(&[cells, h], 1.0 / (h as f64).sqrt(), rng),
            dec_b2: Tensor::zeros(&[cells]),
            iou_w: Tensor::randn(&[1, h], 1.0 / (h as f64).sqrt(), rng),
            iou_b: Tensor::zeros(&[1]),
        }
    }

    /// Every tensor with a stable name, in serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = HEAD_NAMES
            .iter()
            .zip([&self.patch_w, &self.patch_b, &self.pos])
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in BLOCK_NAMES.iter().zip(b.tensors()) {
                out.push((format!("block{i}.{n}"), t));
            }
        }
        let tail = [
            &self.ln_f_g, &self.ln_f_b, &self.dec_w1, &self.dec_b1, &self.dec_w2, &self.dec_b2, &self.iou_w,
            &self.iou_b,
        ];
        out.extend(TAIL_NAMES.iter().zip(tail).map(|(n, t)| (n.to_string(), t)));
        out
    }

    /// Mutable view in [`Weights::named`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos];
        for b in self.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut self.ln_f_g, &mut self.ln_f_b, &mut self.dec_w1, &mut self.dec_b1, &mut self.dec_w2,
            &mut self.dec_b2, &mut self.iou_w, &mut self.iou_b,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

pub struct BlockVars {
    v: [Var; 16],
}

impl BlockVars {
    fn get(&self, name: &str) -> Var {
        let i = BLOCK_NAMES.iter().position(|n| *n == name).expect("known block tensor");
        self.v[i]
    }
}

/// Tape handles of every base weight, in [`Weights::named`] order.
pub struct ModelVars {
    pub all: Vec<Var>,
    blocks: Vec<BlockVars>,
    head: [Var; 3],
    tail: [Var; 8],
}

impl ModelVars {
    fn tail(&self, name: &str) -> Var {
        self.tail[TAIL_NAMES.iter().position(|n| *n == name).expect("known tensor")]
    }
}

/// Output of a full encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    /// `activations[i]` is the token state after `i` blocks (`[tokens, D]`), length `n + 1`.
    pub activations: Vec<Tensor>,
    /// Final normalized token features.
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// `[H, W]` mask logits.
    pub logits: Tensor,
    pub iou: f64,
}

#[derive(Debug)]
pub struct SegModel {
    config: ModelConfig,
    weights: Weights,
    frozen: bool,
    /// Encoder blocks executed so far, for call-count checks.
    block_calls: AtomicUsize,
}

impl Clone for SegModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            weights: self.weights.clone(),
            frozen: self.frozen,
            block_calls: AtomicUsize::new(0),
        }
    }
}

impl SegModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config, rng);
        Ok(Self {
            config,
            weights,
            frozen: false,
            block_calls: AtomicUsize::new(0),
        })
    }

    /// Rebuilds a model from stored weights after checking every shape.
    pub fn from_weights(config: ModelConfig, weights: Weights, frozen: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = Weights::init(&config, &mut rng);
        let want = reference.named();
        let got = weights.named();
        if want.len() != got.len() {
            return Err(Error::Validation(format!(
                "expected {} weight tensors, got {}",
                want.len(),
                got.len()
            )));
        }
        for ((name, w), (_, g)) in want.iter().zip(&got) {
            if w.shape() != g.shape() {
                return Err(Error::Validation(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    w.shape(),
                    g.shape()
                )));
            }
        }
        Ok(Self {
            config,
            weights,
            frozen,
            block_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn block_calls(&self) -> usize {
        self.block_calls.load(Ordering::Relaxed)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable weights; refused once the model is frozen.
    pub fn weights_mut(&mut self) -> Result<&mut Weights> {
        if self.frozen {
            return Err(Error::State("base weights are frozen".into()));
        }
        Ok(&mut self.weights)
    }

    /// SHA-256 over shapes and raw bits of every weight.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.weights.named() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sites of every block from `start_block` on, three per block.
    pub fn default_sites(&self, start_block: usize) -> Vec<crate::adapters::SiteDims> {
        let d = self.config.embed_dim;
        (start_block..self.config.num_blocks)
            .flat_map(|block| {
                SiteKind::ALL.into_iter().map(move |kind| crate::adapters::SiteDims {
                    site: SiteId { block, kind },
                    d_in: d,
                    d_out: if kind == SiteKind::MlpIn { 4 * d } else { d },
                })
            })
            .collect()
    }

    /// `[tokens, 3 p²]`, each row ordered channel, row, column within its patch.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        let s = self.config.image_size;
        if image.height != s || image.width != s {
            return Err(Error::dim("patchify", &[3, image.height, image.width], &[3, s, s]));
        }
        let p = self.config.patch_size;
        let g = self.config.grid();
        let mut out = Vec::with_capacity(self.config.tokens() * self.config.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            out.push(image.at(c, gy * p + dy, gx * p + dx));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![g * g, 3 * p * p], out)
    }

    pub fn heatmap(&self, prompts: &PromptSet) -> Result<PromptHeatmap> {
        make_heatmap(prompts, self.config.image_size, self.config.grid(), self.config.heatmap_sigma)
    }

    /// Heatmap as a `[tokens, 1]` column.
    pub fn heat_tensor(&self, heat: &PromptHeatmap) -> Result<Tensor> {
        if heat.grid != self.config.grid() {
            return Err(Error::dim("heatmap", &[heat.grid], &[self.config.grid()]));
        }
        Tensor::new(vec![heat.values.len(), 1], heat.values.clone())
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> ModelVars {
        let w = &self.weights;
        let mut all = Vec::new();
        let mut reg = |tape: &mut Tape<'a>, t: &'a Tensor| {
            let v = tape.input(t, trainable);
            all.push(v);
            v
        };
        let head = [reg(tape, &w.patch_w), reg(tape, &w.patch_b), reg(tape, &w.pos)];
        let blocks = w
            .blocks
            .iter()
            .map(|b| BlockVars {
                v: b.tensors().map(|t| reg(tape, t)),
            })
            .collect();
        let tail = [
            &w.ln_f_g, &w.ln_f_b, &w.dec_w1, &w.dec_b1, &w.dec_w2, &w.dec_b2, &w.iou_w, &w.iou_b,
        ]
        .map(|t| reg(tape, t));
        ModelVars {
            all,
            blocks,
            head,
            tail,
        }
    }

    /// Token embeddings for `[tokens, 3 p²]` patches.
    pub fn embed_on(&self, tape: &mut Tape<'_>, vars: &ModelVars, patches: Var) -> Result<Var> {
        let x = tape.linear(patches, vars.head[0], vars.head[1])?;
        tape.add(x, vars.head[2])
    }

    fn block_on(
        &self,
        tape: &mut Tape<'_>,
        bv: &BlockVars,
        block: usize,
        x: Var,
        adapter: Option<&AdapterVars>,
        prompt: Option<Var>,
    ) -> Result<Var> {
        self.block_calls.fetch_add(1, Ordering::Relaxed);
        let site = |kind| adapter.and_then(|a| a.site(SiteId { block, kind }).map(|s| (a, s)));
        let h = tape.layer_norm(x, bv.get("ln1_g"), bv.get("ln1_b"), LN_EPS)?;
        let q = site_linear(tape, h, bv.get("wq"), bv.get("bq"), site(SiteKind::AttnQuery), prompt)?;
        let k = tape.linear(h, bv.get("wk"), bv.get("bk"))?;
        let v = site_linear(tape, h, bv.get("wv"), bv.get("bv"), site(SiteKind::AttnValue), prompt)?;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for i in 0..self.config.num_heads {
            let qh = tape.slice_cols(q, i * hd, hd)?;
            let kh = tape.slice_cols(k, i * hd, hd)?;
            let vh = tape.slice_cols(v, i * hd, hd)?;
            let s = tape.matmul_t(qh, kh)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let attn = tape.linear(cat, bv.get("wo"), bv.get("bo"))?;
        let x = tape.add(x, attn)?;
        let h = tape.layer_norm(x, bv.get("ln2_g"), bv.get("ln2_b"), LN_EPS)?;
        let m = site_linear(tape, h, bv.get("w1"), bv.get("b1"), site(SiteKind::MlpIn), prompt)?;
        let m = tape.gelu(m);
        let m = tape.linear(m, bv.get("w2"), bv.get("b2"))?;
        tape.add(x, m)
    }

    /// Runs `blocks` in order, pushing each block's output onto `trace` when given.
    #[allow(clippy::too_many_arguments)]
    pub fn blocks_on(
        &self,
        tape: &mut Tape<'_>,
        vars: &ModelVars,
        mut x: Var,
        blocks: Range<usize>,
        adapter: Option<&AdapterVars>,
        prompt: Option<Var>,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if blocks.end > self.config.num_blocks {
            return Err(Error::Index(format!(
                "block range {blocks:?} beyond {} blocks",
                self.config.num_blocks
            )));
        }
        for b in blocks {
            x = self.block_on(tape, &vars.blocks[b], b, x, adapter, prompt)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(x);
            }
        }
        Ok(x)
    }

    pub fn final_norm_on(&self, tape: &mut Tape<'_>, vars: &ModelVars, x: Var) -> Result<Var> {
        tape.layer_norm(x, vars.tail("ln_f_g"), vars.tail("ln_f_b"), LN_EPS)
    }

    /// `(logits [H, W], predicted IoU [1, 1])` from features and a `[tokens, 1]` heat column.
    pub fn decode_on(&self, tape: &mut Tape<'_>, vars: &ModelVars, features: Var, heat: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        if tape.shape(features) != [c.tokens(), c.embed_dim] {
            return Err(Error::dim("decode features", tape.shape(features), &[c.tokens(), c.embed_dim]));
        }
        if tape.shape(heat) != [c.tokens(), 1] {
            return Err(Error::dim("decode heat", tape.shape(heat), &[c.tokens(), 1]));
        }
        let x = tape.concat_cols(&[features, heat])?;
        let h = tape.linear(x, vars.tail("dec_w1"), vars.tail("dec_b1"))?;
        let h = tape.gelu(h);
        let cells = tape.linear(h, vars.tail("dec_w2"), vars.tail("dec_b2"))?;
        let logits = tape.cells_to_image(cells, c.grid(), c.mask_cells, c.upsample())?;
        let pooled = tape.mean_rows(h)?;
        let z = tape.linear(pooled, vars.tail("iou_w"), vars.tail("iou_b"))?;
        Ok((logits, tape.sigmoid(z)))
    }

    fn check_adapters(&self, adapters: Option<&AdapterSet>) -> Result<()> {
        if let Some(a) = adapters {
            a.validate_for(&self.config)?;
        }
        Ok(())
    }

    /// Full encoder pass. With no adapters this is the frozen base forward.
    pub fn encode(
        &self,
        image: &Image,
        adapters: Option<&AdapterSet>,
        heat: Option<&PromptHeatmap>,
    ) -> Result<Encoding> {
        self.check_adapters(adapters)?;
        let patches = self.patchify(image)?;
        let heat_t = heat.map(|h| self.heat_tensor(h)).transpose()?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let av = adapters.map(|a| a.register(&mut tape, false));
        let hv = heat_t.as_ref().map(|h| tape.constant(h));
        let prompt = match &av {
            Some(a) => a.prompt_projection(&mut tape, hv)?,
            None => None,
        };
        let p = tape.constant(&patches);
        let x0 = self.embed_on(&mut tape, &vars, p)?;
        let mut trace = vec![x0];
        let x = self.blocks_on(
            &mut tape,
            &vars,
            x0,
            0..self.config.num_blocks,
            av.as_ref(),
            prompt,
            Some(&mut trace),
        )?;
        let f = self.final_norm_on(&mut tape, &vars, x)?;
        Ok(Encoding {
            activations: trace.iter().map(|&v| tape.value(v).clone()).collect(),
            features: tape.value(f).clone(),
        })
    }

    /// Token state after the first `k` blocks, which no adapter can touch.
    pub fn prefix(&self, image: &Image, k: usize) -> Result<Tensor> {
        if k > self.config.num_blocks {
            return Err(Error::Index(format!("prefix {k} beyond {} blocks", self.config.num_blocks)));
        }
        let patches = self.patchify(image)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let p = tape.constant(&patches);
        let x0 = self.embed_on(&mut tape, &vars, p)?;
        let x = self.blocks_on(&mut tape, &vars, x0, 0..k, None, None, None)?;
        Ok(tape.value(x).clone())
    }

    /// Finishes a forward pass from a cached block-`k` activation.
    pub fn resume(
        &self,
        activation: &Tensor,
        k: usize,
        adapters: Option<&AdapterSet>,
        heat: Option<&PromptHeatmap>,
    ) -> Result<Tensor> {
        self.check_adapters(adapters)?;
        if let Some(a) = adapters {
            if let Some(s) = a.sites.iter().find(|s| s.dims.site.block < k) {
                return Err(Error::InjectionOrder {
                    block: s.dims.site.block + 1,
                    start_block: k,
                });
            }
        }
        let want = [self.config.tokens(), self.config.embed_dim];
        if activation.shape() != want {
            return Err(Error::dim("resume", activation.shape(), &want));
        }
        let heat_t = heat.map(|h| self.heat_tensor(h)).transpose()?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let av = adapters.map(|a| a.register(&mut tape, false));
        let hv = heat_t.as_ref().map(|h| tape.constant(h));
        let prompt = match &av {
            Some(a) => a.prompt_projection(&mut tape, hv)?,
            None => None,
        };
        let x = tape.constant(activation);
        let x = self.blocks_on(
            &mut tape,
            &vars,
            x,
            k..self.config.num_blocks,
            av.as_ref(),
            prompt,
            None,
        )?;
        let f = self.final_norm_on(&mut tape, &vars, x)?;
        Ok(tape.value(f).clone())
    }

    pub fn decode(&self, features: &Tensor, heat: &PromptHeatmap) -> Result<Decoded> {
        let heat_t = self.heat_tensor(heat)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let f = tape.constant(features);
        let h = tape.constant(&heat_t);
        let (logits, iou) = self.decode_on(&mut tape, &vars, f, h)?;
        Ok(Decoded {
            logits: tape.value(logits).clone(),
            iou: tape.value(iou).data()[0],
        })
    }

    /// Encode and decode in one call.
    pub fn predict(&self, image: &Image, prompts: &PromptSet, adapters: Option<&AdapterSet>) -> Result<Decoded> {
        let heat = self.heatmap(prompts)?;
        let enc = self.encode(image, adapters, Some(&heat))?;
        self.decode(&enc.features, &heat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterVariant, SiteDims};
    use crate::synth::{generate_sample, DomainKind, DomainSpec, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> SegModel {
        SegModel::new(ModelConfig::compact(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    fn sample(i: usize) -> crate::synth::Sample {
        let spec = DomainSpec::default_for(DomainKind::BrightBlob);
        generate_sample(&spec, 32, 3, 11, Split::Test, i).unwrap()
    }

    fn random_b(set: &mut AdapterSet, rng: &mut ChaCha8Rng) {
        for s in &mut set.sites {
            s.b = Tensor::randn(s.b.shape(), 0.3, rng);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let m = model();
        let s = sample(0);
        let a = m.encode(&s.image, None, None).unwrap();
        let b = m.encode(&s.image, None, None).unwrap();
        assert_eq!(a.activations.len(), 5);
        for (x, y) in a.activations.iter().zip(&b.activations) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn zero_b_adapters_are_bitwise_noop() {
        let m = model();
        let s = sample(1);
        let heat = m.heatmap(&s.prompts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in AdapterVariant::ALL {
            let set = AdapterSet::new(0, v, 3, 2, &m.default_sites(2), &mut rng).unwrap();
            let base = m.encode(&s.image, None, Some(&heat)).unwrap();
            let adapted = m.encode(&s.image, Some(&set), Some(&heat)).unwrap();
            assert!(base.features.bit_eq(&adapted.features), "{v:?}");
        }
    }

    #[test]
    fn prefix_is_untouched_by_later_adapters() {
        let m = model();
        let s = sample(2);
        let heat = m.heatmap(&s.prompts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sites: Vec<SiteDims> = m.default_sites(2).into_iter().filter(|d| d.site.block == 2).collect();
        let mut set = AdapterSet::new(0, AdapterVariant::Augmodule, 3, 2, &sites, &mut rng).unwrap();
        random_b(&mut set, &mut rng);
        let base = m.encode(&s.image, None, None).unwrap();
        let adapted = m.encode(&s.image, Some(&set), Some(&heat)).unwrap();
        for i in 0..=2 {
            assert!(base.activations[i].bit_eq(&adapted.activations[i]));
        }
        assert!(!base.activations[3].bit_eq(&adapted.activations[3]));
    }

    #[test]
    fn resume_matches_full_forward() {
        let m = model();
        let s = sample(3);
        let heat = m.heatmap(&s.prompts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = AdapterSet::new(0, AdapterVariant::Augmodule, 3, 2, &m.default_sites(2), &mut rng).unwrap();
        random_b(&mut set, &mut rng);
        let full = m.encode(&s.image, Some(&set), Some(&heat)).unwrap();
        let pre = m.prefix(&s.image, 2).unwrap();
        assert!(pre.bit_eq(&full.activations[2]));
        let resumed = m.resume(&pre, 2, Some(&set), Some(&heat)).unwrap();
        assert!(resumed.bit_eq(&full.features));
    }

    #[test]
    fn early_site_is_an_injection_order_error() {
        let m = model();
        let s = sample(4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut set = AdapterSet::new(0, AdapterVariant::Vanilla, 2, 2, &m.default_sites(2), &mut rng).unwrap();
        set.sites[0].dims.site.block = 1;
        assert!(matches!(
            m.encode(&s.image, Some(&set), None),
            Err(Error::InjectionOrder { .. })
        ));
    }

    #[test]
    fn zeroed_decoder_is_affine() {
        let mut m = model();
        {
            let w = m.weights_mut().unwrap();
            w.dec_w2 = Tensor::zeros(w.dec_w2.shape());
            w.dec_b2 = Tensor::full(w.dec_b2.shape(), 0.3);
            w.iou_w = Tensor::zeros(w.iou_w.shape());
            w.iou_b = Tensor::full(&[1], -0.4);
        }
        let s = sample(5);
        let out = m.predict(&s.image, &s.prompts, None).unwrap();
        assert_eq!(out.logits.shape(), &[32, 32]);
        assert!(out.logits.data().iter().all(|&v| v == 0.3));
        assert_eq!(out.iou, 1.0 / (1.0 + 0.4f64.exp()));
    }

    #[test]
    fn frozen_model_refuses_mutation() {
        let mut m = model();
        let fp = m.fingerprint();
        m.freeze();
        assert!(m.weights_mut().is_err());
        assert_eq!(fp, m.fingerprint());
    }

    #[test]
    fn decode_rejects_wrong_features() {
        let m = model();
        let s = sample(6);
        let heat = m.heatmap(&s.prompts).unwrap();
        assert!(matches!(
            m.decode(&Tensor::zeros(&[3, 32]), &heat),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn from_weights_checks_shapes() {
        let m = model();
        let mut w = m.weights().clone();
        assert!(SegModel::from_weights(ModelConfig::compact(), w.clone(), true).is_ok());
        w.pos = Tensor::zeros(&[2, 2]);
        assert!(SegModel::from_weights(ModelConfig::compact(), w, true).is_err());
    }
}
