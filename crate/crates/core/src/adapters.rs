//! Low-rank adapter family.
//!
//! * vanilla: `Y = (W + B_i A_i) X`
//! * frozen-A: as vanilla, `A_i` fixed at initialization
//! * SLoRA: one trainable `A` shared by every site, `Y = (W + B_i A) X`
//! * AugModule: `Y = W X + B_i C_i (A X + P)`, where `P` is the projected
//!   prompt heatmap and `C_i` is a per-site `r × r` mixer
//!
//! Token matrices are stored `[tokens, d]`, so the code computes the
//! transposed forms (`X Wᵀ` and so on).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SiteId, SiteKind};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    Vanilla,
    FrozenA,
    Slora,
    Augmodule,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 4] = [
        AdapterVariant::Vanilla,
        AdapterVariant::FrozenA,
        AdapterVariant::Slora,
        AdapterVariant::Augmodule,
    ];

    pub fn tag(self) -> u8 {
        match self {
            AdapterVariant::Vanilla => 0,
            AdapterVariant::FrozenA => 1,
            AdapterVariant::Slora => 2,
            AdapterVariant::Augmodule => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterVariant::Vanilla => "vanilla",
            AdapterVariant::FrozenA => "frozen_a",
            AdapterVariant::Slora => "slora",
            AdapterVariant::Augmodule => "augmodule",
        }
    }

    pub fn shares_a(self) -> bool {
        matches!(self, AdapterVariant::Slora | AdapterVariant::Augmodule)
    }

    pub fn a_trainable(self) -> bool {
        self != AdapterVariant::FrozenA
    }
}

impl std::str::FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s || (s == "frozen-a" && *v == AdapterVariant::FrozenA))
            .ok_or_else(|| Error::Validation(format!("unknown adapter variant {s:?}")))
    }
}

/// An injection site with its input and output widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteDims {
    pub site: SiteId,
    pub d_in: usize,
    pub d_out: usize,
}

/// The low-rank factors attached to one site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteAdapter {
    pub dims: SiteDims,
    /// Per-site `A_i` `[r, d_in]` (vanilla and frozen-A only).
    pub a: Option<Tensor>,
    /// `B_i` `[d_out, r]`.
    pub b: Tensor,
    /// `C_i` `[r, r]` (AugModule only).
    pub c: Option<Tensor>,
}

/// One task's adapter payload.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub task_id: u32,
    pub variant: AdapterVariant,
    pub rank: usize,
    /// Number of leading blocks left untouched; sites live in blocks `>= start_block` (0-based).
    pub start_block: usize,
    /// Shared `A` `[r, D]` (SLoRA and AugModule).
    pub shared_a: Option<Tensor>,
    pub sites: Vec<SiteAdapter>,
    /// Heatmap-to-rank projection `[r, 1]` and bias `[r]` (AugModule only).
    pub prompt_w: Option<Tensor>,
    pub prompt_b: Option<Tensor>,
}

fn shared_input_dim(sites: &[SiteDims]) -> Result<Option<usize>> {
    let Some(first) = sites.first() else {
        return Ok(None);
    };
    if let Some(s) = sites.iter().find(|s| s.d_in != first.d_in) {
        return Err(Error::InjectionSite(format!(
            "shared A needs one input width, got {} at {} and {} at {}",
            first.d_in, first.site, s.d_in, s.site
        )));
    }
    Ok(Some(first.d_in))
}

impl AdapterSet {
    /// Fresh payload: `A ~ N(0, 1/d_in)`, `B = 0`, `C = I`, prompt weights `~ N(0, 1)`, bias 0.
    pub fn new<R: Rng + ?Sized>(
        task_id: u32,
        variant: AdapterVariant,
        rank: usize,
        start_block: usize,
        sites: &[SiteDims],
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Validation("adapter rank must be >= 1".into()));
        }
        for s in sites {
            if s.site.block < start_block {
                return Err(Error::InjectionOrder {
                    block: s.site.block + 1,
                    start_block,
                });
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = sites.iter().find(|s| !seen.insert(s.site)) {
            return Err(Error::InjectionSite(format!("duplicate site {}", dup.site)));
        }
        let shared_a = if variant.shares_a() {
            let d = shared_input_dim(sites)?.unwrap_or(0);
            Some(Tensor::randn(&[rank, d], 1.0 / (d.max(1) as f64).sqrt(), rng))
        } else {
            None
        };
        let sites = sites
            .iter()
            .map(|&dims| SiteAdapter {
                dims,
                a: (!variant.shares_a())
                    .then(|| Tensor::randn(&[rank, dims.d_in], 1.0 / (dims.d_in as f64).sqrt(), rng)),
                b: Tensor::zeros(&[dims.d_out, rank]),
                c: (variant == AdapterVariant::Augmodule).then(|| Tensor::eye(rank)),
            })
            .collect();
        let aug = variant == AdapterVariant::Augmodule;
        Ok(Self {
            task_id,
            variant,
            rank,
            start_block,
            shared_a,
            sites,
            prompt_w: aug.then(|| Tensor::randn(&[rank, 1], 1.0, rng)),
            prompt_b: aug.then(|| Tensor::zeros(&[rank])),
        })
    }

    pub fn site_dims(&self) -> Vec<SiteDims> {
        self.sites.iter().map(|s| s.dims).collect()
    }

    /// Checks the payload against a model before injection.
    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        for s in &self.sites {
            let id = s.dims.site;
            if id.block >= cfg.num_blocks {
                return Err(Error::InjectionSite(format!("{id} beyond {} blocks", cfg.num_blocks)));
            }
            if id.block < self.start_block {
                return Err(Error::InjectionOrder {
                    block: id.block + 1,
                    start_block: self.start_block,
                });
            }
            let want_out = match id.kind {
                SiteKind::AttnQuery | SiteKind::AttnValue => cfg.embed_dim,
                SiteKind::MlpIn => cfg.mlp_hidden(),
            };
            if s.dims.d_in != cfg.embed_dim || s.dims.d_out != want_out {
                return Err(Error::InjectionSite(format!(
                    "{id} expects ({}, {want_out}), adapter has ({}, {})",
                    cfg.embed_dim, s.dims.d_in, s.dims.d_out
                )));
            }
            if s.b.shape() != [s.dims.d_out, self.rank] {
                return Err(Error::dim("adapter B", s.b.shape(), &[s.dims.d_out, self.rank]));
            }
        }
        if let Some(a) = &self.shared_a {
            if !self.sites.is_empty() && a.shape() != [self.rank, cfg.embed_dim] {
                return Err(Error::InjectionSite(format!(
                    "shared A {:?} does not match embed dim {}",
                    a.shape(),
                    cfg.embed_dim
                )));
            }
        }
        Ok(())
    }

    /// Every stored tensor in serialization order, with its trainability.
    pub fn tensors(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        if let Some(a) = &self.shared_a {
            out.push(("shared_a".to_string(), a, true));
        }
        for s in &self.sites {
            let id = s.dims.site;
            if let Some(a) = &s.a {
                out.push((format!("{id}.a"), a, self.variant.a_trainable()));
            }
            out.push((format!("{id}.b"), &s.b, true));
            if let Some(c) = &s.c {
                out.push((format!("{id}.c"), c, true));
            }
        }
        if let (Some(w), Some(b)) = (&self.prompt_w, &self.prompt_b) {
            out.push(("prompt.weight".to_string(), w, true));
            out.push(("prompt.bias".to_string(), b, true));
        }
        out
    }

    /// Mutable trainable tensors, in the order of [`AdapterVars::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let a_trainable = self.variant.a_trainable();
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(a) = self.shared_a.as_mut() {
            out.push(a);
        }
        for s in self.sites.iter_mut() {
            if let Some(a) = s.a.as_mut() {
                if a_trainable {
                    out.push(a);
                }
            }
            out.push(&mut s.b);
            if let Some(c) = s.c.as_mut() {
                out.push(c);
            }
        }
        if let Some(w) = self.prompt_w.as_mut() {
            out.push(w);
        }
        if let Some(b) = self.prompt_b.as_mut() {
            out.push(b);
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors().iter().filter(|t| t.2).map(|t| t.1.len()).sum()
    }

    pub fn stored_count(&self) -> usize {
        self.tensors().iter().map(|t| t.1.len()).sum()
    }

    /// Puts the payload on a tape.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> AdapterVars {
        let mut vars = AdapterVars {
            shared_a: None,
            sites: Vec::with_capacity(self.sites.len()),
            prompt_w: None,
            prompt_b: None,
            trainable: Vec::new(),
        };
        let reg = |tape: &mut Tape<'a>, t: &'a Tensor, train: bool, list: &mut Vec<Var>| {
            let v = tape.input(t, trainable && train);
            if train {
                list.push(v);
            }
            v
        };
        let mut list = Vec::new();
        vars.shared_a = self.shared_a.as_ref().map(|a| reg(tape, a, true, &mut list));
        for s in &self.sites {
            let a = s.a.as_ref().map(|a| reg(tape, a, self.variant.a_trainable(), &mut list));
            let b = reg(tape, &s.b, true, &mut list);
            let c = s.c.as_ref().map(|c| reg(tape, c, true, &mut list));
            vars.sites.push(SiteVars {
                site: s.dims.site,
                a,
                b,
                c,
            });
        }
        vars.prompt_w = self.prompt_w.as_ref().map(|w| reg(tape, w, true, &mut list));
        vars.prompt_b = self.prompt_b.as_ref().map(|b| reg(tape, b, true, &mut list));
        vars.trainable = list;
        vars
    }
}

/// Tape handles of an [`AdapterSet`].
pub struct AdapterVars {
    pub shared_a: Option<Var>,
    pub sites: Vec<SiteVars>,
    pub prompt_w: Option<Var>,
    pub prompt_b: Option<Var>,
    /// Trainable handles in [`AdapterSet::trainable_mut`] order.
    pub trainable: Vec<Var>,
}

pub struct SiteVars {
    pub site: SiteId,
    pub a: Option<Var>,
    pub b: Var,
    pub c: Option<Var>,
}

impl AdapterVars {
    pub fn site(&self, id: SiteId) -> Option<&SiteVars> {
        self.sites.iter().find(|s| s.site == id)
    }

    /// `P = heat · w_pᵀ + b_p`, `[tokens, r]`; `None` unless the variant projects prompts.
    pub fn prompt_projection(&self, tape: &mut Tape<'_>, heat: Option<Var>) -> Result<Option<Var>> {
        match (self.prompt_w, self.prompt_b, heat) {
            (Some(w), Some(b), Some(h)) => Ok(Some(tape.linear(h, w, b)?)),
            _ => Ok(None),
        }
    }
}

/// Frozen linear layer `x Wᵀ + b`, plus the site's low-rank update when present.
pub fn site_linear(
    tape: &mut Tape<'_>,
    x: Var,
    w: Var,
    bias: Var,
    adapter: Option<(&AdapterVars, &SiteVars)>,
    prompt: Option<Var>,
) -> Result<Var> {
    let base = tape.linear(x, w, bias)?;
    let Some((set, sv)) = adapter else {
        return Ok(base);
    };
    let a = sv
        .a
        .or(set.shared_a)
        .ok_or_else(|| Error::State(format!("site {} has no A matrix", sv.site)))?;
    let mut z = tape.matmul_t(x, a)?;
    if let Some(c) = sv.c {
        if let Some(p) = prompt {
            z = tape.add(z, p)?;
        }
        z = tape.matmul_t(z, c)?;
    }
    let delta = tape.matmul_t(z, sv.b)?;
    tape.add(base, delta)
}

fn check_lowrank(w: &Tensor, x: &Tensor, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (d_out, d_in) = w.dims2()?;
    let (_, xd) = x.dims2()?;
    if xd != d_in {
        return Err(Error::dim("adapter input", x.shape(), w.shape()));
    }
    let (r, ad) = a.dims2()?;
    if ad != d_in {
        return Err(Error::dim("adapter A", a.shape(), w.shape()));
    }
    if b.shape() != [d_out, r] {
        return Err(Error::dim("adapter rank", b.shape(), a.shape()));
    }
    Ok((d_out, d_in, r))
}

/// `Y = (W + B A) X` per token.
pub fn forward_vanilla(w: &Tensor, x: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_lowrank(w, x, a, b)?;
    let merged = w.add(&b.matmul(a)?)?;
    x.matmul(&merged.transpose()?)
}

/// `Y = (W + B_i A) X` with `A` shared across sites.
pub fn forward_slora(w: &Tensor, x: &Tensor, shared_a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, d_in) = w.dims2()?;
    let (_, ad) = shared_a.dims2()?;
    if ad != d_in {
        return Err(Error::InjectionSite(format!(
            "site input width {d_in} differs from shared A width {ad}"
        )));
    }
    forward_vanilla(w, x, shared_a, b)
}

/// `Y = W X + B_i C_i (A X + P)` per token, `P` shaped `[tokens, r]`.
pub fn forward_aug(w: &Tensor, x: &Tensor, shared_a: &Tensor, b: &Tensor, c: &Tensor, p: &Tensor) -> Result<Tensor> {
    let (_, d_in) = w.dims2()?;
    if shared_a.dims2()?.1 != d_in {
        return Err(Error::InjectionSite(format!(
            "site input width {d_in} differs from shared A width {}",
            shared_a.dims2()?.1
        )));
    }
    let (_, _, r) = check_lowrank(w, x, shared_a, b)?;
    if c.shape() != [r, r] {
        return Err(Error::dim("adapter C", c.shape(), &[r, r]));
    }
    if p.shape() != [x.shape()[0], r] {
        return Err(Error::dim("prompt augmentation", p.shape(), &[x.shape()[0], r]));
    }
    let base = x.matmul(&w.transpose()?)?;
    let z = x.matmul(&shared_a.transpose()?)?.add(p)?;
    let delta = z.matmul(&c.transpose()?)?.matmul(&b.transpose()?)?;
    base.add(&delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable_count: usize,
    pub stored_count: usize,
    pub stored_bytes: usize,
}

/// Closed-form parameter accounting; bytes assume 64-bit storage.
pub fn count_params(variant: AdapterVariant, sites: &[SiteDims], r: usize) -> Result<ParamCount> {
    let sum_out: usize = sites.iter().map(|s| r * s.d_out).sum();
    let sum_in: usize = sites.iter().map(|s| r * s.d_in).sum();
    let (trainable, stored) = match variant {
        AdapterVariant::Vanilla => (sum_in + sum_out, sum_in + sum_out),
        AdapterVariant::FrozenA => (sum_out, sum_in + sum_out),
        AdapterVariant::Slora | AdapterVariant::Augmodule => {
            let d = shared_input_dim(sites)?.unwrap_or(0);
            let shared = if sites.is_empty() { 0 } else { r * d };
            let n = if variant == AdapterVariant::Augmodule {
                let prompt = 2 * r;
                shared + sum_out + sites.len() * r * r + prompt
            } else {
                shared + sum_out
            };
            (n, n)
        }
    };
    Ok(ParamCount {
        trainable_count: trainable,
        stored_count: stored,
        stored_bytes: stored * 8,
    })
}
