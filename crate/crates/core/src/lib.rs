//! Continual promptable segmentation on a frozen tiny ViT.
//!
//! Each task gets its own low-rank adapter payload (shared `A`, per-site
//! `B_i` and `C_i`, and a projection of the point-prompt heatmap). A small
//! classifier over pooled encoder embeddings picks which payload to inject
//! at test time, so earlier tasks are never overwritten.

pub mod ablate;
pub mod adapters;
pub mod config;
pub mod error;
pub mod harness;
pub mod image;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod record;
pub mod report;
pub mod rng;
pub mod selector;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
