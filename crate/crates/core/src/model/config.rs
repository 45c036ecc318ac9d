use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub decoder_hidden: usize,
    /// Mask cells per patch side produced by the decoder before
    /// nearest-neighbour upsampling to pixels.
    pub mask_cells: usize,
    /// Heatmap Gaussian width in patch units.
    pub heatmap_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 8,
            num_heads: 4,
            decoder_hidden: 64,
            mask_cells: 4,
            heatmap_sigma: 1.0,
        }
    }
}

impl ModelConfig {
    /// Quarter-cost variant used by the test suites: 32px images, `D = 32`, 4 blocks.
    pub fn compact() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 4,
            decoder_hidden: 32,
            mask_cells: 2,
            heatmap_sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim < 4 || self.num_blocks == 0 || self.decoder_hidden == 0 {
            return bad("embed dim >= 4, at least one block and a nonzero decoder are required".into());
        }
        if self.mask_cells == 0 || self.patch_size % self.mask_cells != 0 {
            return bad(format!(
                "mask cells {} must divide patch size {}",
                self.mask_cells, self.patch_size
            ));
        }
        if !(self.heatmap_sigma > 0.0) {
            return bad("heatmap sigma must be > 0".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn upsample(&self) -> usize {
        self.patch_size / self.mask_cells
    }

    /// Middle block, the default extraction point for selector embeddings.
    pub fn default_start_block(&self) -> usize {
        self.num_blocks / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::compact().validate().unwrap();
        assert_eq!(ModelConfig::default().default_start_block(), 4);
    }

    #[test]
    fn rejects_bad_divisibility() {
        let mut c = ModelConfig::default();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.mask_cells = 3;
        assert!(c.validate().is_err());
    }
}
