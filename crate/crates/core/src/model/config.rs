use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the pixel and semantic streams share computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-stream norms, projections and MLPs with joint attention in every block.
    DualStream,
    /// Private blocks, then element-wise sum of the streams.
    SingleDirectAdd,
    /// Private blocks, then channel concatenation and a projection.
    SingleChannelConcat,
    /// Private blocks, then sequence concatenation.
    SingleTokenConcat,
    /// Pixel tokens only; the semantic head is absent.
    PixelOnly,
}

impl Variant {
    pub fn has_semantic_stream(self) -> bool {
        self != Variant::PixelOnly
    }

    /// Whether pixel and semantic tokens stay distinct inside attention, so
    /// that cross-stream attention masks apply.
    pub fn supports_masks(self) -> bool {
        matches!(self, Variant::DualStream | Variant::SingleTokenConcat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Stream-private blocks before fusion (single-stream variants only).
    pub feature_specific_blocks: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub n_classes: usize,
    pub semantic_dim: usize,
    /// 1-based index of the block whose pixel hidden state feeds REPA.
    pub repa_block_index: usize,
    /// Width of the optional linear patch-embedding bottleneck; 0 disables it.
    pub bottleneck: usize,
    pub time_freq_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DualStream,
            depth: 4,
            hidden: 64,
            heads: 4,
            mlp_ratio: 4,
            feature_specific_blocks: 0,
            height: 16,
            width: 16,
            channels: 1,
            patch_size: 4,
            n_classes: 4,
            semantic_dim: 8,
            repa_block_index: 4,
            bottleneck: 0,
            time_freq_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.patch_size == 0 || !self.height.is_multiple_of(self.patch_size) || !self.width.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            ));
        }
        if self.channels == 0 || self.n_classes == 0 || self.semantic_dim == 0 || self.mlp_ratio == 0 {
            return bad("channels, n_classes, semantic_dim and mlp_ratio must be positive".into());
        }
        if self.time_freq_dim < 2 || !self.time_freq_dim.is_multiple_of(2) {
            return bad(format!("time_freq_dim {} must be even and >= 2", self.time_freq_dim));
        }
        if !self.hidden.is_multiple_of(4) {
            return bad(format!("hidden {} must be divisible by 4 for 2-D position codes", self.hidden));
        }
        let single = matches!(
            self.variant,
            Variant::SingleDirectAdd | Variant::SingleChannelConcat | Variant::SingleTokenConcat
        );
        if single && self.feature_specific_blocks > self.depth {
            return bad(format!(
                "feature_specific_blocks {} exceeds depth {}",
                self.feature_specific_blocks, self.depth
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn n_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn pixel_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Private-block count actually used by the variant.
    pub fn private_blocks(&self) -> usize {
        match self.variant {
            Variant::DualStream | Variant::PixelOnly => 0,
            _ => self.feature_specific_blocks,
        }
    }
}
