use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which context tiles the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    SpatialOnly,
    TemporalOnly,
    Both,
}

impl ContextMode {
    pub fn spatial(self) -> usize {
        match self {
            ContextMode::TemporalOnly => 0,
            _ => 8,
        }
    }

    pub fn temporal(self) -> usize {
        match self {
            ContextMode::SpatialOnly => 0,
            _ => 4,
        }
    }

    pub fn tiles(self) -> usize {
        self.spatial() + self.temporal()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Uspatem,
    UnetBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionUpsample {
    Nearest,
    Bilinear,
}

impl From<AttentionUpsample> for spatem_tensor::UpsampleMode {
    fn from(mode: AttentionUpsample) -> Self {
        match mode {
            AttentionUpsample::Nearest => spatem_tensor::UpsampleMode::Nearest,
            AttentionUpsample::Bilinear => spatem_tensor::UpsampleMode::Bilinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depths: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub classes: usize,
    pub tile_size: usize,
    pub heads: usize,
    pub reduction: usize,
    /// Hidden width of the feed-forward module as a multiple of the embed dim.
    pub ffn_ratio: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub context_mode: ContextMode,
    pub attention_upsample: AttentionUpsample,
}

impl ModelConfig {
    /// 64 px tiles, five levels, widths 8..128. Fits a laptop CPU.
    pub fn desk(variant: Variant, context_mode: ContextMode) -> Self {
        Self {
            depths: 5,
            base_channels: 8,
            max_channels: 128,
            classes: 4,
            tile_size: 64,
            heads: 8,
            reduction: 2,
            ffn_ratio: 2,
            dropout: 0.1,
            variant,
            context_mode,
            attention_upsample: AttentionUpsample::Bilinear,
        }
    }

    /// Full-size setting: 256 px tiles, 16 heads, reduction 4.
    pub fn full(variant: Variant, context_mode: ContextMode) -> Self {
        Self { base_channels: 16, max_channels: 256, tile_size: 256, heads: 16, reduction: 4, ..Self::desk(variant, context_mode) }
    }

    /// Three levels on 16 px tiles; used for gradient checks.
    pub fn tiny(variant: Variant, context_mode: ContextMode) -> Self {
        Self { depths: 3, base_channels: 4, max_channels: 16, tile_size: 16, heads: 2, reduction: 2, ..Self::desk(variant, context_mode) }
    }

    /// Channel width at depth `l` (1-based).
    pub fn channels(&self, l: usize) -> usize {
        (self.base_channels << (l - 1)).min(self.max_channels)
    }

    /// Spatial extent at depth `l` (1-based).
    pub fn extent(&self, l: usize) -> usize {
        self.tile_size >> (l - 1)
    }

    pub fn embed_dim(&self) -> usize {
        self.channels(self.depths)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim() / self.heads
    }

    /// Bottleneck side length.
    pub fn bottleneck(&self) -> usize {
        self.extent(self.depths)
    }

    /// Side length of the reduced key grid.
    pub fn reduced(&self) -> usize {
        self.bottleneck() / self.reduction
    }

    pub fn context_tiles(&self) -> usize {
        match self.variant {
            Variant::Uspatem => self.context_mode.tiles(),
            Variant::UnetBaseline => 0,
        }
    }

    /// Indices into a 13-tile sequence (central, 8 spatial, 4 temporal).
    pub fn tile_indices(&self) -> Vec<usize> {
        if self.variant == Variant::UnetBaseline {
            return vec![0];
        }
        let mut idx = vec![0];
        if self.context_mode.spatial() > 0 {
            idx.extend(1..9);
        }
        if self.context_mode.temporal() > 0 {
            idx.extend(9..13);
        }
        idx
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depths < 2 {
            return fail(format!("depths must be >= 2, got {}", self.depths));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels || self.classes == 0 {
            return fail("channel widths and classes must be positive".into());
        }
        let down = 1usize << (self.depths - 1);
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(down) {
            return fail(format!("tile size {} not divisible by {down}", self.tile_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.variant == Variant::UnetBaseline {
            return Ok(());
        }
        if self.heads == 0 || self.ffn_ratio == 0 {
            return fail("heads and ffn_ratio must be positive".into());
        }
        for l in 1..=self.depths {
            if !self.channels(l).is_multiple_of(self.heads) {
                return fail(format!("{} heads do not divide {} channels at depth {l}", self.heads, self.channels(l)));
            }
        }
        if self.reduction == 0 || !self.bottleneck().is_multiple_of(self.reduction) {
            return fail(format!("reduction {} does not divide bottleneck {}", self.reduction, self.bottleneck()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_schedule() {
        let cfg = ModelConfig::desk(Variant::Uspatem, ContextMode::Both);
        cfg.validate().unwrap();
        assert_eq!((1..=5).map(|l| cfg.channels(l)).collect::<Vec<_>>(), [8, 16, 32, 64, 128]);
        assert_eq!(cfg.bottleneck(), 4);
        assert_eq!(cfg.reduced(), 2);
        assert_eq!(cfg.tile_indices().len(), 13);
        ModelConfig::full(Variant::Uspatem, ContextMode::Both).validate().unwrap();
        ModelConfig::tiny(Variant::Uspatem, ContextMode::Both).validate().unwrap();
    }

    #[test]
    fn mode_tile_selection() {
        let spatial = ModelConfig::desk(Variant::Uspatem, ContextMode::SpatialOnly);
        assert_eq!(spatial.tile_indices(), (0..9).collect::<Vec<_>>());
        let temporal = ModelConfig::desk(Variant::Uspatem, ContextMode::TemporalOnly);
        assert_eq!(temporal.tile_indices(), [0, 9, 10, 11, 12]);
        assert_eq!(ModelConfig::desk(Variant::UnetBaseline, ContextMode::Both).tile_indices(), [0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::desk(Variant::Uspatem, ContextMode::Both);
        assert!(ModelConfig { tile_size: 60, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { reduction: 3, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { heads: 3, ..base.clone() }.validate().is_err());
        // R = 4 at a 4x4 bottleneck is legal but leaves a single key
        assert!(ModelConfig { reduction: 4, ..base }.validate().is_ok());
    }
}
