//! The `--config` file: every field is optional and falls back to the
//! defaults below; command-line flags override the file.

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use spatem::synth::GeneratorConfig;
use spatem::train::TrainConfig;
use spatem::{AttentionUpsample, ContextMode, ModelConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Tiny,
    Full,
}

/// Which inputs a model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// U-Net on the central tile alone.
    Baseline,
    Spatial,
    Temporal,
    #[default]
    Both,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Spatial, Mode::Temporal, Mode::Both];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Spatial => "spatial",
            Mode::Temporal => "temporal",
            Mode::Both => "both",
        }
    }

    pub fn parts(self) -> (Variant, ContextMode) {
        match self {
            Mode::Baseline => (Variant::UnetBaseline, ContextMode::Both),
            Mode::Spatial => (Variant::Uspatem, ContextMode::SpatialOnly),
            Mode::Temporal => (Variant::Uspatem, ContextMode::TemporalOnly),
            Mode::Both => (Variant::Uspatem, ContextMode::Both),
        }
    }
}

/// Per-field overrides of the preset architecture.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tile_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_ratio: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_upsample: Option<AttentionUpsample>,
}

/// Dataset composition for `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    /// Sheet sequences.
    pub count: usize,
    /// Worlds to render; 0 picks one per 40 sequences.
    pub worlds: usize,
    /// Held-out ambiguous pairs, added to the test split.
    pub test_pairs: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self { count: 1000, worlds: 0, test_pairs: 200, val_fraction: 0.15, test_fraction: 0.15 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelOverrides,
    /// `train.seed` is the run seed; `--seed` replaces it.
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub data: DataOptions,
}

impl RunConfig {
    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        serde_json::from_slice(bytes).map_err(|e| format!("config: {e}"))
    }

    /// Preset architecture for `mode` with the overrides applied; the tile
    /// size defaults to `tile` (the dataset's).
    pub fn model_config(&self, mode: Mode, tile: Option<usize>) -> ModelConfig {
        let (variant, context) = mode.parts();
        let mut m = match self.preset {
            Preset::Desk => ModelConfig::desk(variant, context),
            Preset::Tiny => ModelConfig::tiny(variant, context),
            Preset::Full => ModelConfig::full(variant, context),
        };
        let o = &self.model;
        m.depths = o.depths.unwrap_or(m.depths);
        m.base_channels = o.base_channels.unwrap_or(m.base_channels);
        m.max_channels = o.max_channels.unwrap_or(m.max_channels);
        m.tile_size = o.tile_size.or(tile).unwrap_or(m.tile_size);
        m.heads = o.heads.unwrap_or(m.heads);
        m.reduction = o.reduction.unwrap_or(m.reduction);
        m.ffn_ratio = o.ffn_ratio.unwrap_or(m.ffn_ratio);
        m.dropout = o.dropout.unwrap_or(m.dropout);
        m.attention_upsample = o.attention_upsample.unwrap_or(m.attention_upsample);
        m
    }
}
