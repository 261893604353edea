//! U-Net segmentation with a spatio-temporal context transformer.
//!
//! The central map tile and its context tiles (spatial neighbours and the
//! same location in other editions) share one encoder. At the bottleneck
//! the central tile cross-attends to every context tile; the attention maps
//! are then reused, upsampled, to fuse context features into each skip
//! connection. A procedural map generator supplies training data whose
//! ambiguity can only be resolved from context.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod model;
pub mod synth;
pub mod train;
pub mod verify;
pub mod viz;

pub use config::{AttentionUpsample, ContextMode, ModelConfig, Variant};
pub use error::{Error, Result};
pub use model::{ForwardOut, Model};
