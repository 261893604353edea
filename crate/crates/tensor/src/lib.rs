//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; each forward op records what its backward rule
//! needs. Kernels are single-threaded and deterministic: a fixed seed gives
//! bit-identical results run to run.

pub mod error;
pub mod float;
pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod rng;
pub mod suite;
pub mod tape;
pub mod tenfile;
pub mod tensor;

pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use ops::conv::Conv2dSpec;
pub use ops::elementwise::Pointwise;
pub use ops::norm::{BatchNormMode, BatchStats};
pub use ops::pool::UpsampleMode;
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{Mode, OpKind, Tape, Var};
pub use tensor::Tensor;
