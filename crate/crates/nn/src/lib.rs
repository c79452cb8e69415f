//! Minimal differentiable-computation substrate.
//!
//! A [`Tape`] records a forward pass over flat row-major `f64` buffers and
//! replays it in reverse to produce gradients. Parameters live in a
//! [`ParamStore`] and are bound onto a tape per step; [`AdamW`] consumes the
//! accumulated gradients. [`NamedTensorStore`] is the on-disk checkpoint
//! container shared by every network in the workspace.

pub mod adamw;
pub mod checkpoint;
pub mod error;
mod gemm;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{DType, NamedTensorStore, StoredTensor};
pub use error::{NnError, Result};
pub use layers::{Activation, Layer, LayerSpec};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
