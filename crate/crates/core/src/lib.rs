//! Segmentation of echocardiograms with a U-shaped network: a residual
//! convolutional encoder, a decoder stack of large-window bidirectional
//! state-space (Mamba-style) blocks, a dual-attention multi-scale fusion
//! module, and deep supervision through per-stage auxiliary heads.
//!
//! Everything runs on a small reverse-mode autodiff engine built around a
//! per-pass tape ([`tape::Tape`]). The crate is CPU-only, dependency-light,
//! and deterministic: fixed seeds give bitwise-identical runs.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod lms;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod msaa;
pub mod ops;
pub mod pgm;
pub mod phantom;
pub mod real;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
