//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters enter it as leaves,
//! layers compose the ops on it, and [`Tape::backward`] returns the gradient
//! of a scalar loss for every leaf that requested one. [`Adam`] applies the
//! update outside the tape.

mod adam;
mod matrix;
mod tape;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("backward already ran on this tape")]
    AlreadyBackward,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
