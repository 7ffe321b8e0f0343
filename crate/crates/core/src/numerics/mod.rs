//! Minimal dense-tensor engine: row-major `f32`/`f64` tensors, a reverse-mode
//! autodiff tape with the layer primitives the model needs, the Adam
//! optimizer, and a reduce-on-plateau learning-rate scheduler.

mod optim;
pub mod check;
pub mod rng;
mod tape;
mod tensor;

pub use optim::{AdamState, PlateauScheduler};
pub use tape::{BatchNormRunning, Mode, Tape, Var};
pub use tensor::{Real, TensorData};

use thiserror::Error;

/// Normalisation epsilon shared by layer norm and batch norm.
pub const NORM_EPS: f64 = 1e-5;
/// Momentum of the batch-norm running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch, {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("batch norm in train mode needs a batch of at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("dropout rate must lie in [0, 1), got {rate}")]
    InvalidRate { rate: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter `{name}` has no gradient; run backward first")]
    MissingGradient { name: String },
}
