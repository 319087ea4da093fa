//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Graph`] records every operation of
//! one forward pass on a tape, and [`Graph::backward`] walks the tape in
//! reverse to produce parameter gradients. Spatial tensors use the layout
//! `[batch, channels, x, y, z]`; two-dimensional problems set `z = 1`.

mod gemm;
mod graph;
mod optim;
mod params;
mod spectral;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{ArchiveEntry, ArchiveManifest, ParamId, ParamStore};
pub use spectral::SpectralBasis;
pub use tensor::Tensor;

/// Errors raised by tensor construction and weight archives.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("archive entry `{0}` is missing")]
    MissingEntry(String),
    #[error("archive entry `{name}` has shape {found:?}, expected {expected:?}")]
    EntryShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("archive is malformed: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
