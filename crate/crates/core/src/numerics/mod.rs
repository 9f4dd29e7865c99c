//! Dense f32/f64 tensors with reverse-mode differentiation, parameter storage,
//! the Adam optimizer, finite-difference gradient checking and checkpoints.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_params, save_params, ManifestEntry};
pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use graph::{rel_bucket, Gradients, Graph, Mode, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("softmax row {0} has every entry masked")]
    AllMasked(usize),
    #[error("index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("parameter {0:?} has no gradient")]
    MissingGrad(String),
    #[error("gradient mismatch in {name}[{index}]: analytic {analytic}, numeric {numeric}")]
    GradMismatch { name: String, index: usize, analytic: f64, numeric: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
