//! Tensors and reverse-mode automatic differentiation.
//!
//! The engine records a computation graph with a closed operator set and
//! replays it backwards for gradients. Values follow 32-bit float
//! semantics: every node's output is rounded to `f32` precision, while the
//! arithmetic inside a kernel runs in `f64`. [`Graph::new_unquantized`]
//! disables the rounding; the finite-difference oracle in [`grad_check`]
//! uses that mode so its difference quotients are not drowned by rounding
//! noise at step sizes around `1e-3`.

mod attention;
mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;


pub use attention::{multi_head_attention, AttnProj};
pub use checkpoint::{load_checkpoint, save_checkpoint, sha256_file, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOpts, GradCheckReport, WorstCoord};
pub use graph::{AttnMask, Gradients, Graph, NodeId};
pub use params::{ParamGroup, ParamId, ParamSet, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },
    #[error("duplicate parameter name: {0}")]
    DuplicateParam(String),
    #[error("unknown parameter: {0}")]
    UnknownParam(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error("gradient check: {0}")]
    GradCheck(String),
}
