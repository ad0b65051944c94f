//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every loss in the crate is recorded on a [`Tape`] and differentiated with
//! respect to flat parameter vectors. The primitive set is deliberately
//! small: matrix products, elementwise arithmetic, `tanh`, logistic sigmoid,
//! `exp`, `log`, `square`, `clip`, `min`/`max`, reductions, row-wise
//! log-softmax, gather and slicing.
//!
//! Subgradient conventions:
//! - `clip` has derivative 1 strictly inside its interval and 0 on the
//!   boundary or outside it.
//! - `min`/`max` route the adjoint to the selected branch; on ties the first
//!   argument is selected.
//!
//! Any operation producing a NaN or infinity fails with
//! [`DiffError::NonFinite`].

mod program;
mod tape;
mod tensor;

pub use program::{FdReport, Program};
pub use tape::{logsumexp, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("gradient requested for non-scalar output of shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
