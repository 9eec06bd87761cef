//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough of its inputs to run the vector-Jacobian product later. The op set
//! is closed and small, covering exactly what the conversion network needs,
//! so every op can be checked against central finite differences
//! ([`finite_difference_check`]).
//!
//! ```
//! use scent::numerics::{Graph, ParamStore, Tensor};
//!
//! let params = ParamStore::new();
//! let mut g = Graph::new(&params);
//! let x = g.input(Tensor::scalar(0.0));
//! let y = g.sigmoid(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.value(y).item(), 0.5);
//! assert_eq!(grads.wrt(x).unwrap().item(), 0.25);
//! ```

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_check, forward_backward, GradReport};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid tensor shape {rows}x{cols} for {len} values")]
    InvalidShape { rows: usize, cols: usize, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("loss must be a 1x1 tensor, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("finite-difference step must be positive")]
    InvalidStep,
}
