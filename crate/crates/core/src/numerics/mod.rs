//! Dense `f64` tensors with a tape-based reverse-mode gradient engine.
//!
//! Everything else in the crate is built from the fixed primitive catalog in
//! [`Graph`]: each primitive records its inputs on an append-only tape when
//! any input requires a gradient, and [`Graph::backward`] walks the tape in
//! reverse insertion order exactly once.
//!
//! ```
//! use mvadapter::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param("x", &Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
//! ```

mod check;
mod graph;
mod init;
mod store;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_paths, FdReport};
pub use graph::{Gradients, Graph, Var};
pub use init::{fnv1a, seeded_init, substream, InitScheme};
pub use store::ParamStore;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: every extent must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: zero-norm row")]
    ZeroNorm { op: &'static str },
    #[error("cross_entropy: target {target} out of range for {classes} classes")]
    Target { target: usize, classes: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown init scheme `{0}`")]
    UnknownScheme(String),
    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("finite-difference step must be positive, got {0}")]
    BadEpsilon(f64),
}
