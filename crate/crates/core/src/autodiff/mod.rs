//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Build a [`Graph`], create [`Var`] leaves on it, compose primitives, then
//! call [`Graph::backward`] on a scalar. A graph created with
//! [`Graph::with_higher_order`] also supports [`Graph::backward_retaining`],
//! whose gradients are graph nodes that can be differentiated again:
//!
//! ```
//! use mscn::autodiff::{Graph, Tensor};
//!
//! let g = Graph::with_higher_order();
//! let w = g.leaf(Tensor::scalar(2.0));
//! let f = w.square().unwrap().mul(&w).unwrap(); // w^3
//! let df = g.backward_retaining(&f).unwrap().wrt(&w);
//! assert_eq!(df.item(), 12.0);
//! let d2f = g.backward(&df).unwrap().value(&w);
//! assert_eq!(d2f.item(), 12.0);
//! ```

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index out of range for shape {shape:?}")]
    Index { op: &'static str, shape: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("backward on an empty record")]
    EmptyRecord,
    #[error("graph was not created with higher-order recording")]
    HigherOrderDisabled,
}
