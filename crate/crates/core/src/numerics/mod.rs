//! Dense matrices, special functions and reverse-mode differentiation.

pub mod linalg;
pub mod matrix;
pub mod sparse;
pub mod special;
pub mod tape;

pub use matrix::Matrix;
pub use sparse::RowOperator;
pub use tape::{Gradients, Tape, Var};

use std::fmt;

/// `(rows, cols)` rendered as `RxC`.
pub struct Shape(pub (usize, usize));

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0 .0, self.0 .1)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {} vs {}", Shape(*.left), Shape(*.right))]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("cannot build a {rows}x{cols} matrix from {len} values")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("loss must be 1x1, got {}", Shape(*.shape))]
    NonScalarLoss { shape: (usize, usize) },
}
