//! Small differentiable-numerics core: dense and sparse matrices, a
//! reverse-mode tape over matrix-valued nodes, and Adam.

mod adam;
mod matrix;
pub mod scalar;
mod sparse;
mod tape;

pub use adam::AdamState;
pub use matrix::{gemm, gemm_into, DenseMatrix, View};
pub use sparse::CsrMatrix;
pub use tape::{Tape, Var, NORM_EPS};
