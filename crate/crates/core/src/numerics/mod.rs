//! Random streams and dense symmetric linear algebra.

pub mod linalg;
pub mod rng;

pub use linalg::{
    axpy, dot, norm2, power_iteration_top, sym_eigen, sym_eigenvalues, Matrix, SymEigen, SymMatrix,
};
pub use rng::RngStream;
