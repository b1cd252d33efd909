//! Dense 64-bit linear algebra: matrices, order-3 tensors, Jacobi SVD.

mod matrix;
mod svd;
mod tensor;

pub use matrix::{householder_orthogonal, is_orthogonal, random_orthogonal, rel_frobenius_diff, Matrix};
pub use svd::{left_singular_vectors, svd, Svd};
pub use tensor::Tensor3;
