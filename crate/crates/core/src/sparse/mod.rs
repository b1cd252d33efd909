//! Coordinate-format sparse matrices and the strided sparse-by-dense
//! product used on the weight-gradient path.

mod coo;
mod strided;

pub use coo::{coo_from_dense, top_k_count, CooEntry, SparseCoo};
pub use strided::{extract_pattern, restore_coo, sparse_by_dense, StridedPattern};
