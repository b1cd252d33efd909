//! Preliminary phase: observe weight gradients of the MLP linears for a
//! few steps, stack them per role into an order-3 tensor, and extract the
//! two orthogonal factor matrices of its higher-order SVD.

mod basis;
mod record;
mod report;

pub use basis::{Provenance, TransitionBasis};
pub use record::{hosvd_basis, record_calibration, GradientLog, DEFAULT_CALIBRATION_STEPS};
pub use report::{sparsity_report, SliceConcentration, SparsityReport};
