//! Sparse-gradient fine-tuning for MLP linear layers.
//!
//! Weight gradients of a linear layer are moved into an orthogonal basis
//! (calibrated once by a higher-order SVD of stacked gradients) where they
//! concentrate on very few entries. Only the largest entries are kept and
//! fed to a masked Adam. The crate also ships the comparison baselines
//! (MeProp, LoRA), a tiny explicit-backprop MLP, and a synthetic-task
//! training harness.
//!
//! Module map:
//! * [`numkit`] dense matrices, order-3 tensors and Jacobi SVD;
//! * [`autonet`] linear layers, activations, losses and the toy MLP;
//! * [`calib`] gradient capture, HOSVD basis extraction and basis files;
//! * [`sparse`] COO matrices and the strided sparse-by-dense product;
//! * [`sparsegrad`] the transformed-basis linear layer;
//! * [`optim`] dense AdamW and masked sparse Adam;
//! * [`baselines`] MeProp and LoRA;
//! * [`harness`] config, data, training, benchmarks and checkpoints.

pub mod autonet;
pub mod baselines;
pub mod calib;
pub(crate) mod codec;
pub mod error;
pub mod harness;
pub mod numkit;
pub mod optim;
pub mod sparse;
pub mod sparsegrad;

pub use error::{Error, Result};
pub use numkit::Matrix;
