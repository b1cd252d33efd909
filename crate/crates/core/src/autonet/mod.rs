//! Minimal explicit-backprop network: linear layers with a one-shot input
//! tape, pointwise activations, losses and a residual MLP-only model.

mod activation;
mod linear;
mod loss;
mod model;

pub use activation::Activation;
pub use linear::{LinearGrads, LinearLayer};
pub use loss::{loss_forward_backward, LossKind, Targets};
pub use model::{Block, BlockGrads, ModelDims, ModelGrads, Role, ToyModel};

use crate::error::Result;
use crate::numkit::Matrix;

/// A trainable `d_in → d_out` map with a forward tape.
///
/// `forward` caches whatever `backward` needs; `backward` consumes it and
/// fails if no forward is pending.
pub trait Layer {
    type Grads;

    fn d_in(&self) -> usize;
    fn d_out(&self) -> usize;

    /// Forward pass without touching the tape.
    fn infer(&self, x: &Matrix) -> Result<Matrix>;

    fn forward(&mut self, x: &Matrix) -> Result<Matrix>;

    /// Returns the gradient with respect to the layer input plus the
    /// layer's own parameter gradients.
    fn backward(&mut self, grad_y: &Matrix) -> Result<(Matrix, Self::Grads)>;
}
