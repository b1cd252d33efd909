use crate::autonet::{Layer, LinearLayer};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::sparse::{coo_from_dense, top_k_count, SparseCoo};

/// A linear layer whose weight gradient is cut to its top `ρ` entries.
#[derive(Clone, Debug)]
pub struct MePropLayer {
    pub inner: LinearLayer,
    pub fraction: f64,
}

#[derive(Clone, Debug)]
pub struct MePropGrads {
    /// Sparse gradient of `Wᵀ` (`d_in × d_out`).
    pub grad_w_t: SparseCoo,
    pub grad_b: Vec<f64>,
}

impl MePropLayer {
    pub fn new(inner: LinearLayer, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "meprop fraction must lie in (0, 1], got {fraction}"
            )));
        }
        Ok(MePropLayer { inner, fraction })
    }

    pub fn budget(&self) -> usize {
        top_k_count(self.fraction, self.inner.w_t.rows() * self.inner.w_t.cols())
    }

    pub fn apply_update(&mut self, delta: &SparseCoo) -> Result<()> {
        if delta.shape() != self.inner.w_t.shape() {
            return Err(Error::Corruption(format!(
                "update of shape {:?} for weight of shape {:?}",
                delta.shape(),
                self.inner.w_t.shape()
            )));
        }
        delta.add_into(&mut self.inner.w_t)
    }
}

/// Dense backward of the wrapped layer, then top-`ρ` of the weight
/// gradient. `grad_x` stays exact.
pub fn meprop_backward(layer: &mut MePropLayer, grad_y: &Matrix) -> Result<(Matrix, MePropGrads)> {
    let budget = layer.budget();
    let (grad_x, g) = layer.inner.backward(grad_y)?;
    Ok((
        grad_x,
        MePropGrads {
            grad_w_t: coo_from_dense(&g.grad_w_t, budget)?,
            grad_b: g.grad_b,
        },
    ))
}

impl Layer for MePropLayer {
    type Grads = MePropGrads;

    fn d_in(&self) -> usize {
        self.inner.d_in()
    }

    fn d_out(&self) -> usize {
        self.inner.d_out()
    }

    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.inner.infer(x)
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.inner.forward(x)
    }

    fn backward(&mut self, grad_y: &Matrix) -> Result<(Matrix, MePropGrads)> {
        meprop_backward(self, grad_y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_fraction_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = LinearLayer::random(4, 3, &mut rng);
        let mut plain = lin.clone();
        let mut mp = MePropLayer::new(lin, 1.0).unwrap();
        let x = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let gy = Matrix::random_normal(6, 3, 1.0, &mut rng);
        assert_eq!(mp.forward(&x).unwrap(), plain.forward(&x).unwrap());
        let (gx, g) = mp.backward(&gy).unwrap();
        let (gx_ref, g_ref) = plain.backward(&gy).unwrap();
        assert_eq!(gx, gx_ref);
        assert_eq!(g.grad_w_t.densify(), g_ref.grad_w_t);
    }

    #[test]
    fn keeps_largest_entry() {
        // x = I makes grad_w_t equal grad_y.
        let lin = LinearLayer::without_bias(Matrix::zeros(2, 2));
        let mut mp = MePropLayer::new(lin, 0.25).unwrap();
        mp.forward(&Matrix::identity(2)).unwrap();
        let (_, g) = mp.backward(&Matrix::from_rows(&[[1.0, -5.0], [2.0, 3.0]])).unwrap();
        let e = g.grad_w_t.entries();
        assert_eq!(e.len(), 1);
        assert_eq!((e[0].row, e[0].col, e[0].value), (0, 1, -5.0));
    }

    #[test]
    fn rejects_bad_fraction() {
        let lin = LinearLayer::without_bias(Matrix::zeros(2, 2));
        assert!(MePropLayer::new(lin.clone(), 0.0).is_err());
        assert!(MePropLayer::new(lin, 1.5).is_err());
    }
}
