use rand::Rng;

use crate::autonet::{Layer, LinearLayer};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const LORA_INIT_STD: f64 = 0.02;

/// Low-rank update `ΔW = (α/r)·b·a` with `a: r × d_in`, `b: d_out × r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraAdapter {
    /// Gaussian `a`, zero `b`, `α = r`.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        Ok(LoraAdapter {
            a: Matrix::random_normal(rank, d_in, LORA_INIT_STD, rng),
            b: Matrix::zeros(d_out, rank),
            alpha: rank as f64,
        })
    }

    pub fn from_factors(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if a.rows() != b.cols() || a.rows() == 0 {
            return Err(Error::shape("LoraAdapter::from_factors", a.shape(), b.shape()));
        }
        Ok(LoraAdapter { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.rows() * self.a.cols() + self.b.rows() * self.b.cols()
    }

    /// `ΔWᵀ = (α/r)·aᵀ·bᵀ`, shape `d_in × d_out`.
    pub fn delta_w_t(&self) -> Result<Matrix> {
        Ok(self.a.matmul_tn(&self.b.transpose())?.scale(self.scale()))
    }
}

#[derive(Clone, Debug)]
pub struct LoraGrads {
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

/// Frozen base layer plus a trainable adapter.
#[derive(Clone, Debug)]
pub struct LoraLayer {
    pub base: LinearLayer,
    pub adapter: LoraAdapter,
    /// Input `X` and `X·aᵀ` from the pending forward.
    cache: Option<(Matrix, Matrix)>,
}

impl LoraLayer {
    pub fn new(base: LinearLayer, adapter: LoraAdapter) -> Result<Self> {
        if adapter.a.cols() != base.d_in() || adapter.b.rows() != base.d_out() {
            return Err(Error::shape(
                "LoraLayer::new",
                base.w_t.shape(),
                (adapter.a.cols(), adapter.b.rows()),
            ));
        }
        Ok(LoraLayer {
            base,
            adapter,
            cache: None,
        })
    }

    /// Base layer with the adapter folded into its weight.
    pub fn merged(&self) -> Result<LinearLayer> {
        let mut w_t = self.base.w_t.clone();
        w_t.add_assign(&self.adapter.delta_w_t()?)?;
        LinearLayer::new(w_t, self.base.bias.clone())
    }

    fn run(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut y = self.base.infer(x)?;
        let xa = x.matmul_nt(&self.adapter.a)?;
        let branch = xa.matmul_nt(&self.adapter.b)?.scale(self.adapter.scale());
        y.add_assign(&branch)?;
        Ok((y, xa))
    }
}

impl Layer for LoraLayer {
    type Grads = LoraGrads;

    fn d_in(&self) -> usize {
        self.base.d_in()
    }

    fn d_out(&self) -> usize {
        self.base.d_out()
    }

    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.run(x)?.0)
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (y, xa) = self.run(x)?;
        self.cache = Some((x.clone(), xa));
        Ok(y)
    }

    /// Adapter gradients only; the base weight gets none.
    fn backward(&mut self, grad_y: &Matrix) -> Result<(Matrix, LoraGrads)> {
        let (x, xa) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("lora backward without a pending forward".into()))?;
        if grad_y.shape() != (x.rows(), self.d_out()) {
            return Err(Error::shape("lora backward", (x.rows(), self.d_out()), grad_y.shape()));
        }
        let s = self.adapter.scale();
        let grad_b = grad_y.matmul_tn(&xa)?.scale(s);
        let grad_h = grad_y.matmul(&self.adapter.b)?.scale(s);
        let grad_a = grad_h.matmul_tn(&x)?;
        let mut grad_x = grad_y.matmul_nt(&self.base.w_t)?;
        grad_x.add_assign(&grad_h.matmul(&self.adapter.a)?)?;
        Ok((grad_x, LoraGrads { grad_a, grad_b }))
    }
}
