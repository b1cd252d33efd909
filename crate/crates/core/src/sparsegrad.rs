//! Linear layer trained in a calibrated orthogonal basis.
//!
//! A source layer `Y = X·Wᵀ + b` becomes `Ỹ = ((X·Uᵀ)·W̃ᵀ)·V + b` with
//! `W̃ᵀ = U·Wᵀ·Vᵀ`. For orthogonal `U`, `V` the output and the input
//! gradient are unchanged, while the gradient of `W̃ᵀ`,
//! `X̃ᵀ·(∂L/∂Y·Vᵀ) = U·(∂L/∂Wᵀ)·Vᵀ`, concentrates on few entries. Only the
//! top fraction of those entries is emitted, as COO.
//!
//! Orientation: every weight gradient here has the shape of `w_tilde_t`
//! (`d_in × d_out`), i.e. it is the gradient of `W̃ᵀ`. The transpose of it
//! is `V·(∂L/∂Y)ᵀ·X·Uᵀ`, the gradient of `W̃`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autonet::{Layer, LinearLayer};
use crate::calib::TransitionBasis;
use crate::error::{Error, Result};
use crate::numkit::{is_orthogonal, Matrix};
use crate::sparse::{
    extract_pattern, restore_coo, sparse_by_dense, top_k_count, SparseCoo,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsifyMode {
    /// Sparsify `∂L/∂Ỹ` first and use the strided sparse-by-dense product;
    /// the resulting weight gradient is still capped at the budget.
    GradOutputTopK,
    /// Dense weight gradient, then keep the top fraction of its entries.
    WeightGradTopK,
}

impl SparsifyMode {
    pub fn tag(self) -> u8 {
        match self {
            SparsifyMode::GradOutputTopK => 0,
            SparsifyMode::WeightGradTopK => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SparsifyMode::GradOutputTopK),
            1 => Some(SparsifyMode::WeightGradTopK),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsifyPolicy {
    pub mode: SparsifyMode,
    /// Fraction `ρ` of weight-gradient entries kept per step.
    pub fraction: f64,
    /// Fraction of `∂L/∂Ỹ` entries kept on the sparse-by-dense path.
    /// `None` means `√ρ`, a heuristic that lands the weight-gradient
    /// density near `ρ`.
    pub grad_output_fraction: Option<f64>,
    /// Magnitudes at or below this count as zero during pattern extraction.
    pub epsilon: f64,
}

impl Default for SparsifyPolicy {
    fn default() -> Self {
        SparsifyPolicy {
            mode: SparsifyMode::GradOutputTopK,
            fraction: 0.01,
            grad_output_fraction: None,
            epsilon: 0.0,
        }
    }
}

impl SparsifyPolicy {
    pub fn new(mode: SparsifyMode, fraction: f64) -> Self {
        SparsifyPolicy {
            mode,
            fraction,
            ..SparsifyPolicy::default()
        }
    }

    pub fn with_grad_output_fraction(mut self, f: f64) -> Self {
        self.grad_output_fraction = Some(f);
        self
    }

    pub fn effective_grad_output_fraction(&self) -> f64 {
        self.grad_output_fraction.unwrap_or_else(|| self.fraction.sqrt())
    }

    pub fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        let in_unit = |f: f64| f > 0.0 && f <= 1.0;
        if !in_unit(self.fraction) {
            return Err(Error::Config(format!(
                "weight-gradient fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        if !in_unit(self.effective_grad_output_fraction()) {
            return Err(Error::Config(format!(
                "grad-output fraction must lie in (0, 1], got {}",
                self.effective_grad_output_fraction()
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        if self.fraction * ((d_in * d_out) as f64) < 1.0 {
            return Err(Error::Config(format!(
                "fraction {} keeps no entry of a {d_in}x{d_out} layer",
                self.fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SparseGradGrads {
    /// Sparse gradient of `W̃ᵀ` (`d_in × d_out`).
    pub grad_w_tilde_t: SparseCoo,
    pub grad_b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SparseGradLayer {
    /// `U · Wᵀ · Vᵀ`, the only weight training changes.
    pub w_tilde_t: Matrix,
    pub bias: Vec<f64>,
    pub policy: SparsifyPolicy,
    basis: Arc<TransitionBasis>,
    /// `X̃ = X·Uᵀ` from the pending forward.
    cache: Option<Matrix>,
}

impl SparseGradLayer {
    /// Moves `layer` into `basis`: `w_tilde_t = U · w_t · Vᵀ`, bias copied.
    pub fn convert(
        layer: &LinearLayer,
        basis: Arc<TransitionBasis>,
        policy: SparsifyPolicy,
    ) -> Result<Self> {
        if (basis.d_in(), basis.d_out()) != (layer.d_in(), layer.d_out()) {
            return Err(Error::Conversion(format!(
                "{} basis is {}x{}, layer is {}x{}",
                basis.role,
                basis.d_in(),
                basis.d_out(),
                layer.d_in(),
                layer.d_out()
            )));
        }
        if !is_orthogonal(basis.u(), 1e-8)? || !is_orthogonal(basis.v(), 1e-8)? {
            return Err(Error::Conversion("transition basis is not orthogonal".into()));
        }
        policy
            .validate(layer.d_in(), layer.d_out())
            .map_err(|e| Error::Conversion(e.to_string()))?;
        let w_tilde_t = basis.transform(&layer.w_t)?;
        Ok(SparseGradLayer {
            w_tilde_t,
            bias: layer.bias.clone(),
            policy,
            basis,
            cache: None,
        })
    }

    /// Assembles a layer from stored parts (checkpoints, tests). Checks
    /// shapes only.
    pub fn from_parts(
        w_tilde_t: Matrix,
        bias: Vec<f64>,
        basis: Arc<TransitionBasis>,
        policy: SparsifyPolicy,
    ) -> Result<Self> {
        if w_tilde_t.shape() != (basis.d_in(), basis.d_out()) || bias.len() != basis.d_out() {
            return Err(Error::shape(
                "SparseGradLayer::from_parts",
                (basis.d_in(), basis.d_out()),
                w_tilde_t.shape(),
            ));
        }
        Ok(SparseGradLayer {
            w_tilde_t,
            bias,
            policy,
            basis,
            cache: None,
        })
    }

    /// Back to the original space: `w_t = Uᵀ · w_tilde_t · V`.
    pub fn convert_back(&self) -> Result<LinearLayer> {
        LinearLayer::new(self.basis.inverse_transform(&self.w_tilde_t)?, self.bias.clone())
    }

    pub fn basis(&self) -> &Arc<TransitionBasis> {
        &self.basis
    }

    fn take_cache(&mut self) -> Result<Matrix> {
        self.cache
            .take()
            .ok_or_else(|| Error::State("sparsegrad backward without a pending forward".into()))
    }

    fn transformed_grad_output(&self, x_tilde: &Matrix, grad_y: &Matrix) -> Result<Matrix> {
        if grad_y.shape() != (x_tilde.rows(), self.d_out()) {
            return Err(Error::shape(
                "sparsegrad backward",
                (x_tilde.rows(), self.d_out()),
                grad_y.shape(),
            ));
        }
        grad_y.matmul(self.basis.v_t())
    }

    /// `((∂L/∂Y · Vᵀ) · W̃) · U`; never sparsified. The first product is
    /// formed as `(W̃ᵀ · G̃ᵀ)ᵀ`, which sums in the same order and only
    /// transposes the small operands.
    fn grad_input(&self, grad_y_tilde: &Matrix) -> Result<Matrix> {
        self.w_tilde_t
            .matmul(&grad_y_tilde.transpose())?
            .transpose()
            .matmul(self.basis.u())
    }

    fn weight_budget(&self) -> usize {
        top_k_count(self.policy.fraction, self.d_in() * self.d_out())
    }

    /// Dense weight gradient `X̃ᵀ·G̃`, then top-`ρ` entries.
    pub fn backward_regular(&mut self, grad_y: &Matrix) -> Result<(Matrix, SparseGradGrads)> {
        let x_tilde = self.take_cache()?;
        let g = self.transformed_grad_output(&x_tilde, grad_y)?;
        let dense = x_tilde.matmul_tn(&g)?;
        let grad_w_tilde_t = crate::sparse::coo_from_dense(&dense, self.weight_budget())?;
        let grad_x = self.grad_input(&g)?;
        Ok((
            grad_x,
            SparseGradGrads {
                grad_w_tilde_t,
                grad_b: grad_y.column_sums(),
            },
        ))
    }

    /// Keeps the top `ρ_g` entries of `G̃ = ∂L/∂Y·Vᵀ`, multiplies only the
    /// nonzero rows of `G̃ᵀ` (and nonzero batch columns) against `X̃`,
    /// scatters the rows back and caps the result at the `ρ` budget.
    pub fn backward_sparse_by_dense(
        &mut self,
        grad_y: &Matrix,
    ) -> Result<(Matrix, SparseGradGrads)> {
        if self.policy.mode != SparsifyMode::GradOutputTopK {
            return Err(Error::State(
                "sparse-by-dense backward needs the grad-output-topk policy".into(),
            ));
        }
        let x_tilde = self.take_cache()?;
        let g = self.transformed_grad_output(&x_tilde, grad_y)?;

        let keep = top_k_count(
            self.policy.effective_grad_output_fraction(),
            g.rows() * g.cols(),
        );
        let kept = crate::sparse::coo_from_dense(&g, keep)?;
        // Build G̃ᵀ directly from the kept entries.
        let mut g_sparse_t = Matrix::zeros(g.cols(), g.rows());
        for e in kept.entries() {
            g_sparse_t.set(e.col as usize, e.row as usize, e.value);
        }
        let (pattern, compressed) = extract_pattern(&g_sparse_t, self.policy.epsilon);
        let (product, row_map) = sparse_by_dense(&pattern, &compressed, &x_tilde)?;
        let grad_w_tilde_t = restore_coo(&product, &row_map, self.d_out(), None)?
            .transpose()
            .top_k(self.weight_budget());

        let grad_x = self.grad_input(&g)?;
        Ok((
            grad_x,
            SparseGradGrads {
                grad_w_tilde_t,
                grad_b: grad_y.column_sums(),
            },
        ))
    }

    /// Adds `delta` (shape of `w_tilde_t`) in place; nothing else changes.
    pub fn apply_update(&mut self, delta: &SparseCoo) -> Result<()> {
        if delta.shape() != self.w_tilde_t.shape() {
            return Err(Error::Corruption(format!(
                "update of shape {:?} for weight of shape {:?}",
                delta.shape(),
                self.w_tilde_t.shape()
            )));
        }
        delta.add_into(&mut self.w_tilde_t)
    }
}

impl Layer for SparseGradLayer {
    type Grads = SparseGradGrads;

    fn d_in(&self) -> usize {
        self.w_tilde_t.rows()
    }

    fn d_out(&self) -> usize {
        self.w_tilde_t.cols()
    }

    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::shape("sparsegrad forward", x.shape(), self.w_tilde_t.shape()));
        }
        let x_tilde = x.matmul(self.basis.u_t())?;
        let mut y = x_tilde.matmul(&self.w_tilde_t)?.matmul(self.basis.v())?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::shape("sparsegrad forward", x.shape(), self.w_tilde_t.shape()));
        }
        let x_tilde = x.matmul(self.basis.u_t())?;
        let mut y = x_tilde.matmul(&self.w_tilde_t)?.matmul(self.basis.v())?;
        y.add_row_vector(&self.bias)?;
        self.cache = Some(x_tilde);
        Ok(y)
    }

    /// Dispatches on the policy mode.
    fn backward(&mut self, grad_y: &Matrix) -> Result<(Matrix, SparseGradGrads)> {
        match self.policy.mode {
            SparsifyMode::GradOutputTopK => self.backward_sparse_by_dense(grad_y),
            SparsifyMode::WeightGradTopK => self.backward_regular(grad_y),
        }
    }
}
