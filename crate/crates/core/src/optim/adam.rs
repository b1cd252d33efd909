use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// `lr · m̂ / (√v̂ + eps)` for step `t` (1-based).
    pub(crate) fn adam_direction(&self, m: f64, v: f64, t: u64) -> f64 {
        let t = t.min(i32::MAX as u64) as i32;
        let m_hat = m / (1.0 - self.beta1.powi(t));
        let v_hat = v / (1.0 - self.beta2.powi(t));
        self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

/// First and second moments for one dense parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn for_matrix(m: &Matrix) -> Self {
        AdamState::new(m.rows() * m.cols())
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Two f64 moments per coordinate.
    pub fn moment_bytes(&self) -> usize {
        2 * self.m.len() * 8
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u64(self.m.len() as u64);
        w.u64(self.t);
        w.f64s(&self.m);
        w.f64s(&self.v);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let len = usize::try_from(r.u64()?)
            .map_err(|_| Error::Corruption("adam state length overflows".into()))?;
        let t = r.u64()?;
        let m = r.f64s(len)?;
        let v = r.f64s(len)?;
        if v.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Corruption("negative second moment".into()));
        }
        Ok(AdamState { m, v, t })
    }
}

/// One AdamW step on a flat parameter slice. Decay is decoupled:
/// `p ← p − lr·wd·p`, then `p ← p − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step_slice(
    name: &str,
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.len() {
        return Err(Error::Argument(format!(
            "{name}: params {}, grad {}, state {}",
            params.len(),
            grad.len(),
            state.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for {name} at flat index {i}"
        )));
    }
    state.t += 1;
    let decay = cfg.lr * cfg.weight_decay;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if decay != 0.0 {
            *p -= decay * *p;
        }
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.adam_direction(*m, *v, state.t);
    }
    Ok(())
}

pub fn adamw_step(
    name: &str,
    params: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.shape() != grad.shape() {
        return Err(Error::shape("adamw_step", params.shape(), grad.shape()));
    }
    adamw_step_slice(name, params.data_mut(), grad.data(), state, cfg)
}
