use std::collections::BTreeMap;

use crate::autonet::{LinearLayer, Role, Targets, ToyModel};
use crate::error::{Error, Result};
use crate::numkit::{left_singular_vectors, Matrix, Tensor3};

use super::{Provenance, TransitionBasis};

/// Number of observation steps used when the caller does not choose one.
pub const DEFAULT_CALIBRATION_STEPS: usize = 30;

/// Stacked gradients of `Wᵀ` for one role, step-major with block index
/// ascending inside a step.
#[derive(Clone, Debug)]
pub struct GradientLog {
    pub role: Role,
    pub d_in: usize,
    pub d_out: usize,
    pub n_blocks: usize,
    pub seed: u64,
    slices: Vec<Matrix>,
    steps_recorded: usize,
}

impl GradientLog {
    pub fn new(role: Role, d_in: usize, d_out: usize, n_blocks: usize) -> Self {
        GradientLog {
            role,
            d_in,
            d_out,
            n_blocks,
            seed: 0,
            slices: Vec::new(),
            steps_recorded: 0,
        }
    }

    /// Appends one calibration step: one `d_in × d_out` slice per block.
    pub fn push_step(&mut self, per_block: Vec<Matrix>) -> Result<()> {
        if per_block.len() != self.n_blocks {
            return Err(Error::Argument(format!(
                "step has {} slices for {} blocks",
                per_block.len(),
                self.n_blocks
            )));
        }
        for s in &per_block {
            if s.shape() != (self.d_in, self.d_out) {
                return Err(Error::shape("GradientLog::push_step", (self.d_in, self.d_out), s.shape()));
            }
        }
        self.slices.extend(per_block);
        self.steps_recorded += 1;
        Ok(())
    }

    pub fn slices(&self) -> &[Matrix] {
        &self.slices
    }

    pub fn steps_recorded(&self) -> usize {
        self.steps_recorded
    }

    pub fn to_tensor(&self) -> Result<Tensor3> {
        Tensor3::from_slices(&self.slices)
    }
}

/// Runs `n_steps` forward/backward passes without updating any weight and
/// records the gradient of every MLP `Wᵀ`, grouped by role.
pub fn record_calibration<I>(
    model: &mut ToyModel<LinearLayer>,
    data: I,
    n_steps: usize,
) -> Result<BTreeMap<Role, GradientLog>>
where
    I: IntoIterator<Item = (Matrix, Targets)>,
{
    if n_steps == 0 {
        return Err(Error::Argument("calibration needs at least one step".into()));
    }
    let dims = model.dims();
    let mut logs: BTreeMap<Role, GradientLog> = Role::ALL
        .iter()
        .map(|&r| {
            let (d_in, d_out) = r.shape(&dims);
            (r, GradientLog::new(r, d_in, d_out, dims.n_blocks))
        })
        .collect();
    let mut batches = data.into_iter();
    for step in 0..n_steps {
        let (x, t) = batches.next().ok_or_else(|| {
            Error::Data(format!(
                "data stream ended after {step} of {n_steps} calibration batches"
            ))
        })?;
        let grads = model.forward_backward(&x, &t)?;
        let (mut ups, mut downs) = (Vec::new(), Vec::new());
        for b in grads.blocks {
            ups.push(b.up.grad_w_t);
            downs.push(b.down.grad_w_t);
        }
        logs.get_mut(&Role::Up).expect("up log").push_step(ups)?;
        logs.get_mut(&Role::Down).expect("down log").push_step(downs)?;
    }
    debug_assert!(model.blocks.iter().all(|b| !b.up.has_pending_forward()));
    Ok(logs)
}

/// HOSVD factor matrices of the stacked log.
///
/// With `A` the left singular vectors of the mode-0 unfolding and `B` those
/// of the mode-1 unfolding, the basis is `u = Aᵀ`, `v = Bᵀ`, so
/// `u·G·vᵀ = Aᵀ·G·B` is the slice of the Tucker core.
pub fn hosvd_basis(log: &GradientLog) -> Result<TransitionBasis> {
    if log.slices.is_empty() {
        return Err(Error::Data("gradient log is empty".into()));
    }
    if log.slices.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("gradient log contains NaN or Inf".into()));
    }
    if log.slices.iter().all(|s| s.max_abs() == 0.0) {
        return Err(Error::Data(
            "every recorded gradient is zero; calibrate for more steps or on informative data"
                .into(),
        ));
    }
    let t = log.to_tensor()?;
    let (a, _) = left_singular_vectors(&t.unfold(0)?)?;
    let (b, _) = left_singular_vectors(&t.unfold(1)?)?;
    TransitionBasis::new(
        log.role,
        a.transpose(),
        b.transpose(),
        Provenance {
            n_steps: log.steps_recorded as u32,
            n_blocks: log.n_blocks as u32,
            seed: log.seed,
            created_unix: None,
        },
    )
}
