use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autonet::{Layer, LinearLayer, Role};
use crate::calib::TransitionBasis;
use crate::error::{Error, Result};
use crate::numkit::{householder_orthogonal, Matrix};
use crate::sparsegrad::{SparseGradLayer, SparsifyMode, SparsifyPolicy};

/// Single-layer timing of the two SparseGrad backward paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub batch: usize,
    pub fraction: f64,
    /// Share of transformed output units carrying gradient; the rest only
    /// carry `noise`. Models the strided grad-output structure.
    pub active_fraction: f64,
    pub noise: f64,
    pub reps: usize,
    pub seed: u64,
}

impl Default for SpeedSpec {
    fn default() -> Self {
        SpeedSpec {
            d_in: 512,
            d_out: 2048,
            batch: 32,
            fraction: 0.01,
            active_fraction: 0.1,
            noise: 1e-3,
            reps: 41,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedReport {
    pub spec: SpeedSpec,
    /// Median seconds per backward call.
    pub sd_seconds: f64,
    pub reg_seconds: f64,
    pub sd_steps_per_sec: f64,
    pub reg_steps_per_sec: f64,
    /// `sd_steps_per_sec / reg_steps_per_sec`.
    pub ratio: f64,
    pub sd_nnz: usize,
    pub reg_nnz: usize,
    /// Support overlap between the two paths' last gradients.
    pub shared_support: usize,
}

/// Times the backward passes of both paths on the same layer, input and
/// upstream gradient. Only the backward call is inside the clock.
pub fn layer_speed_benchmark(spec: &SpeedSpec) -> Result<SpeedReport> {
    if spec.reps == 0 || spec.batch == 0 || !(spec.active_fraction > 0.0 && spec.active_fraction <= 1.0) {
        return Err(Error::Config("speed benchmark needs reps, batch >= 1 and active fraction in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u = householder_orthogonal(spec.d_in, 4, spec.seed ^ 0x5eed_0001)?;
    let v = householder_orthogonal(spec.d_out, 4, spec.seed ^ 0x5eed_0002)?;
    let basis = Arc::new(TransitionBasis::new_unchecked(Role::Up, u, v));

    let lin = LinearLayer::random(spec.d_in, spec.d_out, &mut rng);
    let w_tilde_t = basis.transform(&lin.w_t)?;
    let policy = |mode| SparsifyPolicy::new(mode, spec.fraction);
    let mut sd = SparseGradLayer::from_parts(
        w_tilde_t.clone(),
        lin.bias.clone(),
        basis.clone(),
        policy(SparsifyMode::GradOutputTopK),
    )?;
    let mut reg = SparseGradLayer::from_parts(
        w_tilde_t,
        lin.bias,
        basis.clone(),
        policy(SparsifyMode::WeightGradTopK),
    )?;
    sd.policy.validate(spec.d_in, spec.d_out)?;

    let x = Matrix::random_normal(spec.batch, spec.d_in, 1.0, &mut rng);
    // G̃ = S + noise with S supported on a few output units; ∂L/∂Y = G̃·V.
    let active = ((spec.active_fraction * spec.d_out as f64).ceil() as usize).clamp(1, spec.d_out);
    let mut g_tilde = Matrix::random_normal(spec.batch, spec.d_out, spec.noise, &mut rng);
    for j in sample(&mut rng, spec.d_out, active) {
        for b in 0..spec.batch {
            let z = Matrix::random_normal(1, 1, 1.0, &mut rng).get(0, 0);
            g_tilde.set(b, j, z);
        }
    }
    let grad_y = g_tilde.matmul(basis.v())?;

    // Warm-up, then alternate the two paths so drift hits both equally.
    sd.forward(&x)?;
    let (_, sd_warm) = sd.backward(&grad_y)?;
    reg.forward(&x)?;
    let (_, reg_warm) = reg.backward(&grad_y)?;
    let mut sd_times = Vec::with_capacity(spec.reps);
    let mut reg_times = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        for (layer, times) in [(&mut sd, &mut sd_times), (&mut reg, &mut reg_times)] {
            layer.forward(&x)?;
            let t0 = Instant::now();
            let out = layer.backward(&grad_y)?;
            times.push(t0.elapsed().as_secs_f64());
            drop(out);
        }
    }
    let (sd_grad, reg_grad) = (sd_warm.grad_w_tilde_t, reg_warm.grad_w_tilde_t);
    let sd_seconds = median(&mut sd_times);
    let reg_seconds = median(&mut reg_times);

    let reg_support: std::collections::BTreeSet<(u32, u32)> =
        reg_grad.entries().iter().map(|e| (e.row, e.col)).collect();
    let shared_support = sd_grad
        .entries()
        .iter()
        .filter(|e| reg_support.contains(&(e.row, e.col)))
        .count();
    let per_sec = |s: f64| 1.0 / s.max(f64::MIN_POSITIVE);
    Ok(SpeedReport {
        spec: spec.clone(),
        sd_seconds,
        reg_seconds,
        sd_steps_per_sec: per_sec(sd_seconds),
        reg_steps_per_sec: per_sec(reg_seconds),
        ratio: per_sec(sd_seconds) / per_sec(reg_seconds),
        sd_nnz: sd_grad.nnz(),
        reg_nnz: reg_grad.nnz(),
        shared_support,
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
