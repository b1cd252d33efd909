//! Independent oracles and seeded case generators shared by the integration
//! tests and the acceptance runner. Nothing here calls the library's matrix
//! products; reference values come from plain loops.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sparsegrad::autonet::{
    loss_forward_backward, Activation, Layer, LinearLayer, LossKind, ModelDims, Role, Targets, ToyModel,
};
use sparsegrad::baselines::{LoraAdapter, LoraLayer, MePropLayer};
use sparsegrad::calib::{hosvd_basis, sparsity_report, GradientLog, Provenance, TransitionBasis};
use sparsegrad::numkit::{is_orthogonal, random_orthogonal, Matrix};
use sparsegrad::optim::{AdamConfig, MaskedAdamFlags, MaskedAdamState};
use sparsegrad::sparse::{extract_pattern, restore_coo, sparse_by_dense, CooEntry, SparseCoo};
use sparsegrad::sparsegrad::{SparseGradLayer, SparsifyMode, SparsifyPolicy};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

pub fn naive_transpose(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.cols(), a.rows(), |i, j| a.get(j, i))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖got − want‖₂ / ‖want‖₂`, with an all-zero reference compared
/// absolutely.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let diff: Vec<f64> = got.iter().zip(want).map(|(a, b)| a - b).collect();
    let scale = norm(want);
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn rel_err_m(got: &Matrix, want: &Matrix) -> f64 {
    assert_eq!(got.shape(), want.shape());
    rel_err(got.data(), want.data())
}

fn orthogonal_basis(role: Role, d_in: usize, d_out: usize, seed: u64) -> Arc<TransitionBasis> {
    let u = random_orthogonal(d_in, seed).unwrap();
    let v = random_orthogonal(d_out, seed ^ 0xabcd).unwrap();
    Arc::new(TransitionBasis::new(role, u, v, Provenance::default()).unwrap())
}

/// Seeded (layer, basis, input, upstream gradient) case.
pub struct Triple {
    pub layer: LinearLayer,
    pub basis: Arc<TransitionBasis>,
    pub x: Matrix,
    pub grad_y: Matrix,
}

/// Layers up to `64 × 256` with at least `min_entries` weights.
pub fn random_triple(seed: u64, min_entries: usize) -> Triple {
    let mut r = rng(seed);
    let (d_in, d_out) = loop {
        let d_in = r.gen_range(1..=64);
        let d_out = r.gen_range(1..=256);
        if d_in * d_out >= min_entries {
            break (d_in, d_out);
        }
    };
    let batch = r.gen_range(1..=16);
    let layer = LinearLayer::new(normal(d_in, d_out, &mut r), normal(1, d_out, &mut r).into_data()).unwrap();
    Triple {
        layer,
        basis: orthogonal_basis(Role::Up, d_in, d_out, seed.wrapping_mul(31) ^ 7),
        x: normal(batch, d_in, &mut r),
        grad_y: normal(batch, d_out, &mut r),
    }
}

/// Worst relative output difference between converted and source layers.
pub fn forward_equivalence(cases: u64, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let t = random_triple(seed + c, 1);
        let y = t.layer.infer(&t.x).unwrap();
        let mut sg = SparseGradLayer::convert(&t.layer, t.basis.clone(), SparsifyPolicy::new(SparsifyMode::GradOutputTopK, 1.0)).unwrap();
        worst = worst.max(rel_err_m(&sg.infer(&t.x).unwrap(), &y));
        worst = worst.max(rel_err_m(&sg.forward(&t.x).unwrap(), &y));
    }
    worst
}

/// Worst relative grad-input difference at weight fraction `rho`, both
/// backward paths.
pub fn grad_input_equivalence(cases: u64, seed: u64, rho: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let t = random_triple(seed + c, (1.0 / rho).ceil() as usize);
        let mut plain = t.layer.clone();
        plain.forward(&t.x).unwrap();
        let (gx, _) = plain.backward(&t.grad_y).unwrap();
        for mode in [SparsifyMode::GradOutputTopK, SparsifyMode::WeightGradTopK] {
            let mut sg = SparseGradLayer::convert(&t.layer, t.basis.clone(), SparsifyPolicy::new(mode, rho)).unwrap();
            sg.forward(&t.x).unwrap();
            let (sgx, grads) = sg.backward(&t.grad_y).unwrap();
            assert!(grads.grad_w_tilde_t.nnz() <= (rho * (t.layer.d_in() * t.layer.d_out()) as f64).ceil() as usize);
            worst = worst.max(rel_err_m(&sgx, &gx));
        }
    }
    worst
}

/// Worst relative difference between the densified ρ = 1 weight gradient
/// and `V·(∂L/∂Y)ᵀ·X·Uᵀ` from explicit loops.
pub fn weight_grad_formula(cases: u64, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let t = random_triple(seed + c, 1);
        let mut sg = SparseGradLayer::convert(&t.layer, t.basis.clone(), SparsifyPolicy::new(SparsifyMode::WeightGradTopK, 1.0)).unwrap();
        sg.forward(&t.x).unwrap();
        let (_, grads) = sg.backward_regular(&t.grad_y).unwrap();
        let got = naive_transpose(&grads.grad_w_tilde_t.densify());
        let v = t.basis.v();
        let u_t = naive_transpose(t.basis.u());
        let want = naive_matmul(
            &naive_matmul(&naive_matmul(v, &naive_transpose(&t.grad_y)), &t.x),
            &u_t,
        );
        worst = worst.max(rel_err_m(&got, &want));
    }
    worst
}

// Finite differences.

const FD_STEP: f64 = 1e-6;

/// Central differences of `f` at the listed coordinates of `p`.
pub fn central_diff(p: &[f64], idx: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    idx.iter()
        .map(|&i| {
            let h = FD_STEP * p[i].abs().max(1.0);
            q[i] = p[i] + h;
            let up = f(&q);
            q[i] = p[i] - h;
            let down = f(&q);
            q[i] = p[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn sample_idx(n: usize, k: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(r, n, k).into_vec()
}

/// `Σ Y ⊙ R`, so `∂L/∂Y = R`.
fn probe_loss(y: &Matrix, r: &Matrix) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn check(analytic: &[f64], p: &[f64], idx: &[usize], f: impl FnMut(&[f64]) -> f64) -> f64 {
    let fd = central_diff(p, idx, f);
    let a: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    rel_err(&a, &fd)
}

fn with_data(m: &Matrix, data: &[f64]) -> Matrix {
    Matrix::new(m.rows(), m.cols(), data.to_vec()).unwrap()
}

pub struct FdResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn small_dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (r.gen_range(2..=6), r.gen_range(2..=7), r.gen_range(1..=5))
}

pub fn fd_linear(instances: usize, seed: u64) -> FdResult {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(seed + i as u64);
        let (d_in, d_out, n) = small_dims(&mut r);
        let layer = LinearLayer::new(normal(d_in, d_out, &mut r), normal(1, d_out, &mut r).into_data()).unwrap();
        let x = normal(n, d_in, &mut r);
        let probe = normal(n, d_out, &mut r);
        let mut l = layer.clone();
        l.forward(&x).unwrap();
        let (gx, g) = l.backward(&probe).unwrap();
        let all = |len| (0..len).collect::<Vec<_>>();
        worst = worst.max(check(g.grad_w_t.data(), layer.w_t.data(), &all(d_in * d_out), |p| {
            let l = LinearLayer::new(with_data(&layer.w_t, p), layer.bias.clone()).unwrap();
            probe_loss(&l.infer(&x).unwrap(), &probe)
        }));
        worst = worst.max(check(&g.grad_b, &layer.bias, &all(d_out), |p| {
            let l = LinearLayer::new(layer.w_t.clone(), p.to_vec()).unwrap();
            probe_loss(&l.infer(&x).unwrap(), &probe)
        }));
        worst = worst.max(check(gx.data(), x.data(), &all(n * d_in), |p| {
            probe_loss(&layer.infer(&with_data(&x, p)).unwrap(), &probe)
        }));
    }
    FdResult {
        name: "autonet linear",
        instances,
        worst,
    }
}

pub fn fd_activation(instances: usize, seed: u64) -> FdResult {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(seed + i as u64);
        for act in [Activation::GeluTanh, Activation::Relu] {
            // Keep ReLU inputs away from its kink.
            let pre = Matrix::from_fn(3, 4, |_, _| {
                let z: f64 = r.sample(StandardNormal);
                if z.abs() < 0.05 {
                    z.signum() * 0.05 + z
                } else {
                    z
                }
            });
            let up = normal(3, 4, &mut r);
            let g = act.backward(&pre, &up).unwrap();
            let idx: Vec<usize> = (0..12).collect();
            worst = worst.max(check(g.data(), pre.data(), &idx, |p| {
                probe_loss(&act.forward(&with_data(&pre, p)), &up)
            }));
        }
    }
    FdResult {
        name: "autonet activations",
        instances,
        worst,
    }
}

pub fn fd_loss(instances: usize, seed: u64) -> FdResult {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(seed + i as u64);
        let (n, c) = (r.gen_range(1..=6), r.gen_range(2..=5));
        let logits = normal(n, c, &mut r);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let ce = Targets::Classes(labels);
        let mse = Targets::Values(normal(n, c, &mut r));
        let idx: Vec<usize> = (0..n * c).collect();
        for (kind, t) in [(LossKind::SoftmaxCrossEntropy, &ce), (LossKind::Mse, &mse)] {
            let (_, g) = loss_forward_backward(kind, &logits, t).unwrap();
            worst = worst.max(check(g.data(), logits.data(), &idx, |p| {
                loss_forward_backward(kind, &with_data(&logits, p), t).unwrap().0
            }));
        }
    }
    FdResult {
        name: "autonet losses",
        instances,
        worst,
    }
}

pub fn fd_model(instances: usize, seed: u64) -> FdResult {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(seed + i as u64);
        let dims = ModelDims {
            d: r.gen_range(2..=5),
            h: r.gen_range(2..=7),
            n_blocks: r.gen_range(1..=3),
            classes: r.gen_range(2..=4),
        };
        let model = ToyModel::random(dims, Activation::GeluTanh, seed ^ i as u64);
        let n = r.gen_range(1..=5);
        let x = normal(n, dims.d, &mut r);
        let t = Targets::Classes((0..n).map(|_| r.gen_range(0..dims.classes)).collect());
        let grads = model.clone().forward_backward(&x, &t).unwrap();
        let loss_of = |m: &ToyModel| loss_forward_backward(LossKind::SoftmaxCrossEntropy, &m.infer(&x).unwrap(), &t).unwrap().0;

        let mut params: Vec<(Matrix, Matrix)> = Vec::new();
        for (b, g) in model.blocks.iter().zip(&grads.blocks) {
            params.push((b.up.w_t.clone(), g.up.grad_w_t.clone()));
            params.push((b.down.w_t.clone(), g.down.grad_w_t.clone()));
        }
        params.push((model.head.w_t.clone(), grads.head.grad_w_t.clone()));
        for (k, (w, g)) in params.iter().enumerate() {
            let idx = sample_idx(w.data().len(), 8, &mut r);
            worst = worst.max(check(g.data(), w.data(), &idx, |p| {
                let mut m = model.clone();
                let target = if k == 2 * m.blocks.len() {
                    &mut m.head.w_t
                } else if k % 2 == 0 {
                    &mut m.blocks[k / 2].up.w_t
                } else {
                    &mut m.blocks[k / 2].down.w_t
                };
                *target = with_data(w, p);
                loss_of(&m)
            }));
        }
        let b0 = &model.blocks[0].up.bias;
        worst = worst.max(check(&grads.blocks[0].up.grad_b, b0, &(0..b0.len()).collect::<Vec<_>>(), |p| {
            let mut m = model.clone();
            m.blocks[0].up.bias = p.to_vec();
            loss_of(&m)
        }));
    }
    FdResult {
        name: "autonet model",
        instances,
        worst,
    }
}

pub fn fd_meprop(instances: usize, seed: u64) -> FdResult {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(seed + i as u64);
        let (d_in, d_out, n) = small_dims(&mut r);
        let inner = LinearLayer::new(normal(d_in, d_out, &mut r), normal(1, d_out, &mut r).into_data()).unwrap();
        let x = normal(n, d_in, &mut r);
        let probe = normal(n, d_out, &mut r);
        let mut l = MePropLayer::new(inner.clone(), 1.0).unwrap();
        l.forward(&x).unwrap();
        let (gx, g) = l.backward(&probe).unwrap();
        let all = |len| (0..len).collect::<Vec<_>>();
        worst = worst.max(check(g.grad_w_t.densify().data(), inner.w_t.data(), &all(d_in * d_out), |p| {
            let l = MePropLayer::new(LinearLayer::new(with_data(&inner.w_t, p), inner.bias.clone()).unwrap(), 1.0).unwrap();
            probe_loss(&l.infer(&x).unwrap(), &probe)
        }));
        worst = worst.max(check(&g.grad_b, &inner.bias, &all(d_out), |p| {
            let l = LinearLayer::new(inner.w_t.clone(), p.to_vec()).unwrap();
            probe_loss(&l.infer(&x).unwrap(), &probe)
        }));
        worst = worst.max(check(gx.data(), x.data(), &all(n * d_in), |p| {
            probe_loss(&l.infer(&with_data(&x, p)).unwrap(), &probe)
        }));
    }
    FdResult {
        name: "baselines meprop",
        instances,
        worst,
    }
}

pub fn fd_lora(instances: usize, seed: u64) -> FdResult {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(seed + i as u64);
        let (d_in, d_out, n) = small_dims(&mut r);
        let rank = r.gen_range(1..=d_in.min(d_out));
        let base = LinearLayer::new(normal(d_in, d_out, &mut r), normal(1, d_out, &mut r).into_data()).unwrap();
        let a = normal(rank, d_in, &mut r);
        let b = normal(d_out, rank, &mut r);
        let alpha = r.gen_range(0.5..4.0);
        let make = |a: &Matrix, b: &Matrix| LoraLayer::new(base.clone(), LoraAdapter::from_factors(a.clone(), b.clone(), alpha).unwrap()).unwrap();
        let x = normal(n, d_in, &mut r);
        let probe = normal(n, d_out, &mut r);
        let mut l = make(&a, &b);
        l.forward(&x).unwrap();
        let (gx, g) = l.backward(&probe).unwrap();
        let all = |len| (0..len).collect::<Vec<_>>();
        worst = worst.max(check(g.grad_a.data(), a.data(), &all(a.data().len()), |p| {
            probe_loss(&make(&with_data(&a, p), &b).infer(&x).unwrap(), &probe)
        }));
        worst = worst.max(check(g.grad_b.data(), b.data(), &all(b.data().len()), |p| {
            probe_loss(&make(&a, &with_data(&b, p)).infer(&x).unwrap(), &probe)
        }));
        worst = worst.max(check(gx.data(), x.data(), &all(n * d_in), |p| {
            probe_loss(&l.infer(&with_data(&x, p)).unwrap(), &probe)
        }));
    }
    FdResult {
        name: "baselines lora",
        instances,
        worst,
    }
}

pub fn fd_sparsegrad(instances: usize, seed: u64) -> FdResult {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(seed + i as u64);
        let (d_in, d_out, n) = small_dims(&mut r);
        let basis = orthogonal_basis(Role::Up, d_in, d_out, seed + 1000 + i as u64);
        let w = normal(d_in, d_out, &mut r);
        let bias = normal(1, d_out, &mut r).into_data();
        let x = normal(n, d_in, &mut r);
        let probe = normal(n, d_out, &mut r);
        for mode in [SparsifyMode::GradOutputTopK, SparsifyMode::WeightGradTopK] {
            let policy = SparsifyPolicy::new(mode, 1.0);
            let make = |w: &Matrix, b: &[f64]| SparseGradLayer::from_parts(w.clone(), b.to_vec(), basis.clone(), policy).unwrap();
            let mut l = make(&w, &bias);
            l.forward(&x).unwrap();
            let (gx, g) = l.backward(&probe).unwrap();
            let all = |len| (0..len).collect::<Vec<_>>();
            worst = worst.max(check(g.grad_w_tilde_t.densify().data(), w.data(), &all(d_in * d_out), |p| {
                probe_loss(&make(&with_data(&w, p), &bias).infer(&x).unwrap(), &probe)
            }));
            worst = worst.max(check(&g.grad_b, &bias, &all(d_out), |p| {
                probe_loss(&make(&w, p).infer(&x).unwrap(), &probe)
            }));
            worst = worst.max(check(gx.data(), x.data(), &all(n * d_in), |p| {
                probe_loss(&l.infer(&with_data(&x, p)).unwrap(), &probe)
            }));
        }
    }
    FdResult {
        name: "sparsegrad (rho = 1)",
        instances,
        worst,
    }
}

pub fn fd_all(instances: usize, seed: u64) -> Vec<FdResult> {
    vec![
        fd_linear(instances, seed),
        fd_activation(instances, seed + 10_000),
        fd_loss(instances, seed + 20_000),
        fd_model(instances, seed + 30_000),
        fd_meprop(instances, seed + 40_000),
        fd_lora(instances, seed + 50_000),
        fd_sparsegrad(instances, seed + 60_000),
    ]
}

// Strided sparse-by-dense.

pub struct StridedOutcome {
    pub worst: f64,
    pub off_pattern_exact_zero: bool,
}

/// Random `A` with whole zero rows and columns, dense `B`; the restored
/// compressed product against loops over the full `A`.
pub fn strided_cases(cases: u64, seed: u64) -> StridedOutcome {
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for c in 0..cases {
        let mut r = rng(seed + c);
        let (rows, inner, cols) = (r.gen_range(1..=40), r.gen_range(1..=40), r.gen_range(1..=30));
        let row_on: Vec<bool> = (0..rows).map(|_| r.gen_bool(0.3)).collect();
        let col_on: Vec<bool> = (0..inner).map(|_| r.gen_bool(0.4)).collect();
        let a = Matrix::from_fn(rows, inner, |i, j| {
            if row_on[i] && col_on[j] {
                r.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        });
        let b = normal(inner, cols, &mut r);
        let (pattern, compressed) = extract_pattern(&a, 0.0);
        let (prod, row_map) = sparse_by_dense(&pattern, &compressed, &b).unwrap();
        let got = restore_coo(&prod, &row_map, rows, None).unwrap().densify();
        let want = naive_matmul(&a, &b);
        worst = worst.max(rel_err_m(&got, &want));
        for i in 0..rows {
            if !pattern.nz_rows.contains(&i) && got.row(i).iter().any(|&v| v != 0.0) {
                exact = false;
            }
        }
    }
    StridedOutcome {
        worst,
        off_pattern_exact_zero: exact,
    }
}

// Planted HOSVD structure.

pub struct PlantedOutcome {
    pub orthogonal: bool,
    pub mean_original: f64,
    pub mean_transformed: f64,
}

/// Slices `P·S_k·Qᵀ` with orthogonal `P`, `Q` and cores `S_k` supported
/// on a fixed small block.
pub fn planted_hosvd(seed: u64, d_in: usize, d_out: usize, slices: usize) -> PlantedOutcome {
    let mut r = rng(seed);
    let p = random_orthogonal(d_in, seed ^ 1).unwrap();
    let q = random_orthogonal(d_out, seed ^ 2).unwrap();
    let (br, bc) = (4.min(d_in), 8.min(d_out));
    let mut log = GradientLog::new(Role::Up, d_in, d_out, 1);
    for _ in 0..slices {
        let core = Matrix::from_fn(d_in, d_out, |i, j| {
            if i < br && j < bc {
                r.sample::<f64, _>(StandardNormal) * (1.0 + i as f64 + 0.5 * j as f64)
            } else {
                0.0
            }
        });
        let g = naive_matmul(&naive_matmul(&p, &core), &naive_transpose(&q));
        log.push_step(vec![g]).unwrap();
    }
    let basis = hosvd_basis(&log).unwrap();
    let orthogonal = is_orthogonal(basis.u(), 1e-8).unwrap() && is_orthogonal(basis.v(), 1e-8).unwrap();
    let report = sparsity_report(&log, &basis, 0.01).unwrap();
    PlantedOutcome {
        orthogonal,
        mean_original: report.mean_original,
        mean_transformed: report.mean_transformed,
    }
}

// Masked Adam against a scalar reference.

/// Scalar Adam with decoupled decay, one coordinate.
#[derive(Clone, Copy, Default)]
pub struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn step(&mut self, p: f64, g: f64, c: &AdamConfig) -> f64 {
        self.t += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let m_hat = self.m / (1.0 - c.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - c.beta2.powi(self.t));
        let p = p - c.lr * c.weight_decay * p;
        p - c.lr * m_hat / (v_hat.sqrt() + c.eps)
    }
}

/// Worst per-step deviation, scaled by `max(1, |p|)`, of masked Adam from
/// the scalar reference on a constant support; off-support weights must
/// not move at all.
pub fn masked_adam_sequences(sequences: u64, steps: usize, seed: u64) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut untouched = true;
    for s in 0..sequences {
        let mut r = rng(seed + s);
        let (rows, cols) = (r.gen_range(1..=12), r.gen_range(1..=12));
        let n = rows * cols;
        let k = r.gen_range(1..=n);
        let support = sample_idx(n, k, &mut r);
        let decay = s % 2 == 1;
        let cfg = AdamConfig {
            lr: r.gen_range(1e-4..1e-1),
            weight_decay: if decay { 0.01 } else { 0.0 },
            ..AdamConfig::default()
        };
        let flags = MaskedAdamFlags {
            sparse_weight_decay: decay,
            global_step_bias_correction: s % 3 == 0,
        };
        let mut w = normal(rows, cols, &mut r);
        let start = w.clone();
        let mut reference: Vec<(usize, f64, ScalarAdam)> = support.iter().map(|&i| (i, w.data()[i], ScalarAdam::default())).collect();
        let mut state = MaskedAdamState::new(rows, cols, flags);
        for _ in 0..steps {
            let entries: Vec<CooEntry> = support
                .iter()
                .map(|&i| CooEntry {
                    row: (i / cols) as u32,
                    col: (i % cols) as u32,
                    value: r.sample::<f64, _>(StandardNormal),
                })
                .collect();
            let grad = SparseCoo::from_triplets(rows, cols, entries.clone()).unwrap();
            let delta = state.step(&w, &grad, &cfg).unwrap();
            delta.add_into(&mut w).unwrap();
            for ((_, p, adam), e) in reference.iter_mut().zip(&entries) {
                *p = adam.step(*p, e.value, &cfg);
            }
            for &(i, p, _) in &reference {
                worst = worst.max((w.data()[i] - p).abs() / p.abs().max(1.0));
            }
        }
        for i in 0..n {
            if !support.contains(&i) && w.data()[i] != start.data()[i] {
                untouched = false;
            }
        }
    }
    (worst, untouched)
}

// Optimizer state under a stable mask.

pub struct StableMaskOutcome {
    pub nnz_per_step: Vec<usize>,
    pub touched: usize,
    pub masked_bytes: usize,
    pub dense_bytes: usize,
}

/// Converted layer fed inputs and upstream gradients whose transformed
/// versions live on fixed coordinate sets, so the kept weight-gradient
/// entries are the same every step. Runs the sparse-by-dense backward and
/// masked Adam, then compares optimizer bytes with dense Adam moments for
/// the same layer.
pub fn stable_mask_memory(d_in: usize, d_out: usize, batch: usize, rho: f64, steps: usize, seed: u64) -> StableMaskOutcome {
    use sparsegrad::numkit::householder_orthogonal;
    use sparsegrad::optim::{optimizer_memory_report, sparse_adam_step, AdamState, StateRef};

    let mut r = rng(seed);
    let u = householder_orthogonal(d_in, 4, seed ^ 11).unwrap();
    let v = householder_orthogonal(d_out, 4, seed ^ 12).unwrap();
    let basis = Arc::new(TransitionBasis::new(Role::Up, u.clone(), v.clone(), Provenance::default()).unwrap());
    let k = (rho * (d_in * d_out) as f64).ceil() as usize;
    // Active input and output coordinates whose product is exactly the
    // budget, so rounding noise never enters the kept set.
    // The grad-output top-k keeps √ρ of G̃, so at most that many units may
    // be active per row.
    let n_out = (1..=((rho.sqrt() * d_out as f64) as usize).min(k))
        .rev()
        .find(|&o| k % o == 0 && k / o <= d_in)
        .expect("budget factors into the layer shape");
    let n_in = k / n_out;
    let ins = sample_idx(d_in, n_in, &mut r);
    let outs = sample_idx(d_out, n_out, &mut r);

    let mut layer = SparseGradLayer::from_parts(
        normal(d_in, d_out, &mut r).scale(0.01),
        vec![0.0; d_out],
        basis,
        SparsifyPolicy::new(SparsifyMode::GradOutputTopK, rho),
    )
    .unwrap();
    let mut state = MaskedAdamState::new(d_in, d_out, MaskedAdamFlags::default());
    let cfg = AdamConfig::default();
    let mut nnz_per_step = Vec::new();
    for _ in 0..steps {
        let mut x_t = Matrix::zeros(batch, d_in);
        let mut g_t = Matrix::zeros(batch, d_out);
        for b in 0..batch {
            for &i in &ins {
                x_t.set(b, i, r.sample(StandardNormal));
            }
            for &j in &outs {
                g_t.set(b, j, r.sample(StandardNormal));
            }
        }
        // X̃ = X·Uᵀ and G̃ = (∂L/∂Y)·Vᵀ, so X = X̃·U and ∂L/∂Y = G̃·V.
        let x = x_t.matmul(&u).unwrap();
        let grad_y = g_t.matmul(&v).unwrap();
        layer.forward(&x).unwrap();
        let (_, grads) = layer.backward(&grad_y).unwrap();
        nnz_per_step.push(grads.grad_w_tilde_t.nnz());
        sparse_adam_step(&mut layer, &grads.grad_w_tilde_t, &mut state, &cfg).unwrap();
    }
    let dense = AdamState::new(d_in * d_out);
    let masked = optimizer_memory_report([("layer", StateRef::Masked(&state))]);
    let reference = optimizer_memory_report([("layer", StateRef::Dense(&dense))]);
    StableMaskOutcome {
        nnz_per_step,
        touched: state.touched(),
        masked_bytes: masked.total_bytes(),
        dense_bytes: reference.total_bytes(),
    }
}
