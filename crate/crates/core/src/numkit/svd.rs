//! One-sided Jacobi SVD acting on matrix rows.
//!
//! Rotating pairs of rows until they are mutually orthogonal leaves
//! `Qᵀ·A = Σ·Vᵀ`, so the accumulated rotation `Q` holds the left singular
//! vectors and the row norms are the singular values. For very wide
//! matrices (tensor unfoldings) this yields the square left factor without
//! ever forming the right one.

use crate::error::{Error, Result};

use super::matrix::dot;
use super::Matrix;

/// Full SVD `m = u · diag(s) · vt` with square orthogonal `u` and `vt`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let (r, c) = (self.u.rows(), self.vt.cols());
        let mut us = Matrix::zeros(r, c);
        for i in 0..r {
            for (k, &s) in self.s.iter().enumerate() {
                us.set(i, k, self.u.get(i, k) * s);
            }
        }
        us.matmul(&self.vt).expect("conforming svd factors")
    }
}

/// Rotated rows plus the accumulated left rotation, sorted by descending
/// row norm with the sign convention applied.
struct RowJacobi {
    rows: Matrix,
    q: Matrix,
    norms: Vec<f64>,
}

fn check_finite(m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("svd input contains NaN or Inf".into()))
    }
}

fn row_jacobi(m: &Matrix) -> Result<RowJacobi> {
    check_finite(m)?;
    let (r, c) = m.shape();
    let mut a = m.clone();
    let mut q = Matrix::identity(r);
    let tol = f64::EPSILON * (c.max(1) as f64).sqrt();
    let max_sweeps = 100 * r.max(c).max(1);

    let mut converged = r < 2;
    let mut sweeps = 0;
    let mut residual = 0.0f64;
    while !converged {
        if sweeps == max_sweeps {
            return Err(Error::Convergence {
                sweeps,
                residual,
            });
        }
        sweeps += 1;
        converged = true;
        residual = 0.0;
        for i in 0..r - 1 {
            for j in i + 1..r {
                let (alpha, beta, gamma) = {
                    let (ai, aj) = (a.row(i), a.row(j));
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in ai.iter().zip(aj) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate_rows(&mut a, i, j, cs, sn);
                rotate_cols(&mut q, i, j, cs, sn);
            }
        }
    }

    let norms: Vec<f64> = (0..r).map(|i| dot(a.row(i), a.row(i)).sqrt()).collect();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let rows = a.select_rows(&order);
    let q = Matrix::from_fn(r, r, |i, k| q.get(i, order[k]));
    let norms = order.iter().map(|&k| norms[k]).collect();
    Ok(RowJacobi { rows, q, norms })
}

fn rotate_rows(a: &mut Matrix, i: usize, j: usize, cs: f64, sn: f64) {
    let c = a.cols();
    let data = a.data_mut();
    let (head, tail) = data.split_at_mut(j * c);
    let ri = &mut head[i * c..(i + 1) * c];
    let rj = &mut tail[..c];
    for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = cs * xi - sn * yj;
        *y = sn * xi + cs * yj;
    }
}

fn rotate_cols(q: &mut Matrix, i: usize, j: usize, cs: f64, sn: f64) {
    for row in 0..q.rows() {
        let (qi, qj) = (q.get(row, i), q.get(row, j));
        q.set(row, i, cs * qi - sn * qj);
        q.set(row, j, sn * qi + cs * qj);
    }
}

/// Index of the first entry of largest magnitude.
fn pivot(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_abs = -1.0;
    for (k, v) in values.enumerate() {
        if v.abs() > best_abs {
            best = k;
            best_abs = v.abs();
        }
    }
    best
}

/// Flips column `k` of `u` (and row `k` of `paired`, when present) so the
/// largest-magnitude entry of every left singular vector is positive.
fn normalize_signs(u: &mut Matrix, mut paired: Option<&mut Matrix>) {
    for k in 0..u.cols() {
        let p = pivot((0..u.rows()).map(|i| u.get(i, k)));
        if u.get(p, k) < 0.0 {
            for i in 0..u.rows() {
                u.set(i, k, -u.get(i, k));
            }
            if let Some(vt) = paired.as_deref_mut() {
                if k < vt.rows() {
                    for v in vt.row_mut(k) {
                        *v = -*v;
                    }
                }
            }
        }
    }
}

/// Extends `basis` (orthonormal rows, possibly fewer than `n`) to a full
/// `n × n` orthogonal matrix by greedily orthogonalising the coordinate
/// vector with the largest remaining residual.
fn complete_rows(mut basis: Vec<Vec<f64>>, n: usize) -> Matrix {
    let mut residual: Vec<f64> = (0..n)
        .map(|j| 1.0 - basis.iter().map(|b| b[j] * b[j]).sum::<f64>())
        .collect();
    while basis.len() < n {
        let j = residual
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &r)| if r > best.1 { (k, r) } else { best })
            .0;
        let mut v = vec![0.0; n];
        v[j] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let p = dot(b, &v);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        for (res, x) in residual.iter_mut().zip(&v) {
            *res -= x * x;
        }
        residual[j] = f64::NEG_INFINITY;
        basis.push(v);
    }
    let data = basis.into_iter().flatten().collect();
    Matrix::new(n, n, data).expect("n rows of length n")
}

fn svd_wide(m: &Matrix) -> Result<Svd> {
    let (r, c) = m.shape();
    let RowJacobi { rows, mut q, norms } = row_jacobi(m)?;
    let cutoff = norms.first().copied().unwrap_or(0.0) * (r.max(c) as f64) * f64::EPSILON;
    let mut basis = Vec::with_capacity(c);
    for (k, &s) in norms.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            basis.push(rows.row(k).iter().map(|v| v / s).collect::<Vec<_>>());
        } else {
            break;
        }
    }
    let mut vt = complete_rows(basis, c);
    normalize_signs(&mut q, Some(&mut vt));
    Ok(Svd {
        u: q,
        s: norms,
        vt,
    })
}

/// Full singular value decomposition. Singular values come back
/// non-increasing; the largest-magnitude entry of each left singular vector
/// is positive.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if m.rows() <= m.cols() {
        return svd_wide(m);
    }
    let t = svd_wide(&m.transpose())?;
    let mut u = t.vt.transpose();
    let mut vt = t.u.transpose();
    normalize_signs(&mut u, Some(&mut vt));
    Ok(Svd { u, s: t.s, vt })
}

/// Square left factor of `m` and one singular value per left vector
/// (`rows` values, trailing ones zero when `rows > cols`).
pub fn left_singular_vectors(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let RowJacobi { mut q, norms, .. } = row_jacobi(m)?;
    normalize_signs(&mut q, None);
    Ok((q, norms))
}
