use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

/// Register tile of `C`.
const MR: usize = 4;
const NR: usize = 16;
/// Inner-index and column blocking.
const KC: usize = 256;
const NC: usize = 256;

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`. Panels of `a`
/// and strips of `b` are packed and multiplied in `MR × NR` register tiles; every
/// `c[i][j]` still receives its products one at a time in ascending inner
/// index, so the result matches the textbook triple loop bit for bit.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F, checked just above.
            unsafe { gemm_acc_avx512(a, b, c, m, k, n) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above. Rust never
            // fuses the separate multiply and add, so rounding is unchanged.
            unsafe { gemm_acc_avx2(a, b, c, m, k, n) };
            return;
        }
    }
    gemm_acc_impl(a, b, c, m, k, n, micro_kernel)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_acc_avx512(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    // SAFETY: callers only get here on CPUs with AVX-512F.
    gemm_acc_impl(a, b, c, m, k, n, |ap, bp, kc, acc| unsafe {
        micro_kernel_avx512(ap, bp, kc, acc)
    })
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_acc_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc_impl(a, b, c, m, k, n, micro_kernel)
}

#[inline(always)]
fn gemm_acc_impl(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    kernel: impl Fn(&[f64], &[f64], usize, &mut [[f64; NR]; MR]),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let m_pad = m.div_ceil(MR) * MR;
    let mut ap = vec![0.0; m_pad * KC];
    let mut bp = vec![0.0; NR * KC];
    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            // A panel as MR-tall row strips, each kc × MR.
            for (s, ir) in (0..m).step_by(MR).enumerate() {
                let strip = &mut ap[s * MR * kc..(s + 1) * MR * kc];
                let h = MR.min(m - ir);
                for p in 0..kc {
                    for r in 0..MR {
                        strip[p * MR + r] = if r < h { a[(ir + r) * k + pc + p] } else { 0.0 };
                    }
                }
            }
            for jr in (0..nc).step_by(NR) {
                let w = NR.min(nc - jr);
                // One kc × NR strip of B, packed so it stays in L1 while
                // every A strip passes over it.
                for p in 0..kc {
                    let src = &b[(pc + p) * n + jc + jr..(pc + p) * n + jc + jr + w];
                    let dst = &mut bp[p * NR..p * NR + NR];
                    dst[..w].copy_from_slice(src);
                    dst[w..].fill(0.0);
                }
                for (si, ir) in (0..m).step_by(MR).enumerate() {
                    let h = MR.min(m - ir);
                    let astrip = &ap[si * MR * kc..(si + 1) * MR * kc];
                    let mut acc = [[0.0f64; NR]; MR];
                    for r in 0..h {
                        let row = (ir + r) * n + jc + jr;
                        acc[r][..w].copy_from_slice(&c[row..row + w]);
                    }
                    kernel(astrip, &bp, kc, &mut acc);
                    for r in 0..h {
                        let row = (ir + r) * n + jc + jr;
                        c[row..row + w].copy_from_slice(&acc[r][..w]);
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(ap: &[f64], bp: &[f64], kc: usize, acc: &mut [[f64; NR]; MR]) {
    let mut t = *acc;
    for (p, av) in ap[..kc * MR].chunks_exact(MR).enumerate() {
        let av: &[f64; MR] = av.try_into().expect("MR");
        let bv: &[f64; NR] = bp[p * NR..p * NR + NR].try_into().expect("NR");
        for r in 0..MR {
            for s in 0..NR {
                t[r][s] += av[r] * bv[s];
            }
        }
    }
    *acc = t;
}

/// [`micro_kernel`] with explicit 512-bit registers: two vectors per tile
/// row. Multiplies and adds stay separate, as in the portable kernel.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn micro_kernel_avx512(ap: &[f64], bp: &[f64], kc: usize, acc: &mut [[f64; NR]; MR]) {
    use std::arch::x86_64::*;
    const { assert!(NR == 16) };
    if kc == 0 {
        return;
    }
    assert!(ap.len() >= kc * MR && bp.len() >= kc * NR);
    let (a, b) = (ap.as_ptr(), bp.as_ptr());
    let mut t = [[_mm512_setzero_pd(); 2]; MR];
    for r in 0..MR {
        t[r][0] = _mm512_loadu_pd(acc[r].as_ptr());
        t[r][1] = _mm512_loadu_pd(acc[r].as_ptr().add(8));
    }
    for p in 0..kc {
        // SAFETY: bounds asserted above.
        let (b0, b1) = unsafe { (_mm512_loadu_pd(b.add(p * NR)), _mm512_loadu_pd(b.add(p * NR + 8))) };
        for r in 0..MR {
            let av = _mm512_set1_pd(unsafe { *a.add(p * MR + r) });
            t[r][0] = _mm512_add_pd(t[r][0], _mm512_mul_pd(av, b0));
            t[r][1] = _mm512_add_pd(t[r][1], _mm512_mul_pd(av, b1));
        }
    }
    for r in 0..MR {
        _mm512_storeu_pd(acc[r].as_mut_ptr(), t[r][0]);
        _mm512_storeu_pd(acc[r].as_mut_ptr().add(8), t[r][1]);
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Standard-normal entries scaled by `std`.
    pub fn random_normal<R: rand::Rng + ?Sized>(
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        const TILE: usize = 32;
        let (r, c) = (self.rows, self.cols);
        let mut out = Matrix::zeros(c, r);
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    for j in j0..(j0 + TILE).min(c) {
                        out.data[j * r + i] = self.data[i * c + j];
                    }
                }
            }
        }
        out
    }

    /// `self · b`. Each output entry accumulates its products in ascending
    /// inner index starting from `0.0`, so the result is bit-identical to
    /// the textbook triple loop.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::shape("matmul", self.shape(), b.shape()));
        }
        let mut out = Matrix::zeros(self.rows, b.cols);
        gemm_acc(&self.data, &b.data, &mut out.data, self.rows, self.cols, b.cols);
        Ok(out)
    }

    /// `selfᵀ · b`, same accumulation order as [`Matrix::matmul`].
    pub fn matmul_tn(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(Error::shape("matmul_tn", self.shape(), b.shape()));
        }
        self.transpose().matmul(b)
    }

    /// `self · bᵀ`, same accumulation order as [`Matrix::matmul`].
    pub fn matmul_nt(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(Error::shape("matmul_nt", self.shape(), b.shape()));
        }
        self.matmul(&b.transpose())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_assign", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape("add_row_vector", self.shape(), (1, bias.len())));
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Sum over rows, one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`; `b` is the reference.
pub fn rel_frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_frobenius_diff shape");
    let num: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den = b.frobenius_norm();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// True iff `‖mᵀm − I‖_max ≤ tol`.
pub fn is_orthogonal(m: &Matrix, tol: f64) -> Result<bool> {
    if !m.is_square() {
        return Err(Error::shape("is_orthogonal", m.shape(), (m.cols, m.cols)));
    }
    let gram = m.matmul_tn(m)?;
    let n = m.cols;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            if !((gram.get(i, j) - target).abs() <= tol) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Seeded Haar-distributed orthogonal matrix (QR of a Gaussian matrix with
/// the sign of R's diagonal folded into Q).
pub fn random_orthogonal(n: usize, seed: u64) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Argument("random_orthogonal needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Work on rows of Gᵀ so each basis vector is contiguous.
    let mut q = Matrix::random_normal(n, n, 1.0, &mut rng);
    for i in 0..n {
        // Two Gram-Schmidt passes keep the result orthogonal to ~1e-15.
        for _ in 0..2 {
            for j in 0..i {
                let (head, tail) = q.data.split_at_mut(i * n);
                let prev = &head[j * n..(j + 1) * n];
                let cur = &mut tail[..n];
                let p = dot(prev, cur);
                for (c, v) in cur.iter_mut().zip(prev) {
                    *c -= p * v;
                }
            }
        }
        let row = q.row_mut(i);
        let norm = dot(row, row).sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric("degenerate gaussian draw".into()));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(q.transpose())
}

/// Product of `reflections` random Householder reflections `I − 2vvᵀ`,
/// built in O(reflections · n²). Dense and orthogonal to round-off; a
/// cheap stand-in for [`random_orthogonal`] at large `n`.
pub fn householder_orthogonal(n: usize, reflections: usize, seed: u64) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Argument("householder_orthogonal needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Matrix::identity(n);
    for _ in 0..reflections {
        let mut v = Matrix::random_normal(1, n, 1.0, &mut rng).into_data();
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric("degenerate gaussian draw".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        // Q ← Q·(I − 2vvᵀ), row by row.
        for i in 0..n {
            let row = q.row_mut(i);
            let p = 2.0 * dot(row, &v);
            for (r, vj) in row.iter_mut().zip(&v) {
                *r -= p * vj;
            }
        }
    }
    Ok(q)
}
