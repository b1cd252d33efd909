use crate::error::{Error, Result};

use super::Matrix;

/// Order-3 tensor stored as `d2` stacked `d0 × d1` row-major slices.
///
/// Unfolding column order is slice-major:
/// * mode 0 is `d0 × (d1·d2)`, column `k·d1 + j` holds `slice_k[i][j]`;
/// * mode 1 is `d1 × (d0·d2)`, column `k·d0 + i` holds `slice_k[i][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    d0: usize,
    d1: usize,
    d2: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(d0: usize, d1: usize, d2: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != d0 * d1 * d2 {
            return Err(Error::Argument(format!(
                "tensor {d0}x{d1}x{d2} needs {} values, got {}",
                d0 * d1 * d2,
                data.len()
            )));
        }
        Ok(Tensor3 { d0, d1, d2, data })
    }

    pub fn from_slices(slices: &[Matrix]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Argument("tensor needs at least one slice".into()))?;
        let (d0, d1) = first.shape();
        let mut data = Vec::with_capacity(d0 * d1 * slices.len());
        for s in slices {
            if s.shape() != (d0, d1) {
                return Err(Error::shape("Tensor3::from_slices", (d0, d1), s.shape()));
            }
            data.extend_from_slice(s.data());
        }
        Ok(Tensor3 {
            d0,
            d1,
            d2: slices.len(),
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d0, self.d1, self.d2)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(k * self.d0 + i) * self.d1 + j]
    }

    pub fn slice(&self, k: usize) -> Matrix {
        let n = self.d0 * self.d1;
        Matrix::new(self.d0, self.d1, self.data[k * n..(k + 1) * n].to_vec())
            .expect("slice length is d0*d1")
    }

    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        let (d0, d1, d2) = self.dims();
        match mode {
            0 => {
                let cols = d1 * d2;
                let mut out = Matrix::zeros(d0, cols);
                for k in 0..d2 {
                    for i in 0..d0 {
                        let src = &self.data[(k * d0 + i) * d1..(k * d0 + i + 1) * d1];
                        out.row_mut(i)[k * d1..(k + 1) * d1].copy_from_slice(src);
                    }
                }
                Ok(out)
            }
            1 => {
                let cols = d0 * d2;
                let mut out = Matrix::zeros(d1, cols);
                for k in 0..d2 {
                    for i in 0..d0 {
                        for j in 0..d1 {
                            out.set(j, k * d0 + i, self.get(i, j, k));
                        }
                    }
                }
                Ok(out)
            }
            _ => Err(Error::Argument(format!(
                "unfold mode must be 0 or 1, got {mode}"
            ))),
        }
    }

    /// Inverse of [`Tensor3::unfold`].
    pub fn fold(m: &Matrix, mode: usize, d0: usize, d1: usize, d2: usize) -> Result<Self> {
        let expected = match mode {
            0 => (d0, d1 * d2),
            1 => (d1, d0 * d2),
            _ => {
                return Err(Error::Argument(format!(
                    "fold mode must be 0 or 1, got {mode}"
                )))
            }
        };
        if m.shape() != expected {
            return Err(Error::shape("Tensor3::fold", expected, m.shape()));
        }
        let mut data = vec![0.0; d0 * d1 * d2];
        for k in 0..d2 {
            for i in 0..d0 {
                for j in 0..d1 {
                    data[(k * d0 + i) * d1 + j] = if mode == 0 {
                        m.get(i, k * d1 + j)
                    } else {
                        m.get(j, k * d0 + i)
                    };
                }
            }
        }
        Tensor3::new(d0, d1, d2, data)
    }
}
