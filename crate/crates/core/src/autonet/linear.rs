use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

use super::Layer;

/// `Y = X·Wᵀ + b`, storing the transposed weight `w_t` (`d_in × d_out`).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub w_t: Matrix,
    pub bias: Vec<f64>,
    cache: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    /// Gradient of `Wᵀ`, shape `d_in × d_out`.
    pub grad_w_t: Matrix,
    pub grad_b: Vec<f64>,
    /// Cached forward input `X`.
    pub input: Matrix,
    pub grad_y: Matrix,
}

impl LinearGrads {
    /// Gradient of `W`, shape `d_out × d_in`.
    pub fn grad_w(&self) -> Matrix {
        self.grad_w_t.transpose()
    }
}

impl LinearLayer {
    pub fn new(w_t: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != w_t.cols() {
            return Err(Error::shape("LinearLayer::new", w_t.shape(), (1, bias.len())));
        }
        Ok(LinearLayer {
            w_t,
            bias,
            cache: None,
        })
    }

    pub fn without_bias(w_t: Matrix) -> Self {
        let bias = vec![0.0; w_t.cols()];
        LinearLayer {
            w_t,
            bias,
            cache: None,
        }
    }

    /// Gaussian init with std `1/√d_in`, zero bias.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        LinearLayer::without_bias(Matrix::random_normal(d_in, d_out, std, rng))
    }

    pub fn has_pending_forward(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_tape(&mut self) {
        self.cache = None;
    }
}

impl Layer for LinearLayer {
    type Grads = LinearGrads;

    fn d_in(&self) -> usize {
        self.w_t.rows()
    }

    fn d_out(&self) -> usize {
        self.w_t.cols()
    }

    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::shape("linear_forward", x.shape(), self.w_t.shape()));
        }
        let mut y = x.matmul(&self.w_t)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_y: &Matrix) -> Result<(Matrix, LinearGrads)> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| Error::State("linear backward without a pending forward".into()))?;
        if grad_y.shape() != (input.rows(), self.d_out()) {
            return Err(Error::shape(
                "linear_backward",
                (input.rows(), self.d_out()),
                grad_y.shape(),
            ));
        }
        let grad_w_t = input.matmul_tn(grad_y)?;
        let grad_x = grad_y.matmul_nt(&self.w_t)?;
        let grads = LinearGrads {
            grad_w_t,
            grad_b: grad_y.column_sums(),
            input,
            grad_y: grad_y.clone(),
        };
        Ok((grad_x, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_hand_cases() {
        let l = LinearLayer::without_bias(Matrix::identity(2));
        let x = Matrix::from_rows(&[[2.0, 3.0]]);
        assert_eq!(l.infer(&x).unwrap(), x);
        let l = LinearLayer::without_bias(Matrix::from_rows(&[[4.0, 5.0], [6.0, 7.0]]));
        assert_eq!(
            l.infer(&Matrix::from_rows(&[[1.0, 0.0]])).unwrap(),
            Matrix::from_rows(&[[4.0, 5.0]])
        );
    }

    #[test]
    fn forward_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = LinearLayer::random(4, 2, &mut rng);
        l.bias = vec![0.5, -1.0];
        let x = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let y = l.forward(&x).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += x.get(i, k) * l.w_t.get(k, j);
                }
                assert_eq!(y.get(i, j), s + l.bias[j]);
            }
        }
    }

    #[test]
    fn backward_hand_case() {
        let mut l = LinearLayer::without_bias(Matrix::from_rows(&[[0.5], [0.25]]));
        l.forward(&Matrix::from_rows(&[[1.0, 2.0]])).unwrap();
        let (gx, g) = l.backward(&Matrix::from_rows(&[[3.0]])).unwrap();
        assert_eq!(g.grad_w(), Matrix::from_rows(&[[3.0, 6.0]]));
        assert_eq!(gx, Matrix::from_rows(&[[1.5, 0.75]]));
        assert_eq!(g.grad_b, vec![3.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = LinearLayer::random(3, 5, &mut rng);
        l.forward(&Matrix::random_normal(2, 3, 1.0, &mut rng)).unwrap();
        let (gx, g) = l.backward(&Matrix::zeros(2, 5)).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert_eq!(g.grad_w_t.max_abs(), 0.0);
    }

    #[test]
    fn tape_discipline() {
        let mut l = LinearLayer::without_bias(Matrix::identity(2));
        assert!(matches!(
            l.backward(&Matrix::zeros(1, 2)),
            Err(Error::State(_))
        ));
        l.forward(&Matrix::zeros(1, 2)).unwrap();
        l.backward(&Matrix::zeros(1, 2)).unwrap();
        assert!(l.backward(&Matrix::zeros(1, 2)).is_err());
        assert!(l.forward(&Matrix::zeros(1, 3)).is_err());
    }
}
