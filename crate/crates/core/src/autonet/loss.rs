use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// `(1/n)·Σ_i Σ_j (logit − target)²`
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Matrix),
}

/// Mean-over-batch loss and its gradient with respect to `logits`.
pub fn loss_forward_backward(
    kind: LossKind,
    logits: &Matrix,
    targets: &Targets,
) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    match (kind, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            if labels.len() != n {
                return Err(Error::shape("cross_entropy", logits.shape(), (labels.len(), 1)));
            }
            let mut grad = Matrix::zeros(n, logits.cols());
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= logits.cols() {
                    return Err(Error::Data(format!(
                        "class index {label} out of range for {} logits",
                        logits.cols()
                    )));
                }
                let row = logits.row(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                total += log_z - row[label];
                let g = grad.row_mut(i);
                for (gj, &v) in g.iter_mut().zip(row) {
                    *gj = (v - log_z).exp() * inv_n;
                }
                g[label] -= inv_n;
            }
            Ok((total * inv_n, grad))
        }
        (LossKind::Mse, Targets::Values(t)) => {
            if t.shape() != logits.shape() {
                return Err(Error::shape("mse", logits.shape(), t.shape()));
            }
            let diff = logits.sub(t)?;
            let loss = diff.data().iter().map(|d| d * d).sum::<f64>() * inv_n;
            Ok((loss, diff.scale(2.0 * inv_n)))
        }
        (kind, _) => Err(Error::Data(format!("targets do not match loss {kind:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_zero_at_target() {
        let m = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let (l, g) = loss_forward_backward(LossKind::Mse, &m, &Targets::Values(m.clone())).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn symmetric_two_class() {
        let logits = Matrix::zeros(2, 2);
        let (l, g) = loss_forward_backward(
            LossKind::SoftmaxCrossEntropy,
            &logits,
            &Targets::Classes(vec![0, 1]),
        )
        .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, Matrix::from_rows(&[[-0.25, 0.25], [0.25, -0.25]]));
    }

    #[test]
    fn out_of_range_label() {
        let err = loss_forward_backward(
            LossKind::SoftmaxCrossEntropy,
            &Matrix::zeros(1, 3),
            &Targets::Classes(vec![3]),
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for case in 0..10 {
            let logits = Matrix::random_normal(4, 3, 2.0, &mut rng);
            let (kind, t) = if case % 2 == 0 {
                (LossKind::SoftmaxCrossEntropy, Targets::Classes(vec![0, 2, 1, 2]))
            } else {
                (
                    LossKind::Mse,
                    Targets::Values(Matrix::random_normal(4, 3, 1.0, &mut rng)),
                )
            };
            let (_, g) = loss_forward_backward(kind, &logits, &t).unwrap();
            for idx in 0..12 {
                let mut p = logits.clone();
                p.data_mut()[idx] += h;
                let mut m = logits.clone();
                m.data_mut()[idx] -= h;
                let fd = (loss_forward_backward(kind, &p, &t).unwrap().0
                    - loss_forward_backward(kind, &m, &t).unwrap().0)
                    / (2.0 * h);
                let an = g.data()[idx];
                assert!((an - fd).abs() <= 1e-6 * an.abs().max(1e-2), "{an} vs {fd}");
            }
        }
    }
}
