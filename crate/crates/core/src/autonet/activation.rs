use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

// sqrt(2/pi) and the cubic coefficient of the tanh GELU approximation.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    GeluTanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::GeluTanh => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::GeluTanh => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }

    pub fn forward(self, pre: &Matrix) -> Matrix {
        pre.map(|v| self.apply(v))
    }

    /// Upstream gradient times the pointwise derivative at `pre`.
    pub fn backward(self, pre: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        if pre.shape() != upstream.shape() {
            return Err(Error::shape("activation_backward", pre.shape(), upstream.shape()));
        }
        let data = pre
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&x, &g)| g * self.derivative(x))
            .collect();
        Matrix::new(pre.rows(), pre.cols(), data)
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" | "gelu-tanh" => Ok(Activation::GeluTanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::GeluTanh => "gelu-tanh",
        })
    }
}
