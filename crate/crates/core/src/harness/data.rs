use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Gaussian-mixture classification task. Class `k` has mean
/// `(separation/√2)·e_k`, so every pair of means is `separation` apart,
/// and samples are `mean + noise·z` with `z ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub train_samples: usize,
    pub valid_samples: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        TaskSpec {
            classes: cfg.classes,
            input_dim: cfg.input_dim,
            separation: cfg.separation,
            noise: cfg.noise,
            train_samples: cfg.train_samples,
            valid_samples: cfg.valid_samples,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.x.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub valid: Split,
}

pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("classes must be >= 2, got {}", spec.classes)));
    }
    if spec.train_samples < spec.classes || spec.valid_samples < spec.classes {
        return Err(Error::Config("each split needs at least one sample per class".into()));
    }
    if spec.input_dim < spec.classes {
        return Err(Error::Config(format!(
            "input_dim {} cannot hold {} simplex vertices",
            spec.input_dim, spec.classes
        )));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite() && spec.noise > 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config("separation must be >= 0 and noise > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = sample_split(spec, spec.train_samples, &mut rng);
    let valid = sample_split(spec, spec.valid_samples, &mut rng);
    Ok(Dataset { train, valid })
}

fn sample_split(spec: &TaskSpec, n: usize, rng: &mut ChaCha8Rng) -> Split {
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(rng);
    let scale = spec.separation / std::f64::consts::SQRT_2;
    let mut x = Matrix::random_normal(n, spec.input_dim, spec.noise, rng);
    for (i, &y) in labels.iter().enumerate() {
        let v = x.get(i, y);
        x.set(i, y, v + scale);
    }
    Split { x, labels }
}

/// Seeded permutation of `0..n` for one epoch.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e90_c4a1_u64.wrapping_mul(epoch + 1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}
