use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Method;
use crate::autonet::{Activation, ModelDims};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, MaskedAdamFlags};
use crate::sparsegrad::{SparsifyMode, SparsifyPolicy};

pub const ALLOWED_BATCH_SIZES: [usize; 3] = [8, 16, 32];

/// Flat run configuration. Every key is optional in a TOML file; missing
/// keys take the defaults below.
///
/// ```toml
/// seed = 7
/// method = "sparsegrad-sd"
/// rho = 0.01
/// epochs = 20
/// calibrate = true
/// out = "runs/sd"
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // Synthetic task.
    pub classes: usize,
    pub input_dim: usize,
    /// Distance between any two class means.
    pub separation: f64,
    /// Std of the isotropic noise around each mean.
    pub noise: f64,
    pub train_samples: usize,
    pub valid_samples: usize,

    // Model.
    pub d: usize,
    pub h: usize,
    pub n_blocks: usize,
    pub activation: Activation,

    // Method.
    pub method: Method,
    pub rho: f64,
    pub rho_grad_output: Option<f64>,
    pub epsilon: f64,
    pub rank: usize,
    /// LoRA scaling; `None` means `rank`.
    pub alpha: Option<f64>,

    // Optimizer.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub sparse_weight_decay: bool,
    pub global_step_bias_correction: bool,

    // Loop.
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Stop after this many optimizer steps; the partial epoch is still
    /// evaluated.
    pub max_steps: Option<u64>,

    // Basis source for the sparsegrad methods.
    pub calibrate: bool,
    pub calibration_steps: usize,
    /// Directory holding `up.sgba` and `down.sgba`.
    pub basis: Option<PathBuf>,
    /// Use `U = I`, `V = I`. Meant for equivalence checks.
    pub identity_basis: bool,

    /// Start from this checkpoint instead of a seeded random model.
    pub init_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        RunConfig {
            seed: 0,
            classes: 4,
            input_dim: 32,
            separation: 5.0,
            noise: 1.0,
            train_samples: 8000,
            valid_samples: 2000,
            d: 32,
            h: 128,
            n_blocks: 4,
            activation: Activation::GeluTanh,
            method: Method::Regular,
            rho: 0.01,
            rho_grad_output: None,
            epsilon: 0.0,
            rank: 1,
            alpha: None,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            sparse_weight_decay: false,
            global_step_bias_correction: false,
            epochs: 20,
            batch_size: 32,
            patience: 3,
            max_steps: None,
            calibrate: false,
            calibration_steps: crate::calib::DEFAULT_CALIBRATION_STEPS,
            basis: None,
            identity_basis: false,
            init_checkpoint: None,
            out: None,
        }
    }
}

/// Values that replace file settings, typically from command-line flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub rho: Option<f64>,
    pub rho_grad_output: Option<f64>,
    pub rank: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub out: Option<PathBuf>,
    pub basis: Option<PathBuf>,
    pub calibrate: bool,
    pub init_checkpoint: Option<PathBuf>,
    pub sparse_weight_decay: bool,
    pub global_step_bias_correction: bool,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn apply(&mut self, o: &ConfigOverrides) {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = o.$f.clone() {
                    self.$f = v.into();
                }
            )*};
        }
        take!(seed, method, rho, rank, epochs, patience);
        if let Some(v) = o.rho_grad_output {
            self.rho_grad_output = Some(v);
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = &o.basis {
            self.basis = Some(v.clone());
        }
        if let Some(v) = &o.init_checkpoint {
            self.init_checkpoint = Some(v.clone());
        }
        self.calibrate |= o.calibrate;
        self.sparse_weight_decay |= o.sparse_weight_decay;
        self.global_step_bias_correction |= o.global_step_bias_correction;
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d: self.d,
            h: self.h,
            n_blocks: self.n_blocks,
            classes: self.classes,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn masked_flags(&self) -> MaskedAdamFlags {
        MaskedAdamFlags {
            sparse_weight_decay: self.sparse_weight_decay,
            global_step_bias_correction: self.global_step_bias_correction,
        }
    }

    /// Policy for the sparsegrad methods; the mode follows the method.
    pub fn policy(&self) -> SparsifyPolicy {
        let mode = match self.method {
            Method::SparsegradReg => SparsifyMode::WeightGradTopK,
            _ => SparsifyMode::GradOutputTopK,
        };
        SparsifyPolicy {
            mode,
            fraction: self.rho,
            grad_output_fraction: self.rho_grad_output,
            epsilon: self.epsilon,
        }
    }

    pub fn lora_alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.train_samples < self.classes || self.valid_samples < self.classes {
            return fail(format!(
                "need at least one sample per class in each split ({} classes, {} train, {} valid)",
                self.classes, self.train_samples, self.valid_samples
            ));
        }
        if self.input_dim < self.classes {
            return fail(format!(
                "input_dim {} cannot hold {} simplex vertices",
                self.input_dim, self.classes
            ));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return fail(format!("separation must be finite and >= 0, got {}", self.separation));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be finite and > 0, got {}", self.noise));
        }
        if self.d != self.input_dim {
            return fail(format!(
                "model width d = {} must equal input_dim = {}",
                self.d, self.input_dim
            ));
        }
        if self.h == 0 {
            return fail("h must be >= 1".into());
        }
        if !ALLOWED_BATCH_SIZES.contains(&self.batch_size) {
            return fail(format!(
                "batch_size must be one of {ALLOWED_BATCH_SIZES:?}, got {}",
                self.batch_size
            ));
        }
        if self.epochs == 0 || self.patience == 0 {
            return fail("epochs and patience must be >= 1".into());
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be >= 1".into());
        }
        if self.calibration_steps == 0 {
            return fail("calibration_steps must be >= 1".into());
        }
        self.adam().validate()?;
        match self.method {
            Method::SparsegradSd | Method::SparsegradReg => {
                self.policy().validate(self.d, self.h)?;
                if self.identity_basis && (self.calibrate || self.basis.is_some()) {
                    return fail("identity_basis excludes calibrate and basis".into());
                }
            }
            Method::Meprop => {
                if !(self.rho > 0.0 && self.rho <= 1.0) {
                    return fail(format!("rho must lie in (0, 1], got {}", self.rho));
                }
            }
            Method::Lora => {
                if self.rank == 0 || self.rank > self.d.min(self.h) {
                    return fail(format!(
                        "lora rank must lie in [1, {}], got {}",
                        self.d.min(self.h),
                        self.rank
                    ));
                }
                if !self.lora_alpha().is_finite() {
                    return fail("alpha must be finite".into());
                }
            }
            Method::Regular => {}
        }
        Ok(())
    }
}
