use serde::{Deserialize, Serialize};

use crate::autonet::{Layer, LinearLayer, ModelGrads, Role, Targets, ToyModel};
use crate::baselines::{LoraLayer, MePropLayer};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::optim::{adamw_step, adamw_step_slice, sparse_adam_step, AdamConfig, AdamState, MaskedAdamFlags, MaskedAdamState};
use crate::sparse::CooEntry;
use crate::sparsegrad::SparseGradLayer;

use super::checkpoint::{Checkpoint, LayerRecord, OptState, OptimizerSnapshot, SparseGradRecord};
use super::Method;

pub(crate) const F64_BYTES: usize = std::mem::size_of::<f64>();
pub(crate) const COO_ENTRY_BYTES: usize = std::mem::size_of::<CooEntry>();

/// Explicit storage model, in bytes. Weights, gradients and dense moments
/// are 8 bytes per value, sparse gradients 16 per stored entry, masked Adam
/// records 32 per touched coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub trainable_weights: usize,
    pub frozen_weights: usize,
    pub activations: usize,
    pub gradients: usize,
    pub optimizer: usize,
}

impl Footprint {
    pub fn total(&self) -> usize {
        self.trainable_weights + self.frozen_weights + self.activations + self.gradients + self.optimizer
    }

    /// Trainable parameters, their gradients and the optimizer state.
    pub fn trainable_state(&self) -> usize {
        self.trainable_weights + self.gradients + self.optimizer
    }

    fn add(&mut self, o: &Footprint) {
        self.trainable_weights += o.trainable_weights;
        self.frozen_weights += o.frozen_weights;
        self.activations += o.activations;
        self.gradients += o.gradients;
        self.optimizer += o.optimizer;
    }
}

/// Two optimizer states per layer, meaning fixed by the layer type:
/// (weight, bias) for dense, converted and MeProp layers, (a, b) for LoRA.
pub(crate) type LayerOpt = [OptState; 2];

fn dense(s: &mut OptState) -> Result<&mut AdamState> {
    match s {
        OptState::Dense(a) => Ok(a),
        OptState::Masked(_) => Err(Error::State("expected dense optimizer state".into())),
    }
}

fn masked(s: &mut OptState) -> Result<&mut MaskedAdamState> {
    match s {
        OptState::Masked(m) => Ok(m),
        OptState::Dense(_) => Err(Error::State("expected masked optimizer state".into())),
    }
}

fn opt_bytes(opt: &LayerOpt) -> usize {
    opt.iter()
        .map(|s| match s {
            OptState::Dense(a) => a.moment_bytes(),
            OptState::Masked(m) => m.state_bytes(),
        })
        .sum()
}

/// A block layer the trainer knows how to update and account for.
pub(crate) trait Trainable: Layer + Clone {
    fn init_opt(&self, flags: MaskedAdamFlags) -> LayerOpt;

    /// One optimizer step. Returns the bytes the gradients occupied.
    fn apply(&mut self, grads: Self::Grads, opt: &mut LayerOpt, adam: &AdamConfig, name: &str) -> Result<usize>;

    /// Weights, cached activations and optimizer state for a batch of `n`;
    /// gradients are filled in by the caller.
    fn footprint(&self, opt: &LayerOpt, n: usize) -> Footprint;

    fn record(&self) -> LayerRecord;
}

fn linear_bytes(l: &LinearLayer) -> usize {
    (l.w_t.rows() * l.w_t.cols() + l.bias.len()) * F64_BYTES
}

fn dense_bias_step(name: &str, bias: &mut [f64], grad: &[f64], st: &mut OptState, adam: &AdamConfig) -> Result<()> {
    adamw_step_slice(&format!("{name}.bias"), bias, grad, dense(st)?, adam)
}

impl Trainable for LinearLayer {
    fn init_opt(&self, _: MaskedAdamFlags) -> LayerOpt {
        [OptState::Dense(AdamState::for_matrix(&self.w_t)), OptState::Dense(AdamState::new(self.bias.len()))]
    }

    fn apply(&mut self, g: Self::Grads, opt: &mut LayerOpt, adam: &AdamConfig, name: &str) -> Result<usize> {
        let [w, b] = opt;
        adamw_step(&format!("{name}.weight"), &mut self.w_t, &g.grad_w_t, dense(w)?, adam)?;
        dense_bias_step(name, &mut self.bias, &g.grad_b, b, adam)?;
        Ok(linear_bytes(self))
    }

    fn footprint(&self, opt: &LayerOpt, n: usize) -> Footprint {
        Footprint {
            trainable_weights: linear_bytes(self),
            activations: n * self.d_in() * F64_BYTES,
            optimizer: opt_bytes(opt),
            ..Footprint::default()
        }
    }

    fn record(&self) -> LayerRecord {
        LayerRecord::Plain(self.clone())
    }
}

impl Trainable for SparseGradLayer {
    fn init_opt(&self, flags: MaskedAdamFlags) -> LayerOpt {
        let (r, c) = self.w_tilde_t.shape();
        [OptState::Masked(MaskedAdamState::new(r, c, flags)), OptState::Dense(AdamState::new(self.bias.len()))]
    }

    fn apply(&mut self, g: Self::Grads, opt: &mut LayerOpt, adam: &AdamConfig, name: &str) -> Result<usize> {
        let [w, b] = opt;
        sparse_adam_step(self, &g.grad_w_tilde_t, masked(w)?, adam)
            .map_err(|e| annotate(e, name))?;
        dense_bias_step(name, &mut self.bias, &g.grad_b, b, adam)?;
        Ok(g.grad_w_tilde_t.nnz() * COO_ENTRY_BYTES + g.grad_b.len() * F64_BYTES)
    }

    fn footprint(&self, opt: &LayerOpt, n: usize) -> Footprint {
        let (r, c) = self.w_tilde_t.shape();
        Footprint {
            trainable_weights: (r * c + self.bias.len()) * F64_BYTES,
            activations: n * r * F64_BYTES,
            optimizer: opt_bytes(opt),
            ..Footprint::default()
        }
    }

    fn record(&self) -> LayerRecord {
        LayerRecord::SparseGrad(SparseGradRecord::from_layer(self))
    }
}

impl Trainable for MePropLayer {
    fn init_opt(&self, flags: MaskedAdamFlags) -> LayerOpt {
        let (r, c) = self.inner.w_t.shape();
        [OptState::Masked(MaskedAdamState::new(r, c, flags)), OptState::Dense(AdamState::new(self.inner.bias.len()))]
    }

    fn apply(&mut self, g: Self::Grads, opt: &mut LayerOpt, adam: &AdamConfig, name: &str) -> Result<usize> {
        let [w, b] = opt;
        let delta = masked(w)?
            .step(&self.inner.w_t, &g.grad_w_t, adam)
            .map_err(|e| annotate(e, name))?;
        self.apply_update(&delta)?;
        dense_bias_step(name, &mut self.inner.bias, &g.grad_b, b, adam)?;
        Ok(g.grad_w_t.nnz() * COO_ENTRY_BYTES + g.grad_b.len() * F64_BYTES)
    }

    fn footprint(&self, opt: &LayerOpt, n: usize) -> Footprint {
        Footprint {
            trainable_weights: linear_bytes(&self.inner),
            activations: n * self.inner.d_in() * F64_BYTES,
            optimizer: opt_bytes(opt),
            ..Footprint::default()
        }
    }

    fn record(&self) -> LayerRecord {
        LayerRecord::Meprop {
            inner: self.inner.clone(),
            fraction: self.fraction,
        }
    }
}

impl Trainable for LoraLayer {
    fn init_opt(&self, _: MaskedAdamFlags) -> LayerOpt {
        [
            OptState::Dense(AdamState::for_matrix(&self.adapter.a)),
            OptState::Dense(AdamState::for_matrix(&self.adapter.b)),
        ]
    }

    fn apply(&mut self, g: Self::Grads, opt: &mut LayerOpt, adam: &AdamConfig, name: &str) -> Result<usize> {
        let [sa, sb] = opt;
        adamw_step(&format!("{name}.lora_a"), &mut self.adapter.a, &g.grad_a, dense(sa)?, adam)?;
        adamw_step(&format!("{name}.lora_b"), &mut self.adapter.b, &g.grad_b, dense(sb)?, adam)?;
        Ok(self.adapter.param_count() * F64_BYTES)
    }

    fn footprint(&self, opt: &LayerOpt, n: usize) -> Footprint {
        Footprint {
            trainable_weights: self.adapter.param_count() * F64_BYTES,
            frozen_weights: linear_bytes(&self.base),
            activations: n * (self.base.d_in() + self.adapter.rank()) * F64_BYTES,
            optimizer: opt_bytes(opt),
            ..Footprint::default()
        }
    }

    fn record(&self) -> LayerRecord {
        LayerRecord::Lora {
            base: self.base.clone(),
            adapter: self.adapter.clone(),
        }
    }
}

fn annotate(e: Error, name: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{name}.weight: {m}")),
        other => other,
    }
}

pub(crate) fn layer_name(block: usize, role: Role) -> String {
    format!("blocks.{block}.{}", role.name())
}

/// Per-step result.
#[derive(Clone, Debug)]
pub(crate) struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
    pub gradient_bytes: usize,
}

pub(crate) fn count_correct(logits: &Matrix, labels: &[usize]) -> usize {
    (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let arg = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            arg == labels[i]
        })
        .count()
}

/// Model plus optimizer state. The head is always a dense linear layer
/// trained with AdamW.
#[derive(Clone, Debug)]
pub(crate) struct Trainer<L> {
    pub model: ToyModel<L>,
    pub opts: Vec<[LayerOpt; 2]>,
    pub head_opt: LayerOpt,
    pub adam: AdamConfig,
}

impl<L: Trainable> Trainer<L> {
    pub fn new(model: ToyModel<L>, adam: AdamConfig, flags: MaskedAdamFlags) -> Self {
        let opts = model
            .blocks
            .iter()
            .map(|b| [b.up.init_opt(flags), b.down.init_opt(flags)])
            .collect();
        let head_opt = model.head.init_opt(flags);
        Trainer {
            model,
            opts,
            head_opt,
            adam,
        }
    }

    /// Forward, backward and update. A non-finite loss is returned without
    /// touching any parameter.
    pub fn step(&mut self, x: &Matrix, labels: &[usize]) -> Result<StepOutcome> {
        let ModelGrads {
            loss,
            logits,
            blocks,
            head,
        } = self.model.forward_backward(x, &Targets::Classes(labels.to_vec()))?;
        let correct = count_correct(&logits, labels);
        if !loss.is_finite() {
            return Ok(StepOutcome {
                loss,
                correct,
                gradient_bytes: 0,
            });
        }
        let mut gradient_bytes = 0;
        for (i, (g, (b, o))) in blocks.into_iter().zip(self.model.blocks.iter_mut().zip(&mut self.opts)).enumerate() {
            gradient_bytes += b.up.apply(g.up, &mut o[0], &self.adam, &layer_name(i, Role::Up))?;
            gradient_bytes += b.down.apply(g.down, &mut o[1], &self.adam, &layer_name(i, Role::Down))?;
        }
        gradient_bytes += self.model.head.apply(head, &mut self.head_opt, &self.adam, "head")?;
        Ok(StepOutcome {
            loss,
            correct,
            gradient_bytes,
        })
    }

    /// Footprint with the pre-activations the blocks cache for a batch of `n`.
    pub fn footprint(&self, n: usize) -> Footprint {
        let mut f = self.model.head.footprint(&self.head_opt, n);
        for (b, o) in self.model.blocks.iter().zip(&self.opts) {
            f.add(&b.up.footprint(&o[0], n));
            f.add(&b.down.footprint(&o[1], n));
            f.activations += n * b.up.d_out() * F64_BYTES;
        }
        f
    }

    pub fn checkpoint(&self, method: Method, with_optimizer: bool) -> Checkpoint {
        let optimizer = with_optimizer.then(|| OptimizerSnapshot {
            adam: self.adam,
            states: self
                .opts
                .iter()
                .flat_map(|[u, d]| u.iter().chain(d.iter()))
                .chain(self.head_opt.iter())
                .cloned()
                .collect(),
        });
        Checkpoint {
            method,
            activation: self.model.activation,
            loss: self.model.loss,
            blocks: self.model.blocks.iter().map(|b| [b.up.record(), b.down.record()]).collect(),
            head: self.model.head.clone(),
            optimizer,
        }
    }
}

/// The trainer for whichever method a run uses.
#[derive(Clone, Debug)]
pub(crate) enum Net {
    Regular(Trainer<LinearLayer>),
    SparseGrad(Trainer<SparseGradLayer>),
    Meprop(Trainer<MePropLayer>),
    Lora(Trainer<LoraLayer>),
}

macro_rules! each {
    ($self:expr, $t:ident => $body:expr) => {
        match $self {
            Net::Regular($t) => $body,
            Net::SparseGrad($t) => $body,
            Net::Meprop($t) => $body,
            Net::Lora($t) => $body,
        }
    };
}

impl Net {
    pub fn step(&mut self, x: &Matrix, labels: &[usize]) -> Result<StepOutcome> {
        each!(self, t => t.step(x, labels))
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        each!(self, t => t.model.infer(x))
    }

    pub fn footprint(&self, n: usize) -> Footprint {
        each!(self, t => t.footprint(n))
    }

    pub fn checkpoint(&self, method: Method, with_optimizer: bool) -> Checkpoint {
        each!(self, t => t.checkpoint(method, with_optimizer))
    }
}
