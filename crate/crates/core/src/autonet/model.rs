use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

use super::{loss_forward_backward, Activation, Layer, LinearGrads, LinearLayer, LossKind, Targets};

/// Which MLP projection a layer plays. Up-projections are `d × h`,
/// down-projections `h × d`; one transition basis is shared per role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Up,
    Down,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Up, Role::Down];

    pub fn tag(self) -> u8 {
        match self {
            Role::Up => 0,
            Role::Down => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Role> {
        match tag {
            0 => Some(Role::Up),
            1 => Some(Role::Down),
            _ => None,
        }
    }

    /// `(d_in, d_out)` of this role's layers.
    pub fn shape(self, dims: &ModelDims) -> (usize, usize) {
        match self {
            Role::Up => (dims.d, dims.h),
            Role::Down => (dims.h, dims.d),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Up => "up",
            Role::Down => "down",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub h: usize,
    pub n_blocks: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 32,
            h: 128,
            n_blocks: 4,
            classes: 4,
        }
    }
}

/// Residual MLP block: `x + down(act(up(x)))`.
#[derive(Clone, Debug)]
pub struct Block<L> {
    pub up: L,
    pub down: L,
    pre_act: Option<Matrix>,
}

impl<L> Block<L> {
    pub fn new(up: L, down: L) -> Self {
        Block {
            up,
            down,
            pre_act: None,
        }
    }

    pub fn layer(&self, role: Role) -> &L {
        match role {
            Role::Up => &self.up,
            Role::Down => &self.down,
        }
    }

    pub fn layer_mut(&mut self, role: Role) -> &mut L {
        match role {
            Role::Up => &mut self.up,
            Role::Down => &mut self.down,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockGrads<G> {
    pub up: G,
    pub down: G,
}

#[derive(Clone, Debug)]
pub struct ModelGrads<G> {
    pub loss: f64,
    pub logits: Matrix,
    pub blocks: Vec<BlockGrads<G>>,
    pub head: LinearGrads,
}

/// MLP-only residual network with a linear classifier head. Generic over
/// the block layer type so converted layers slot in unchanged.
#[derive(Clone, Debug)]
pub struct ToyModel<L = LinearLayer> {
    pub blocks: Vec<Block<L>>,
    pub head: LinearLayer,
    pub activation: Activation,
    pub loss: LossKind,
}

impl ToyModel<LinearLayer> {
    pub fn random(dims: ModelDims, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..dims.n_blocks)
            .map(|_| {
                let up = LinearLayer::random(dims.d, dims.h, &mut rng);
                let down = LinearLayer::random(dims.h, dims.d, &mut rng);
                Block::new(up, down)
            })
            .collect();
        let head = LinearLayer::random(dims.d, dims.classes, &mut rng);
        ToyModel {
            blocks,
            head,
            activation,
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }

    pub fn zeros(dims: ModelDims, activation: Activation, loss: LossKind) -> Self {
        let blocks = (0..dims.n_blocks)
            .map(|_| {
                Block::new(
                    LinearLayer::without_bias(Matrix::zeros(dims.d, dims.h)),
                    LinearLayer::without_bias(Matrix::zeros(dims.h, dims.d)),
                )
            })
            .collect();
        ToyModel {
            blocks,
            head: LinearLayer::without_bias(Matrix::zeros(dims.d, dims.classes)),
            activation,
            loss,
        }
    }
}

impl<L: Layer> ToyModel<L> {
    pub fn dims(&self) -> ModelDims {
        let (d, h) = self
            .blocks
            .first()
            .map_or((self.head.d_in(), 0), |b| (b.up.d_in(), b.up.d_out()));
        ModelDims {
            d,
            h,
            n_blocks: self.blocks.len(),
            classes: self.head.d_out(),
        }
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for b in &self.blocks {
            let pre = b.up.infer(&h)?;
            let out = b.down.infer(&self.activation.forward(&pre))?;
            h.add_assign(&out)?;
        }
        self.head.infer(&h)
    }

    /// One forward/backward pair. Parameters are not touched; the caller
    /// decides what to do with the gradients.
    pub fn forward_backward(
        &mut self,
        x: &Matrix,
        targets: &Targets,
    ) -> Result<ModelGrads<L::Grads>> {
        let act = self.activation;
        let mut h = x.clone();
        for b in &mut self.blocks {
            let pre = b.up.forward(&h)?;
            let out = b.down.forward(&act.forward(&pre))?;
            b.pre_act = Some(pre);
            h.add_assign(&out)?;
        }
        let logits = self.head.forward(&h)?;
        let (loss, grad_logits) = loss_forward_backward(self.loss, &logits, targets)?;

        let (mut g, head) = self.head.backward(&grad_logits)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in self.blocks.iter_mut().rev() {
            let pre = b
                .pre_act
                .take()
                .ok_or_else(|| Error::State("block backward without forward".into()))?;
            let (g_act, down) = b.down.backward(&g)?;
            let g_pre = act.backward(&pre, &g_act)?;
            let (g_in, up) = b.up.backward(&g_pre)?;
            g.add_assign(&g_in)?;
            blocks.push(BlockGrads { up, down });
        }
        blocks.reverse();
        Ok(ModelGrads {
            loss,
            logits,
            blocks,
            head,
        })
    }

    /// Rebuilds the model with every block layer passed through `f`
    /// (block index, role, layer).
    pub fn try_map_layers<M, F>(self, mut f: F) -> Result<ToyModel<M>>
    where
        F: FnMut(usize, Role, L) -> Result<M>,
    {
        let blocks = self
            .blocks
            .into_iter()
            .enumerate()
            .map(|(i, b)| Ok(Block::new(f(i, Role::Up, b.up)?, f(i, Role::Down, b.down)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyModel {
            blocks,
            head: self.head,
            activation: self.activation,
            loss: self.loss,
        })
    }
}
