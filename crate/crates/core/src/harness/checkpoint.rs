use std::path::Path;
use std::sync::Arc;

use crate::autonet::{Activation, Block, Layer, LinearLayer, LossKind, ModelDims, Role, ToyModel};
use crate::baselines::{LoraAdapter, LoraLayer, MePropLayer};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::optim::{AdamConfig, AdamState, MaskedAdamState};
use crate::sparsegrad::{SparseGradLayer, SparsifyMode, SparsifyPolicy};

use super::{BasisSet, Method};

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;

/// Converted layer as stored: weights plus a reference to its basis.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGradRecord {
    pub role: Role,
    pub basis_checksum: u32,
    pub w_tilde_t: Matrix,
    pub bias: Vec<f64>,
    pub policy: SparsifyPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerRecord {
    Plain(LinearLayer),
    SparseGrad(SparseGradRecord),
    Lora { base: LinearLayer, adapter: LoraAdapter },
    Meprop { inner: LinearLayer, fraction: f64 },
}

impl LayerRecord {
    fn tag(&self) -> u8 {
        match self {
            LayerRecord::Plain(_) => 0,
            LayerRecord::SparseGrad(_) => 1,
            LayerRecord::Lora { .. } => 2,
            LayerRecord::Meprop { .. } => 3,
        }
    }

    fn expected_tag(method: Method) -> u8 {
        match method {
            Method::Regular => 0,
            Method::SparsegradSd | Method::SparsegradReg => 1,
            Method::Lora => 2,
            Method::Meprop => 3,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            LayerRecord::Plain(l) => l.w_t.shape(),
            LayerRecord::SparseGrad(r) => r.w_tilde_t.shape(),
            LayerRecord::Lora { base, .. } => base.w_t.shape(),
            LayerRecord::Meprop { inner, .. } => inner.w_t.shape(),
        }
    }

    /// Equivalent plain layer: `convert_back` for converted layers, the
    /// merged weight for LoRA, the wrapped layer for MeProp.
    pub fn to_plain(&self, bases: Option<&BasisSet>) -> Result<LinearLayer> {
        match self {
            LayerRecord::Plain(l) => Ok(l.clone()),
            LayerRecord::SparseGrad(r) => r.instantiate(bases)?.convert_back(),
            LayerRecord::Lora { base, adapter } => LoraLayer::new(base.clone(), adapter.clone())?.merged(),
            LayerRecord::Meprop { inner, .. } => Ok(inner.clone()),
        }
    }
}

impl SparseGradRecord {
    pub fn from_layer(layer: &SparseGradLayer) -> Self {
        SparseGradRecord {
            role: layer.basis().role,
            basis_checksum: layer.basis().checksum(),
            w_tilde_t: layer.w_tilde_t.clone(),
            bias: layer.bias.clone(),
            policy: layer.policy,
        }
    }

    pub fn instantiate(&self, bases: Option<&BasisSet>) -> Result<SparseGradLayer> {
        let bases = bases.ok_or_else(|| {
            Error::Config("checkpoint holds converted layers; pass --basis <dir> with the bases used to train it".into())
        })?;
        let basis: &Arc<_> = bases.get(self.role);
        let found = basis.checksum();
        if found != self.basis_checksum {
            return Err(Error::Conversion(format!(
                "{} layer was trained with basis {:08x}, supplied basis is {found:08x}",
                self.role, self.basis_checksum
            )));
        }
        SparseGradLayer::from_parts(self.w_tilde_t.clone(), self.bias.clone(), basis.clone(), self.policy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptState {
    Dense(AdamState),
    Masked(MaskedAdamState),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub adam: AdamConfig,
    /// Block-major `(up, down)`, two states per layer, then the head's two.
    pub states: Vec<OptState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub activation: Activation,
    pub loss: LossKind,
    pub blocks: Vec<[LayerRecord; 2]>,
    pub head: LinearLayer,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn from_plain_model(model: &ToyModel<LinearLayer>) -> Self {
        Checkpoint {
            method: Method::Regular,
            activation: model.activation,
            loss: model.loss,
            blocks: model
                .blocks
                .iter()
                .map(|b| [LayerRecord::Plain(b.up.clone()), LayerRecord::Plain(b.down.clone())])
                .collect(),
            head: model.head.clone(),
            optimizer: None,
        }
    }

    pub fn dims(&self) -> ModelDims {
        let (d, h) = self.blocks.first().map_or((self.head.d_in(), 0), |b| b[0].shape());
        ModelDims {
            d,
            h,
            n_blocks: self.blocks.len(),
            classes: self.head.d_out(),
        }
    }

    /// Every layer as a plain linear layer, optimizer state dropped.
    pub fn to_plain(&self, bases: Option<&BasisSet>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            method: Method::Regular,
            activation: self.activation,
            loss: self.loss,
            blocks: self
                .blocks
                .iter()
                .map(|[u, d]| Ok([LayerRecord::Plain(u.to_plain(bases)?), LayerRecord::Plain(d.to_plain(bases)?)]))
                .collect::<Result<_>>()?,
            head: self.head.clone(),
            optimizer: None,
        })
    }

    pub fn plain_model(&self, bases: Option<&BasisSet>) -> Result<ToyModel<LinearLayer>> {
        let plain = self.to_plain(bases)?;
        Ok(ToyModel {
            blocks: plain
                .blocks
                .into_iter()
                .map(|[u, d]| match (u, d) {
                    (LayerRecord::Plain(u), LayerRecord::Plain(d)) => Block::new(u, d),
                    _ => unreachable!("to_plain yields plain layers"),
                })
                .collect(),
            head: plain.head,
            activation: self.activation,
            loss: self.loss,
        })
    }

    pub fn sparse_model(&self, bases: &BasisSet) -> Result<ToyModel<SparseGradLayer>> {
        let blocks = self
            .blocks
            .iter()
            .map(|pair| {
                let layer = |r: &LayerRecord| match r {
                    LayerRecord::SparseGrad(s) => s.instantiate(Some(bases)),
                    _ => Err(Error::Config("checkpoint does not hold converted layers".into())),
                };
                Ok(Block::new(layer(&pair[0])?, layer(&pair[1])?))
            })
            .collect::<Result<_>>()?;
        Ok(ToyModel {
            blocks,
            head: self.head.clone(),
            activation: self.activation,
            loss: self.loss,
        })
    }

    pub fn lora_model(&self) -> Result<ToyModel<LoraLayer>> {
        let blocks = self
            .blocks
            .iter()
            .map(|pair| {
                let layer = |r: &LayerRecord| match r {
                    LayerRecord::Lora { base, adapter } => LoraLayer::new(base.clone(), adapter.clone()),
                    _ => Err(Error::Config("checkpoint does not hold lora layers".into())),
                };
                Ok(Block::new(layer(&pair[0])?, layer(&pair[1])?))
            })
            .collect::<Result<_>>()?;
        Ok(ToyModel {
            blocks,
            head: self.head.clone(),
            activation: self.activation,
            loss: self.loss,
        })
    }

    pub fn meprop_model(&self) -> Result<ToyModel<MePropLayer>> {
        let blocks = self
            .blocks
            .iter()
            .map(|pair| {
                let layer = |r: &LayerRecord| match r {
                    LayerRecord::Meprop { inner, fraction } => MePropLayer::new(inner.clone(), *fraction),
                    _ => Err(Error::Config("checkpoint does not hold meprop layers".into())),
                };
                Ok(Block::new(layer(&pair[0])?, layer(&pair[1])?))
            })
            .collect::<Result<_>>()?;
        Ok(ToyModel {
            blocks,
            head: self.head.clone(),
            activation: self.activation,
            loss: self.loss,
        })
    }

    /// `SGCK` layout, all little-endian: magic, version u32, method u8,
    /// activation u8, loss u8, n_blocks u32, then per block the up and down
    /// layer sections, the head, an optional optimizer section and a CRC-32
    /// of everything before it. A layer section is a tag u8 followed by
    /// 0 plain: linear;
    /// 1 sparsegrad: role u8, basis checksum u32, matrix, bias, policy;
    /// 2 lora: linear, alpha f64, matrix a, matrix b;
    /// 3 meprop: fraction f64, linear.
    /// A matrix is rows u32, cols u32, row-major f64s; a bias is len u32
    /// and f64s; a linear layer is a matrix and a bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u8(self.method.tag());
        w.u8(activation_tag(self.activation));
        w.u8(loss_tag(self.loss));
        w.u32(self.blocks.len() as u32);
        for pair in &self.blocks {
            for rec in pair {
                write_record(&mut w, rec);
            }
        }
        write_linear(&mut w, &self.head);
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                for v in [opt.adam.lr, opt.adam.beta1, opt.adam.beta2, opt.adam.eps, opt.adam.weight_decay] {
                    w.f64(v);
                }
                w.u32(opt.states.len() as u32);
                for s in &opt.states {
                    match s {
                        OptState::Dense(a) => {
                            w.u8(0);
                            a.write(&mut w);
                        }
                        OptState::Masked(m) => {
                            w.u8(1);
                            m.write(&mut w);
                        }
                    }
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "checkpoint")?;
        let tag = r.u8()?;
        let method = Method::from_tag(tag).ok_or_else(|| Error::Format(format!("checkpoint: unknown method tag {tag}")))?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::GeluTanh,
            t => return Err(Error::Format(format!("checkpoint: unknown activation tag {t}"))),
        };
        let loss = match r.u8()? {
            0 => LossKind::SoftmaxCrossEntropy,
            1 => LossKind::Mse,
            t => return Err(Error::Format(format!("checkpoint: unknown loss tag {t}"))),
        };
        let n_blocks = r.u32()? as usize;
        // Each block needs at least two tags and two empty matrices.
        if n_blocks.saturating_mul(2 * 13) > r.remaining() {
            return Err(Error::Format(format!("checkpoint: {n_blocks} blocks exceed the payload")));
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            blocks.push([read_record(&mut r)?, read_record(&mut r)?]);
        }
        let head = read_linear(&mut r)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let adam = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let n = r.u32()? as usize;
                if n > r.remaining() {
                    return Err(Error::Format("checkpoint: optimizer state count exceeds payload".into()));
                }
                let mut states = Vec::with_capacity(n);
                for _ in 0..n {
                    states.push(match r.u8()? {
                        0 => OptState::Dense(AdamState::read(&mut r)?),
                        1 => OptState::Masked(MaskedAdamState::read(&mut r)?),
                        t => return Err(Error::Format(format!("checkpoint: unknown optimizer tag {t}"))),
                    });
                }
                Some(OptimizerSnapshot { adam, states })
            }
            t => return Err(Error::Format(format!("checkpoint: bad optimizer flag {t}"))),
        };
        r.finish()?;
        let ck = Checkpoint {
            method,
            activation,
            loss,
            blocks,
            head,
            optimizer,
        };
        ck.check_consistency()?;
        Ok(ck)
    }

    fn check_consistency(&self) -> Result<()> {
        let want = LayerRecord::expected_tag(self.method);
        let dims = self.dims();
        for (i, [up, down]) in self.blocks.iter().enumerate() {
            if up.tag() != want || down.tag() != want {
                return Err(Error::Corruption(format!(
                    "block {i} layer kinds do not match method {}",
                    self.method
                )));
            }
            if up.shape() != (dims.d, dims.h) || down.shape() != (dims.h, dims.d) {
                return Err(Error::Corruption(format!("block {i} has inconsistent shapes")));
            }
            for (rec, role) in [(up, Role::Up), (down, Role::Down)] {
                if let LayerRecord::SparseGrad(s) = rec {
                    if s.role != role {
                        return Err(Error::Corruption(format!("block {i} {role} layer refers to a {} basis", s.role)));
                    }
                }
            }
        }
        if self.head.d_in() != dims.d {
            return Err(Error::Corruption("head width does not match the blocks".into()));
        }
        if let Some(opt) = &self.optimizer {
            if opt.states.len() != 2 * (2 * self.blocks.len() + 1) {
                return Err(Error::Corruption(format!(
                    "{} optimizer states for {} blocks",
                    opt.states.len(),
                    self.blocks.len()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::GeluTanh => 1,
    }
}

fn loss_tag(l: LossKind) -> u8 {
    match l {
        LossKind::SoftmaxCrossEntropy => 0,
        LossKind::Mse => 1,
    }
}

fn write_matrix(w: &mut Writer, m: &Matrix) {
    w.u32(m.rows() as u32);
    w.u32(m.cols() as u32);
    w.f64s(m.data());
}

fn read_matrix(r: &mut Reader<'_>) -> Result<Matrix> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("checkpoint: matrix size overflows".into()))?;
    let data = r.f64s(n)?;
    Matrix::new(rows, cols, data)
}

fn write_linear(w: &mut Writer, l: &LinearLayer) {
    write_matrix(w, &l.w_t);
    w.u32(l.bias.len() as u32);
    w.f64s(&l.bias);
}

fn read_linear(r: &mut Reader<'_>) -> Result<LinearLayer> {
    let w_t = read_matrix(r)?;
    let n = r.u32()? as usize;
    let bias = r.f64s(n)?;
    LinearLayer::new(w_t, bias).map_err(|e| Error::Corruption(format!("checkpoint: {e}")))
}

fn write_record(w: &mut Writer, rec: &LayerRecord) {
    w.u8(rec.tag());
    match rec {
        LayerRecord::Plain(l) => write_linear(w, l),
        LayerRecord::SparseGrad(s) => {
            w.u8(s.role.tag());
            w.u32(s.basis_checksum);
            write_matrix(w, &s.w_tilde_t);
            w.u32(s.bias.len() as u32);
            w.f64s(&s.bias);
            w.u8(s.policy.mode.tag());
            w.f64(s.policy.fraction);
            match s.policy.grad_output_fraction {
                None => {
                    w.u8(0);
                    w.f64(0.0);
                }
                Some(f) => {
                    w.u8(1);
                    w.f64(f);
                }
            }
            w.f64(s.policy.epsilon);
        }
        LayerRecord::Lora { base, adapter } => {
            write_linear(w, base);
            w.f64(adapter.alpha);
            write_matrix(w, &adapter.a);
            write_matrix(w, &adapter.b);
        }
        LayerRecord::Meprop { inner, fraction } => {
            w.f64(*fraction);
            write_linear(w, inner);
        }
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<LayerRecord> {
    match r.u8()? {
        0 => Ok(LayerRecord::Plain(read_linear(r)?)),
        1 => {
            let tag = r.u8()?;
            let role = Role::from_tag(tag).ok_or_else(|| Error::Format(format!("checkpoint: unknown role tag {tag}")))?;
            let basis_checksum = r.u32()?;
            let w_tilde_t = read_matrix(r)?;
            let n = r.u32()? as usize;
            let bias = r.f64s(n)?;
            if bias.len() != w_tilde_t.cols() {
                return Err(Error::Corruption("checkpoint: bias length mismatch".into()));
            }
            let tag = r.u8()?;
            let mode = SparsifyMode::from_tag(tag).ok_or_else(|| Error::Format(format!("checkpoint: unknown policy mode {tag}")))?;
            let fraction = r.f64()?;
            let has_g = r.u8()?;
            let g = r.f64()?;
            let grad_output_fraction = match has_g {
                0 => None,
                1 => Some(g),
                t => return Err(Error::Format(format!("checkpoint: bad policy flag {t}"))),
            };
            let epsilon = r.f64()?;
            let policy = SparsifyPolicy {
                mode,
                fraction,
                grad_output_fraction,
                epsilon,
            };
            policy
                .validate(w_tilde_t.rows(), w_tilde_t.cols())
                .map_err(|e| Error::Corruption(format!("checkpoint: {e}")))?;
            Ok(LayerRecord::SparseGrad(SparseGradRecord {
                role,
                basis_checksum,
                w_tilde_t,
                bias,
                policy,
            }))
        }
        2 => {
            let base = read_linear(r)?;
            let alpha = r.f64()?;
            let a = read_matrix(r)?;
            let b = read_matrix(r)?;
            let adapter = LoraAdapter::from_factors(a, b, alpha).map_err(|e| Error::Corruption(format!("checkpoint: {e}")))?;
            if adapter.a.cols() != base.d_in() || adapter.b.rows() != base.d_out() {
                return Err(Error::Corruption("checkpoint: adapter shape mismatch".into()));
            }
            Ok(LayerRecord::Lora { base, adapter })
        }
        3 => {
            let fraction = r.f64()?;
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Corruption(format!("checkpoint: meprop fraction {fraction}")));
            }
            Ok(LayerRecord::Meprop {
                fraction,
                inner: read_linear(r)?,
            })
        }
        t => Err(Error::Format(format!("checkpoint: unknown layer tag {t}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyModel<LinearLayer> {
        ToyModel::random(
            ModelDims {
                d: 3,
                h: 5,
                n_blocks: 2,
                classes: 2,
            },
            Activation::GeluTanh,
            4,
        )
    }

    #[test]
    fn plain_round_trip() {
        let ck = Checkpoint::from_plain_model(&small());
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn sparse_round_trip_and_conversion() {
        let model = small();
        let dims = model.dims();
        let bases = BasisSet::identity(&dims);
        let policy = SparsifyPolicy::default().with_grad_output_fraction(0.5);
        let policy = SparsifyPolicy { fraction: 0.2, ..policy };
        let sparse = model
            .clone()
            .try_map_layers(|_, role, l| SparseGradLayer::convert(&l, bases.get(role).clone(), policy))
            .unwrap();
        let ck = Checkpoint {
            method: Method::SparsegradSd,
            activation: sparse.activation,
            loss: sparse.loss,
            blocks: sparse
                .blocks
                .iter()
                .map(|b| [
                    LayerRecord::SparseGrad(SparseGradRecord::from_layer(&b.up)),
                    LayerRecord::SparseGrad(SparseGradRecord::from_layer(&b.down)),
                ])
                .collect(),
            head: sparse.head.clone(),
            optimizer: Some(OptimizerSnapshot {
                adam: AdamConfig::default(),
                states: (0..10).map(|_| OptState::Dense(AdamState::new(3))).collect(),
            }),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert!(back.to_plain(None).is_err());
        let plain = back.plain_model(Some(&bases)).unwrap();
        let x = Matrix::from_rows(&[[0.1, -0.2, 0.3]]);
        assert_eq!(plain.infer(&x).unwrap(), model.infer(&x).unwrap());
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = Checkpoint::from_plain_model(&small()).to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn wrong_basis_rejected() {
        let model = small();
        let bases = BasisSet::identity(&model.dims());
        let layer = SparseGradLayer::convert(&model.blocks[0].up, bases.up.clone(), SparsifyPolicy { fraction: 0.5, ..SparsifyPolicy::default() }).unwrap();
        let mut rec = SparseGradRecord::from_layer(&layer);
        rec.basis_checksum ^= 0xdead;
        assert!(matches!(rec.instantiate(Some(&bases)), Err(Error::Conversion(_))));
    }
}
