use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AdamConfig;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::sparse::{CooEntry, SparseCoo};
use crate::sparsegrad::SparseGradLayer;

/// Storage model for one touched coordinate: row u32, col u32, m f64,
/// v f64, t u64.
pub const MASKED_RECORD_BYTES: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedAdamFlags {
    /// Apply decoupled decay to the coordinates touched this step.
    pub sparse_weight_decay: bool,
    /// Bias-correct with the optimizer's step count instead of the
    /// coordinate's own touch count.
    pub global_step_bias_correction: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentRecord {
    pub m: f64,
    pub v: f64,
    pub t: u64,
}

/// Lazy Adam state keyed by `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedAdamState {
    rows: usize,
    cols: usize,
    flags: MaskedAdamFlags,
    global_step: u64,
    records: BTreeMap<(u32, u32), MomentRecord>,
}

impl MaskedAdamState {
    pub fn new(rows: usize, cols: usize, flags: MaskedAdamFlags) -> Self {
        MaskedAdamState {
            rows,
            cols,
            flags,
            global_step: 0,
            records: BTreeMap::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn flags(&self) -> MaskedAdamFlags {
        self.flags
    }

    /// Number of non-empty steps taken.
    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn record(&self, row: u32, col: u32) -> Option<&MomentRecord> {
        self.records.get(&(row, col))
    }

    pub fn records(&self) -> impl Iterator<Item = ((u32, u32), &MomentRecord)> {
        self.records.iter().map(|(k, r)| (*k, r))
    }

    pub fn touched(&self) -> usize {
        self.records.len()
    }

    pub fn state_bytes(&self) -> usize {
        self.records.len() * MASKED_RECORD_BYTES
    }

    /// Updates the moments on `grad`'s support and returns the delta to add
    /// to `weights`. An empty gradient changes nothing.
    pub fn step(&mut self, weights: &Matrix, grad: &SparseCoo, cfg: &AdamConfig) -> Result<SparseCoo> {
        if grad.shape() != (self.rows, self.cols) || weights.shape() != (self.rows, self.cols) {
            return Err(Error::shape(
                "masked adam step",
                (self.rows, self.cols),
                grad.shape(),
            ));
        }
        if grad.is_empty() {
            return Ok(SparseCoo::empty(self.rows, self.cols));
        }
        if let Some(e) = grad.entries().iter().find(|e| !e.value.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite sparse gradient at ({}, {})",
                e.row, e.col
            )));
        }
        self.global_step += 1;
        let decay = if self.flags.sparse_weight_decay {
            cfg.lr * cfg.weight_decay
        } else {
            0.0
        };
        let mut delta = Vec::with_capacity(grad.nnz());
        for e in grad.entries() {
            let rec = self.records.entry((e.row, e.col)).or_insert(MomentRecord {
                m: 0.0,
                v: 0.0,
                t: 0,
            });
            rec.t += 1;
            rec.m = cfg.beta1 * rec.m + (1.0 - cfg.beta1) * e.value;
            rec.v = cfg.beta2 * rec.v + (1.0 - cfg.beta2) * e.value * e.value;
            let t = if self.flags.global_step_bias_correction {
                self.global_step
            } else {
                rec.t
            };
            let p = weights.get(e.row as usize, e.col as usize);
            let value = -(decay * p) - cfg.adam_direction(rec.m, rec.v, t);
            if value != 0.0 {
                delta.push(CooEntry {
                    row: e.row,
                    col: e.col,
                    value,
                });
            }
        }
        SparseCoo::new(self.rows, self.cols, delta)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u32(self.rows as u32);
        w.u32(self.cols as u32);
        w.u8(self.flags.sparse_weight_decay as u8 | (self.flags.global_step_bias_correction as u8) << 1);
        w.u64(self.global_step);
        w.u64(self.records.len() as u64);
        for ((r, c), rec) in &self.records {
            w.u32(*r);
            w.u32(*c);
            w.f64(rec.m);
            w.f64(rec.v);
            w.u64(rec.t);
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let bits = r.u8()?;
        if bits > 3 {
            return Err(Error::Corruption(format!("unknown masked adam flags {bits:#x}")));
        }
        let flags = MaskedAdamFlags {
            sparse_weight_decay: bits & 1 != 0,
            global_step_bias_correction: bits & 2 != 0,
        };
        let global_step = r.u64()?;
        let n = r.u64()?;
        if n.saturating_mul(MASKED_RECORD_BYTES as u64) > r.remaining() as u64 {
            return Err(Error::Corruption(format!("{n} moment records exceed the payload")));
        }
        let mut records = BTreeMap::new();
        let mut prev = None;
        for _ in 0..n {
            let key = (r.u32()?, r.u32()?);
            if key.0 as usize >= rows || key.1 as usize >= cols || prev.is_some_and(|p| key <= p) {
                return Err(Error::Corruption(format!(
                    "moment record ({}, {}) out of order or range",
                    key.0, key.1
                )));
            }
            prev = Some(key);
            let rec = MomentRecord {
                m: r.f64()?,
                v: r.f64()?,
                t: r.u64()?,
            };
            if !(rec.v >= 0.0) || rec.t == 0 {
                return Err(Error::Corruption("invalid moment record".into()));
            }
            records.insert(key, rec);
        }
        Ok(MaskedAdamState {
            rows,
            cols,
            flags,
            global_step,
            records,
        })
    }
}

/// Masked Adam on a converted layer: moments only on `grad`'s support, the
/// delta applied through [`SparseGradLayer::apply_update`] and returned.
pub fn sparse_adam_step(
    layer: &mut SparseGradLayer,
    grad: &SparseCoo,
    state: &mut MaskedAdamState,
    cfg: &AdamConfig,
) -> Result<SparseCoo> {
    let delta = state.step(&layer.w_tilde_t, grad, cfg)?;
    layer.apply_update(&delta)?;
    Ok(delta)
}
