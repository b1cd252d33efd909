use serde::Serialize;

use crate::calib::{Provenance, TransitionBasis};
use crate::numkit::Matrix;
use crate::sparse::SparseCoo;

use super::checkpoint::{LayerRecord, OptState};
use super::{Checkpoint, Method};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BasisInfo {
    pub role: String,
    pub d_in: usize,
    pub d_out: usize,
    pub checksum: String,
    pub provenance: Provenance,
    /// `max |QᵀQ − I|` for `u` and `v`.
    pub u_orthogonality_residual: f64,
    pub v_orthogonality_residual: f64,
}

fn orthogonality_residual(q: &Matrix) -> f64 {
    let Ok(g) = q.matmul_tn(q) else {
        return f64::INFINITY;
    };
    (0..g.rows())
        .flat_map(|i| (0..g.cols()).map(move |j| (i, j)))
        .map(|(i, j)| (g.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

pub fn inspect_basis(b: &TransitionBasis) -> BasisInfo {
    BasisInfo {
        role: b.role.name().to_string(),
        d_in: b.d_in(),
        d_out: b.d_out(),
        checksum: format!("{:08x}", b.checksum()),
        provenance: b.provenance,
        u_orthogonality_residual: orthogonality_residual(b.u()),
        v_orthogonality_residual: orthogonality_residual(b.v()),
    }
}

/// Support statistics of a sparse matrix: how many rows and columns carry
/// any entry, and how the entries spread over rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CooInfo {
    pub rows: usize,
    pub cols: usize,
    pub nnz: usize,
    pub density: f64,
    pub nonzero_rows: usize,
    pub nonzero_cols: usize,
    /// `row_nnz_histogram[k]` rows hold exactly `k` entries (trailing zeros
    /// trimmed).
    pub row_nnz_histogram: Vec<usize>,
    pub max_abs: f64,
}

pub fn inspect_coo(m: &SparseCoo) -> CooInfo {
    let mut per_row = vec![0usize; m.rows()];
    let mut col_hit = vec![false; m.cols()];
    let mut max_abs: f64 = 0.0;
    for e in m.entries() {
        per_row[e.row as usize] += 1;
        col_hit[e.col as usize] = true;
        max_abs = max_abs.max(e.value.abs());
    }
    let top = per_row.iter().copied().max().unwrap_or(0);
    let mut hist = vec![0usize; top + 1];
    for &c in &per_row {
        hist[c] += 1;
    }
    CooInfo {
        rows: m.rows(),
        cols: m.cols(),
        nnz: m.nnz(),
        density: m.density(),
        nonzero_rows: per_row.iter().filter(|&&c| c > 0).count(),
        nonzero_cols: col_hit.iter().filter(|&&h| h).count(),
        row_nnz_histogram: hist,
        max_abs,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub block: usize,
    pub role: &'static str,
    pub kind: &'static str,
    pub d_in: usize,
    pub d_out: usize,
    pub basis_checksum: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizerInfo {
    pub states: usize,
    pub dense_entries: usize,
    pub masked_touched: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub method: Method,
    pub activation: String,
    pub d: usize,
    pub h: usize,
    pub n_blocks: usize,
    pub classes: usize,
    pub layers: Vec<LayerInfo>,
    pub optimizer: Option<OptimizerInfo>,
}

pub fn inspect_checkpoint(ck: &Checkpoint) -> CheckpointInfo {
    let dims = ck.dims();
    let layers = ck
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(i, pair)| {
            pair.iter().zip(["up", "down"]).map(move |(rec, role)| {
                let (kind, shape, basis_checksum) = match rec {
                    LayerRecord::Plain(l) => ("plain", l.w_t.shape(), None),
                    LayerRecord::SparseGrad(s) => ("sparsegrad", s.w_tilde_t.shape(), Some(format!("{:08x}", s.basis_checksum))),
                    LayerRecord::Lora { base, .. } => ("lora", base.w_t.shape(), None),
                    LayerRecord::Meprop { inner, .. } => ("meprop", inner.w_t.shape(), None),
                };
                LayerInfo {
                    block: i,
                    role,
                    kind,
                    d_in: shape.0,
                    d_out: shape.1,
                    basis_checksum,
                }
            })
        })
        .collect();
    let optimizer = ck.optimizer.as_ref().map(|o| {
        let mut info = OptimizerInfo {
            states: o.states.len(),
            dense_entries: 0,
            masked_touched: 0,
            bytes: 0,
        };
        for s in &o.states {
            match s {
                OptState::Dense(a) => {
                    info.dense_entries += a.len();
                    info.bytes += a.moment_bytes();
                }
                OptState::Masked(m) => {
                    info.masked_touched += m.touched();
                    info.bytes += m.state_bytes();
                }
            }
        }
        info
    });
    CheckpointInfo {
        method: ck.method,
        activation: ck.activation.to_string(),
        d: dims.d,
        h: dims.h,
        n_blocks: dims.n_blocks,
        classes: dims.classes,
        layers,
        optimizer,
    }
}
