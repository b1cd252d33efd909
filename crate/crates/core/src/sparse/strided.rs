use crate::error::{Error, Result};
use crate::numkit::Matrix;

use super::{CooEntry, SparseCoo};

/// Rows and columns of a source matrix `A` that hold any entry above the
/// extraction threshold. Everything outside `nz_rows × nz_cols` is zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StridedPattern {
    pub rows: usize,
    pub cols: usize,
    pub nz_rows: Vec<usize>,
    pub nz_cols: Vec<usize>,
}

/// Scans `a` for entries with `|value| > threshold` and returns the
/// pattern plus the compressed block `A(nz_rows, nz_cols)`; entries at or
/// below the threshold are zero in the block.
pub fn extract_pattern(a: &Matrix, threshold: f64) -> (StridedPattern, Matrix) {
    let (r, c) = a.shape();
    let mut row_hit = vec![false; r];
    let mut col_hit = vec![false; c];
    for i in 0..r {
        for (j, v) in a.row(i).iter().enumerate() {
            if v.abs() > threshold {
                row_hit[i] = true;
                col_hit[j] = true;
            }
        }
    }
    let nz_rows: Vec<usize> = (0..r).filter(|&i| row_hit[i]).collect();
    let nz_cols: Vec<usize> = (0..c).filter(|&j| col_hit[j]).collect();
    let compressed = Matrix::from_fn(nz_rows.len(), nz_cols.len(), |k, l| {
        let v = a.get(nz_rows[k], nz_cols[l]);
        if v.abs() > threshold {
            v
        } else {
            0.0
        }
    });
    (
        StridedPattern {
            rows: r,
            cols: c,
            nz_rows,
            nz_cols,
        },
        compressed,
    )
}

/// `C = A(rows, :)(:, cols) · B(cols, :)`; returns `C` and the row map
/// needed to put its rows back in place.
///
/// Each entry of `C` sums over the kept columns in ascending order, so it
/// is bit-identical to the dense product whenever the skipped terms are
/// exact zeros.
pub fn sparse_by_dense(
    pattern: &StridedPattern,
    compressed: &Matrix,
    b: &Matrix,
) -> Result<(Matrix, Vec<usize>)> {
    if b.rows() != pattern.cols {
        return Err(Error::shape(
            "sparse_by_dense",
            (pattern.rows, pattern.cols),
            b.shape(),
        ));
    }
    if compressed.shape() != (pattern.nz_rows.len(), pattern.nz_cols.len()) {
        return Err(Error::shape(
            "sparse_by_dense",
            (pattern.nz_rows.len(), pattern.nz_cols.len()),
            compressed.shape(),
        ));
    }
    let n = b.cols();
    let mut out = Matrix::zeros(pattern.nz_rows.len(), n);
    for k in 0..compressed.rows() {
        let a_row = compressed.row(k);
        let c_row = out.row_mut(k);
        for (&a, &src) in a_row.iter().zip(&pattern.nz_cols) {
            for (c, &bv) in c_row.iter_mut().zip(b.row(src)) {
                *c += a * bv;
            }
        }
    }
    Ok((out, pattern.nz_rows.clone()))
}

/// Scatters the rows of a compressed product back to their original row
/// indices: `C_coo(row_map[k], l) = result(k, l)`. The logical shape is
/// `logical_rows × result.cols`. With `topk`, only that many
/// largest-magnitude entries survive.
pub fn restore_coo(
    result: &Matrix,
    row_map: &[usize],
    logical_rows: usize,
    topk: Option<usize>,
) -> Result<SparseCoo> {
    if row_map.len() != result.rows() {
        return Err(Error::Argument(format!(
            "row map has {} entries for {} result rows",
            row_map.len(),
            result.rows()
        )));
    }
    let mut order: Vec<usize> = (0..row_map.len()).collect();
    order.sort_unstable_by_key(|&k| row_map[k]);
    if order.windows(2).any(|w| row_map[w[0]] == row_map[w[1]]) {
        return Err(Error::Argument("duplicate row map entries".into()));
    }
    if let Some(&bad) = row_map.iter().find(|&&r| r >= logical_rows) {
        return Err(Error::Argument(format!(
            "row map entry {bad} outside {logical_rows} rows"
        )));
    }
    let mut entries = Vec::new();
    for k in order {
        let row = row_map[k] as u32;
        for (l, &v) in result.row(k).iter().enumerate() {
            if v != 0.0 {
                entries.push(CooEntry {
                    row,
                    col: l as u32,
                    value: v,
                });
            }
        }
    }
    let coo = SparseCoo::new(logical_rows, result.cols(), entries)?;
    Ok(match topk {
        Some(k) => coo.top_k(k),
        None => coo,
    })
}
