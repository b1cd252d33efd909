use std::cmp::Ordering;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

const MAGIC: &[u8; 4] = b"SGCO";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CooEntry {
    pub row: u32,
    pub col: u32,
    pub value: f64,
}

/// Sparse matrix as `(row, col, value)` triples, strictly increasing in
/// row-major order, every value nonzero.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCoo {
    rows: usize,
    cols: usize,
    entries: Vec<CooEntry>,
}

/// `⌈fraction · n⌉`, the entry budget for a top-k cut. The product is
/// rounded to nine decimal places before the ceiling so `0.07 · 100` stays
/// 7 despite binary representation error.
pub fn top_k_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = (raw * 1e9).round() / 1e9;
    (rounded.ceil() as usize).min(n)
}

/// Indices of the `k` largest magnitudes among the nonzero `values`,
/// ties broken toward the smaller index, returned in ascending order.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| values[i] != 0.0).collect();
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    };
    if k < idx.len() {
        if k == 0 {
            idx.clear();
        } else {
            idx.select_nth_unstable_by(k - 1, by_rank);
            idx.truncate(k);
        }
    }
    idx.sort_unstable();
    idx
}

fn check_index(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} exceeds u32 index range")))
}

impl SparseCoo {
    /// Validates ordering, range and nonzero-ness.
    pub fn new(rows: usize, cols: usize, entries: Vec<CooEntry>) -> Result<Self> {
        check_index(rows, "row count")?;
        check_index(cols, "col count")?;
        let mut prev: Option<(u32, u32)> = None;
        for e in &entries {
            if e.row as usize >= rows || e.col as usize >= cols {
                return Err(Error::Corruption(format!(
                    "entry ({}, {}) outside {rows}x{cols}",
                    e.row, e.col
                )));
            }
            if e.value == 0.0 || !e.value.is_finite() {
                return Err(Error::Corruption(format!(
                    "entry ({}, {}) has invalid value {}",
                    e.row, e.col, e.value
                )));
            }
            if let Some(p) = prev {
                if (e.row, e.col) <= p {
                    return Err(Error::Corruption(format!(
                        "entries not strictly increasing at ({}, {})",
                        e.row, e.col
                    )));
                }
            }
            prev = Some((e.row, e.col));
        }
        Ok(SparseCoo {
            rows,
            cols,
            entries,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseCoo {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    /// Assembles from triples in any order; duplicates are an error,
    /// zeros are dropped.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<CooEntry>) -> Result<Self> {
        entries.retain(|e| e.value != 0.0);
        entries.sort_unstable_by_key(|e| (e.row, e.col));
        if entries
            .windows(2)
            .any(|w| (w[0].row, w[0].col) == (w[1].row, w[1].col))
        {
            return Err(Error::Argument("duplicate coordinates".into()));
        }
        SparseCoo::new(rows, cols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entries(&self) -> &[CooEntry] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn density(&self) -> f64 {
        let total = self.rows * self.cols;
        if total == 0 {
            0.0
        } else {
            self.nnz() as f64 / total as f64
        }
    }

    pub fn densify(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for e in &self.entries {
            m.set(e.row as usize, e.col as usize, e.value);
        }
        m
    }

    /// Counting sort on the column index; entries within a column are
    /// already in row order, so the result is sorted without comparisons.
    pub fn transpose(&self) -> SparseCoo {
        let mut start = vec![0usize; self.cols + 1];
        for e in &self.entries {
            start[e.col as usize + 1] += 1;
        }
        for c in 0..self.cols {
            start[c + 1] += start[c];
        }
        let mut entries = vec![
            CooEntry {
                row: 0,
                col: 0,
                value: 0.0,
            };
            self.entries.len()
        ];
        for e in &self.entries {
            let slot = &mut start[e.col as usize];
            entries[*slot] = CooEntry {
                row: e.col,
                col: e.row,
                value: e.value,
            };
            *slot += 1;
        }
        SparseCoo {
            rows: self.cols,
            cols: self.rows,
            entries,
        }
    }

    /// Keeps the `k` largest-magnitude entries (ties toward the smaller
    /// `(row, col)`).
    pub fn top_k(self, k: usize) -> SparseCoo {
        if k >= self.entries.len() {
            return self;
        }
        let values: Vec<f64> = self.entries.iter().map(|e| e.value).collect();
        let keep = top_k_indices(&values, k);
        let entries = keep.into_iter().map(|i| self.entries[i]).collect();
        SparseCoo {
            rows: self.rows,
            cols: self.cols,
            entries,
        }
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> SparseCoo {
        let entries = self
            .entries
            .iter()
            .map(|e| CooEntry {
                value: f(e.value),
                ..*e
            })
            .filter(|e| e.value != 0.0)
            .collect();
        SparseCoo {
            rows: self.rows,
            cols: self.cols,
            entries,
        }
    }

    /// Adds every entry into `target` in place.
    pub fn add_into(&self, target: &mut Matrix) -> Result<()> {
        if target.shape() != self.shape() {
            return Err(Error::shape("SparseCoo::add_into", self.shape(), target.shape()));
        }
        for e in &self.entries {
            let (r, c) = (e.row as usize, e.col as usize);
            let v = target.get(r, c) + e.value;
            target.set(r, c, v);
        }
        Ok(())
    }

    /// `SGCO` dump: magic, version u32, rows u32, cols u32, nnz u64,
    /// `(row u32, col u32, value f64)` triples, CRC-32 trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.rows as u32);
        w.u32(self.cols as u32);
        w.u64(self.entries.len() as u64);
        for e in &self.entries {
            w.u32(e.row);
            w.u32(e.col);
            w.f64(e.value);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "coo file")?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let nnz = r.u64()?;
        if nnz.checked_mul(16) != Some(r.remaining() as u64) {
            return Err(Error::Format(format!(
                "coo file: nnz {nnz} does not match {} payload bytes",
                r.remaining()
            )));
        }
        let mut entries = Vec::with_capacity(nnz as usize);
        for _ in 0..nnz {
            entries.push(CooEntry {
                row: r.u32()?,
                col: r.u32()?,
                value: r.f64()?,
            });
        }
        r.finish()?;
        SparseCoo::new(rows, cols, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        SparseCoo::from_bytes(&bytes)
    }
}

/// Top-`topk` magnitudes of `m` as COO. Zeros are never stored, so a
/// matrix with fewer than `topk` nonzeros comes back whole.
pub fn coo_from_dense(m: &Matrix, topk: usize) -> Result<SparseCoo> {
    let total = m.rows() * m.cols();
    if topk > total {
        return Err(Error::Argument(format!(
            "topk {topk} exceeds {total} entries"
        )));
    }
    check_index(m.rows(), "row count")?;
    check_index(m.cols(), "col count")?;
    let cols = m.cols();
    let entries = top_k_indices(m.data(), topk)
        .into_iter()
        .map(|i| CooEntry {
            row: (i / cols) as u32,
            col: (i % cols) as u32,
            value: m.data()[i],
        })
        .collect();
    Ok(SparseCoo {
        rows: m.rows(),
        cols,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(row: u32, col: u32, value: f64) -> CooEntry {
        CooEntry { row, col, value }
    }

    #[test]
    fn magnitude_order() {
        let m = Matrix::from_rows(&[[1.0, -5.0], [2.0, 3.0]]);
        let c = coo_from_dense(&m, 1).unwrap();
        assert_eq!(c.entries(), &[e(0, 1, -5.0)]);
        assert_eq!(coo_from_dense(&m, 4).unwrap().densify(), m);
        assert!(coo_from_dense(&m, 5).is_err());
        assert!(coo_from_dense(&m, 0).unwrap().is_empty());
    }

    #[test]
    fn ties_break_lexicographically() {
        let m = Matrix::from_rows(&[[2.0, -2.0], [2.0, 1.0]]);
        let c = coo_from_dense(&m, 2).unwrap();
        assert_eq!(c.entries(), &[e(0, 0, 2.0), e(0, 1, -2.0)]);
        let t = c.clone().top_k(1);
        assert_eq!(t.entries(), &[e(0, 0, 2.0)]);
    }

    #[test]
    fn budget_for_bert_sized_layer() {
        assert_eq!(top_k_count(0.01, 768 * 3072), 23_593);
        assert_eq!(top_k_count(1.0, 10), 10);
        assert_eq!(top_k_count(0.01, 4096), 41);
        assert_eq!(top_k_count(0.5, 4), 2);
    }

    #[test]
    fn construction_validates() {
        assert!(SparseCoo::new(2, 2, vec![e(1, 0, 1.0), e(0, 0, 1.0)]).is_err());
        assert!(SparseCoo::new(2, 2, vec![e(0, 0, 1.0), e(0, 0, 2.0)]).is_err());
        assert!(SparseCoo::new(2, 2, vec![e(2, 0, 1.0)]).is_err());
        assert!(SparseCoo::new(2, 2, vec![e(0, 0, 0.0)]).is_err());
        assert!(SparseCoo::from_triplets(2, 2, vec![e(1, 1, 1.0), e(1, 1, 2.0)]).is_err());
        let c = SparseCoo::from_triplets(2, 3, vec![e(1, 2, 1.0), e(0, 1, 2.0)]).unwrap();
        assert_eq!(c.entries()[0], e(0, 1, 2.0));
        assert_eq!(c.transpose().densify(), c.densify().transpose());
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let c = SparseCoo::from_triplets(3, 4, vec![e(2, 3, -1.25), e(0, 1, 7.0)]).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"SGCO");
        assert_eq!(SparseCoo::from_bytes(&bytes).unwrap(), c);
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(SparseCoo::from_bytes(&bytes[..cut]).is_err());
        }
    }

    proptest! {
        #[test]
        fn kept_magnitudes_dominate_dropped(
            vals in proptest::collection::vec(-4i32..4, 1..40),
            k in 0usize..40,
        ) {
            let cols = 5;
            let rows = vals.len().div_ceil(cols);
            let mut data: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            data.resize(rows * cols, 0.0);
            let m = Matrix::new(rows, cols, data).unwrap();
            let k = k.min(rows * cols);
            let c = coo_from_dense(&m, k).unwrap();
            let nonzeros = m.data().iter().filter(|v| **v != 0.0).count();
            prop_assert_eq!(c.nnz(), k.min(nonzeros));
            let d = c.densify();
            let kept_min = c.entries().iter().map(|e| e.value.abs()).fold(f64::INFINITY, f64::min);
            let dropped_max = m.data().iter().zip(d.data())
                .filter(|(_, kept)| **kept == 0.0)
                .map(|(v, _)| v.abs())
                .fold(0.0, f64::max);
            if c.nnz() > 0 {
                prop_assert!(kept_min >= dropped_max);
            }
            prop_assert_eq!(SparseCoo::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }
}
