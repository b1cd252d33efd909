use serde::Serialize;

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::sparse::top_k_count;

use super::{GradientLog, TransitionBasis};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SliceConcentration {
    pub original: f64,
    pub transformed: f64,
}

/// Share of each slice's squared Frobenius norm held by its largest
/// `⌈fraction · entries⌉` magnitudes, before and after the basis change.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityReport {
    pub fraction: f64,
    pub kept_entries: usize,
    pub slices: Vec<SliceConcentration>,
    pub mean_original: f64,
    pub mean_transformed: f64,
}

/// Energy share of the `k` largest magnitudes. An all-zero matrix counts as
/// fully concentrated.
pub(crate) fn energy_concentration(m: &Matrix, k: usize) -> f64 {
    let mut sq: Vec<f64> = m.data().iter().map(|v| v * v).collect();
    let total: f64 = sq.iter().sum();
    if total == 0.0 {
        return 1.0;
    }
    if k < sq.len() {
        sq.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
        sq.truncate(k);
    }
    sq.iter().sum::<f64>() / total
}

pub fn sparsity_report(
    log: &GradientLog,
    basis: &TransitionBasis,
    fraction: f64,
) -> Result<SparsityReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if (basis.d_in(), basis.d_out()) != (log.d_in, log.d_out) {
        return Err(Error::shape(
            "sparsity_report",
            (log.d_in, log.d_out),
            (basis.d_in(), basis.d_out()),
        ));
    }
    let k = top_k_count(fraction, log.d_in * log.d_out);
    let slices = log
        .slices()
        .iter()
        .map(|g| {
            Ok(SliceConcentration {
                original: energy_concentration(g, k),
                transformed: energy_concentration(&basis.transform(g)?, k),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = slices.len().max(1) as f64;
    Ok(SparsityReport {
        fraction,
        kept_entries: k,
        mean_original: slices.iter().map(|s| s.original).sum::<f64>() / n,
        mean_transformed: slices.iter().map(|s| s.transformed).sum::<f64>() / n,
        slices,
    })
}
