use super::pearson;
use crate::error::{Error, Result};
use crate::model::LayerTrace;

/// `|corr|` between each layer's first summary dimension and `lambda`.
///
/// A layer whose summary is constant yields an undefined-metric error in its
/// slot; the other layers are unaffected.
pub fn interpretability_corr(trace: &LayerTrace, lambda: &[f64]) -> Result<Vec<Result<f64>>> {
    if lambda.len() != trace.t {
        return Err(Error::shape("interpretability_corr", &[trace.t], &[lambda.len()]));
    }
    Ok((0..trace.layers.len())
        .map(|l| pearson(trace.series(l, 0), lambda).map(f64::abs))
        .collect())
}
