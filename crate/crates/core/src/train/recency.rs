use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponential down-weighting of older training windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecencyConfig {
    pub half_life: f64,
    pub t_max: f64,
}

impl RecencyConfig {
    pub fn decay_rate(&self) -> f64 {
        std::f64::consts::LN_2 / self.half_life
    }
}

/// Weight `exp(rate * (t - t_max))` per window time.
pub fn recency_weights(times: &[f64], cfg: &RecencyConfig) -> Result<Vec<f64>> {
    if !(cfg.half_life > 0.0) {
        return Err(Error::domain(format!(
            "half-life must be positive, got {}",
            cfg.half_life
        )));
    }
    let rate = cfg.decay_rate();
    Ok(times.iter().map(|&t| (rate * (t - cfg.t_max)).exp()).collect())
}

/// Weights rescaled to sampling probabilities.
pub fn recency_probabilities(times: &[f64], cfg: &RecencyConfig) -> Result<Vec<f64>> {
    let w = recency_weights(times, cfg)?;
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_life_halves_the_weight() {
        let cfg = RecencyConfig {
            half_life: 250.0,
            t_max: 1000.0,
        };
        let w = recency_weights(&[1000.0, 750.0, 500.0], &cfg).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 0.5).abs() < 1e-15);
        assert!((w[2] - 0.25).abs() < 1e-15);
        let p = recency_probabilities(&[1000.0, 750.0, 500.0], &cfg).unwrap();
        assert!((p[0] - 1.0 / 1.75).abs() < 1e-15);
    }

    #[test]
    fn non_positive_half_life_is_rejected() {
        let cfg = RecencyConfig {
            half_life: 0.0,
            t_max: 0.0,
        };
        assert!(recency_weights(&[0.0], &cfg).is_err());
    }
}
