use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How many units a training batch exposes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// All units with probability `1 - gamma`, otherwise log-uniform on `[1, M]`.
    Mixture,
    /// Always `k` units.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub gamma: f64,
    pub max_units: usize,
    pub mode: SamplerMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::mixture(1000)
    }
}

impl SamplerConfig {
    pub fn mixture(max_units: usize) -> Self {
        Self {
            gamma: 0.08,
            max_units,
            mode: SamplerMode::Mixture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.max_units == 0 {
            return Err(Error::Config("max_units must be at least 1".into()));
        }
        if let SamplerMode::Fixed(k) = self.mode {
            if k == 0 || k > self.max_units {
                return Err(Error::Config(format!(
                    "fixed unit count {k} outside [1, {}]",
                    self.max_units
                )));
            }
        }
        Ok(())
    }
}

/// Draws the unit count for one batch.
pub fn sample_unit_count<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> usize {
    let m = cfg.max_units;
    match cfg.mode {
        SamplerMode::Fixed(k) => k,
        SamplerMode::Mixture => {
            if rng.gen::<f64>() >= cfg.gamma {
                m
            } else {
                let u: f64 = rng.gen_range(0.0..=(m as f64).ln());
                (u.exp().round() as usize).clamp(1, m)
            }
        }
    }
}
