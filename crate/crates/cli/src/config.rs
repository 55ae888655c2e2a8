//! Run configuration: one JSON document with a section per component.
//! Every section is optional and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use setseq_core::experiment::SweepConfig;
use setseq_core::kalman::KalmanVariant;
use setseq_core::market::MarketConfig;
use setseq_core::model::{SetSeqConfig, SummaryVariant};
use setseq_core::sim::SimConfig;
use setseq_core::train::{LossKind, SamplerConfig, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub model: SetSeqConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Training episodes per epoch.
    pub episodes: usize,
    /// Held-out episodes for `eval`.
    pub test_episodes: usize,
    pub sweep: SweepConfig,
    pub kalman_variant: KalmanVariant,
    pub market: MarketConfig,
    pub portfolio: PortfolioConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            model: SetSeqConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            episodes: 250,
            test_episodes: 100,
            sweep: SweepConfig::default(),
            kalman_variant: KalmanVariant::default(),
            market: MarketConfig::default(),
            portfolio: PortfolioConfig::default(),
        }
    }
}

/// Sharpe-ratio training on the synthetic market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PortfolioConfig {
    pub model: SetSeqConfig,
    /// Days per training window.
    pub window: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        Self {
            model: SetSeqConfig {
                input_dim: 2,
                n_setseq_layers: 1,
                n_plain_seq_layers: 1,
                d_model: 8,
                phi_out_dim: 4,
                kernel_len: 10,
                mha_heads: 2,
                output_dim: 1,
                ..SetSeqConfig::default()
            },
            window: 60,
            steps_per_epoch: 50,
            epochs: 3,
            learning_rate: 0.003,
            loss: LossKind::NetSharpe,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        Ok(cfg)
    }

    /// Applies the global command-line overrides and validates the result.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        variant: Option<SummaryVariant>,
        kalman: Option<KalmanVariant>,
    ) -> CliResult<Self> {
        if let Some(seed) = seed {
            self.sim.seed = seed;
            self.train.seed = seed;
            self.sweep.seed = seed;
            self.market.seed = seed;
        }
        if let Some(v) = variant {
            self.model.variant = v;
            self.portfolio.model.variant = v;
        }
        if let Some(k) = kalman {
            self.kalman_variant = k;
        }
        self.sim.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.market.validate()?;
        self.portfolio.model.validate()?;
        if self.episodes == 0 || self.test_episodes == 0 {
            return Err(CliError::Config("episodes and test_episodes must be positive".into()));
        }
        if self.portfolio.window < 3 || self.portfolio.window > self.market.t_train {
            return Err(CliError::Config(format!(
                "portfolio window must lie in [3, {}]",
                self.market.t_train
            )));
        }
        Ok(self)
    }
}
