//! Losses, optimiser, batch sampling and the training loop.

mod loss;
mod optim;
mod recency;
mod sampler;
mod trainer;

pub use loss::{cross_entropy, l1_normalize, neg_sharpe, portfolio_returns, sharpe_loss, CostConfig, L1_EPS};
pub use optim::{grad_norm, Adam};
pub use recency::{recency_probabilities, recency_weights, RecencyConfig};
pub use sampler::{sample_unit_count, SamplerConfig, SamplerMode};
pub use trainer::{
    batch_loss, train, Batch, BatchSource, ContagionSource, HistoryRow, LossKind, Target, TrainConfig, TrainReport,
};
