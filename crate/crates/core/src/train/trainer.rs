use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, sharpe_loss, CostConfig};
use super::optim::{grad_norm, Adam};
use super::sampler::{sample_unit_count, SamplerConfig};
use crate::diff::{save_checkpoint, DType, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{ForwardOpts, SetSeqModel};
use crate::rng::{derive_seed, stream_rng};
use crate::sim::{simulate, SimConfig, StateTargets, UnitPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Sharpe,
    NetSharpe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub cost: CostConfig,
    pub seed: u64,
    pub precision: DType,
    /// Caps the number of batches per epoch; `None` uses the whole source.
    pub max_steps_per_epoch: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 0.003,
            loss: LossKind::CrossEntropy,
            cost: CostConfig::default(),
            seed: 0,
            precision: DType::F32,
            max_steps_per_epoch: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// What a batch is scored against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    States(StateTargets),
    /// `y[i * t + s]` is unit `i`'s return earned by holding the weight
    /// chosen at `s`; only the first `valid` periods are scored.
    Returns {
        y: Vec<f64>,
        valid: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub panel: UnitPanel,
    pub target: Target,
}

/// Supplies training batches.
pub trait BatchSource {
    fn steps_per_epoch(&self) -> usize;
    fn batch(&mut self, epoch: usize, step: usize, rng: &mut ChaCha8Rng) -> Result<Batch>;
}

/// Simulated episodes, one per batch, each subsampled to a random unit count.
pub struct ContagionSource {
    pub sim: SimConfig,
    pub episodes: usize,
    pub sampler: SamplerConfig,
    order: Vec<usize>,
    order_epoch: Option<usize>,
}

impl ContagionSource {
    pub fn new(sim: SimConfig, episodes: usize, sampler: SamplerConfig) -> Result<Self> {
        sim.validate()?;
        sampler.validate()?;
        if sampler.max_units > sim.m {
            return Err(Error::Config(
                "sampler max_units exceeds the simulated unit count".into(),
            ));
        }
        if episodes == 0 {
            return Err(Error::Config("at least one training episode is required".into()));
        }
        Ok(Self {
            sim,
            episodes,
            sampler,
            order: (0..episodes).collect(),
            order_epoch: None,
        })
    }
}

impl BatchSource for ContagionSource {
    fn steps_per_epoch(&self) -> usize {
        self.episodes
    }

    fn batch(&mut self, epoch: usize, step: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        if self.order_epoch != Some(epoch) {
            self.order = (0..self.episodes).collect();
            self.order.shuffle(rng);
            self.order_epoch = Some(epoch);
        }
        let ep = simulate(&self.sim, self.order[step % self.episodes] as u64)?;
        let d = sample_unit_count(&self.sampler, rng);
        let mut ids = sample(rng, ep.m, d).into_vec();
        ids.sort_unstable();
        Ok(Batch {
            panel: ep.panel(&ids),
            target: Target::States(ep.targets(&ids)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub epoch_secs: Vec<f64>,
    /// Largest number of bytes held by one step's tape values.
    pub peak_tape_bytes: usize,
}

impl TrainReport {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,loss,lr,grad_norm\n");
        for r in &self.history {
            let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, r.lr, r.grad_norm);
        }
        out
    }

    pub fn mean_epoch_secs(&self) -> f64 {
        self.epoch_secs.iter().sum::<f64>() / self.epoch_secs.len().max(1) as f64
    }
}

/// Loss of `model` on one batch recorded on `tape`.
pub fn batch_loss<F: Scalar>(
    model: &SetSeqModel<F>,
    tape: &mut Tape<F>,
    bound: &crate::model::Bound,
    batch: &Batch,
    loss: LossKind,
    cost: &CostConfig,
    opts: &mut ForwardOpts,
) -> Result<crate::diff::Var> {
    let input = tape.constant(batch.panel.to_tensor());
    let out = model.forward(tape, bound, input, opts)?;
    match (&batch.target, loss) {
        (Target::States(t), LossKind::CrossEntropy) => cross_entropy(tape, out.output, &t.labels, &t.mask),
        (Target::Returns { y, valid }, LossKind::Sharpe | LossKind::NetSharpe) => {
            let (m, t_len) = (batch.panel.m, batch.panel.t);
            let raw = tape.reshape(out.output, &[m, t_len])?;
            let raw = tape.narrow(raw, 1, 0, *valid)?;
            let yv = tape.constant(Tensor::new(&[m, t_len], y.iter().map(|&v| F::lit(v)).collect())?);
            let yv = tape.narrow(yv, 1, 0, *valid)?;
            let c = (loss == LossKind::NetSharpe).then_some(cost);
            sharpe_loss(tape, raw, yv, c)
        }
        _ => Err(Error::Config("loss does not match the batch target".into())),
    }
}

/// Fits `model` on batches from `source`.
pub fn train<F: Scalar>(
    model: &mut SetSeqModel<F>,
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = stream_rng(derive_seed(cfg.seed, 1), 0);
    let mut dropout_rng = stream_rng(derive_seed(cfg.seed, 2), 0);
    let mut adam = Adam::new(cfg.learning_rate);
    let decay: BTreeMap<String, f64> = model
        .params
        .keys()
        .filter(|k| k.ends_with("seq.kernel") && model.config.conv_weight_decay > 0.0)
        .map(|k| (k.clone(), model.config.conv_weight_decay))
        .collect();
    let steps = cfg
        .max_steps_per_epoch
        .map_or(source.steps_per_epoch(), |cap| cap.min(source.steps_per_epoch()));
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut report = TrainReport::default();
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        for step in 0..steps {
            let batch = source.batch(epoch, step, &mut rng)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut opts = ForwardOpts {
                train: true,
                rng: Some(&mut dropout_rng),
                uniform_gate: false,
            };
            let loss = batch_loss(model, &mut tape, &bound, &batch, cfg.loss, &cfg.cost, &mut opts)?;
            let loss_value = tape.value(loss).item().as_f64();
            report.peak_tape_bytes = report.peak_tape_bytes.max(tape.value_bytes());
            let mut grads = tape.backward(loss)?;
            let grads = bound.collect(&tape, &mut grads);
            drop(tape);
            let norm = grad_norm(&grads);
            if !loss_value.is_finite() || !norm.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite training state at step {global}: loss {loss_value}, gradient norm {norm}"
                )));
            }
            adam.update(&mut model.params, &grads, &decay)?;
            report.history.push(HistoryRow {
                step: global,
                epoch,
                loss: loss_value,
                lr: cfg.learning_rate,
                grad_norm: norm,
            });
            global += 1;
        }
        report.epoch_secs.push(start.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch}: mean loss {:.6}",
            report.history[report.history.len() - steps..]
                .iter()
                .map(|r| r.loss)
                .sum::<f64>()
                / steps as f64
        );
        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(&dir.join(format!("epoch{epoch:03}.ssck")), &model.params)?;
            crate::diff::write_file_atomic(&dir.join("history.csv"), report.history_csv().as_bytes())?;
        }
    }
    Ok(report)
}
