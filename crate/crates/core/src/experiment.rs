//! Evaluation drivers shared by the command line and the acceptance tests:
//! partial-observation sweeps for the model and the Kalman oracle, and the
//! summary-probe matrix.

use serde::{Deserialize, Serialize};

use crate::diff::Scalar;
use crate::error::{Error, Result};
use crate::kalman::{filter_observation, oracle_predict, KalmanVariant};
use crate::metrics::{interpretability_corr, softmax_rows, CellSet, ClassificationEval};
use crate::model::{LayerTrace, SetSeqModel};
use crate::rng::{derive_seed, stream_rng};
use crate::sim::{observe, simulate, Episode, Observation, SimConfig, STATES};

/// First stream index of held-out evaluation episodes; training uses the
/// streams below it.
pub const TEST_STREAM_BASE: u64 = 1 << 32;

/// Predicted next-state probabilities of `model` for the listed units,
/// `[ids.len(), T, 3]`, and the summary trace.
pub fn model_probs<F: Scalar>(model: &SetSeqModel<F>, ep: &Episode, ids: &[usize]) -> Result<(Vec<f64>, LayerTrace)> {
    let (out, trace) = model.predict(&ep.panel(ids))?;
    if out.shape().last() != Some(&STATES) {
        return Err(Error::shape("model_probs", out.shape(), &[ids.len(), ep.t, STATES]));
    }
    Ok((softmax_rows(&out.to_f64(), STATES), trace))
}

/// Kalman-oracle probabilities for the observed units.
pub fn kalman_probs(ep: &Episode, obs: &Observation, variant: KalmanVariant, sim: &SimConfig) -> Result<Vec<f64>> {
    let [p0, p1] = filter_observation(obs, variant, sim)?;
    oracle_predict(ep, &obs.observed_ids, &[p0.lambda_hat, p1.lambda_hat], sim.mu)
}

/// Held-out episodes and observation draws for a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub unit_counts: Vec<usize>,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            unit_counts: vec![10, 50, 100, 200, 500, 1000],
            episodes: 100,
            seed: 0,
        }
    }
}

/// Pooled metrics of one method at one observed-unit count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub method: String,
    pub eval: ClassificationEval,
}

/// Which units are observed in sweep episode `e` at count `n`. The draw is
/// shared by every method.
pub fn sweep_observation(ep: &Episode, sim: &SimConfig, n: usize, seed: u64, e: usize) -> Result<Observation> {
    let mut rng = stream_rng(derive_seed(seed, n as u64), e as u64);
    observe(ep, n, sim.denominator_mode, &mut rng)
}

/// Evaluates the Kalman oracle and, when given, a model over held-out
/// episodes at each unit count. Cells are pooled across episodes.
pub fn sweep_units<F: Scalar>(
    sim: &SimConfig,
    cfg: &SweepConfig,
    variant: KalmanVariant,
    model: Option<&SetSeqModel<F>>,
) -> Result<Vec<SweepPoint>> {
    if cfg.unit_counts.iter().any(|&n| n == 0 || n > sim.m) {
        return Err(Error::Config(format!("unit counts must lie in [1, {}]", sim.m)));
    }
    let mut oracle = vec![CellSet::default(); cfg.unit_counts.len()];
    let mut learned = vec![CellSet::default(); cfg.unit_counts.len()];
    for e in 0..cfg.episodes {
        let ep = simulate(sim, TEST_STREAM_BASE + e as u64)?;
        for (j, &n) in cfg.unit_counts.iter().enumerate() {
            let obs = sweep_observation(&ep, sim, n, cfg.seed, e)?;
            let probs = kalman_probs(&ep, &obs, variant, sim)?;
            oracle[j].extend(&ep, &obs.observed_ids, &probs);
            if let Some(model) = model {
                let (probs, _) = model_probs(model, &ep, &obs.observed_ids)?;
                learned[j].extend(&ep, &obs.observed_ids, &probs);
            }
        }
    }
    let mut out = Vec::new();
    for (j, &n) in cfg.unit_counts.iter().enumerate() {
        out.push(SweepPoint {
            n,
            method: "kalman".into(),
            eval: oracle[j].evaluate()?,
        });
        if model.is_some() {
            out.push(SweepPoint {
                n,
                method: "model".into(),
                eval: learned[j].evaluate()?,
            });
        }
    }
    Ok(out)
}

/// Long-format CSV rows `n,method,metric,value` of a sweep.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("n,method,metric,value\n");
    for p in points {
        let metrics = [
            ("auc", p.eval.auc_absorbing),
            ("r2", p.eval.r2_absorbing),
            ("corr", p.eval.corr_absorbing),
            ("kl_full", Some(p.eval.kl_full)),
            ("kl_absorbing", Some(p.eval.kl_absorbing)),
        ];
        for (name, v) in metrics {
            let v = v.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!("{},{},{},{}\n", p.n, p.method, name, v));
        }
    }
    out
}

/// Mean `|corr|` between each layer's first summary dimension and the
/// group-0 intensity, per observed-unit count: `result[j][layer]`.
///
/// Episodes where a layer's summary is constant are skipped for that layer;
/// a layer that is never defined reports NaN.
pub fn probe_matrix<F: Scalar>(model: &SetSeqModel<F>, sim: &SimConfig, cfg: &SweepConfig) -> Result<Vec<Vec<f64>>> {
    let layers = model.config.n_setseq_layers;
    if !model.config.uses_summary() {
        return Err(Error::Config("the model has no set summary to probe".into()));
    }
    let mut sums = vec![vec![(0.0, 0usize); layers]; cfg.unit_counts.len()];
    for e in 0..cfg.episodes {
        let ep = simulate(sim, TEST_STREAM_BASE + e as u64)?;
        for (j, &n) in cfg.unit_counts.iter().enumerate() {
            let obs = sweep_observation(&ep, sim, n, cfg.seed, e)?;
            let (_, trace) = model.predict(&ep.panel(&obs.observed_ids))?;
            for (l, corr) in interpretability_corr(&trace, &ep.lambda[0])?.into_iter().enumerate() {
                if let Ok(c) = corr {
                    sums[j][l].0 += c;
                    sums[j][l].1 += 1;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(s, c)| if c > 0 { s / c as f64 } else { f64::NAN })
                .collect()
        })
        .collect())
}
