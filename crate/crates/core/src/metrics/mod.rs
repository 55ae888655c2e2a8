//! Evaluation metrics: one-vs-rest AUC, KL divergence, R² and correlation
//! against known probabilities, portfolio statistics and the summary probe.

mod portfolio;
mod probe;

pub use portfolio::{portfolio_stats, PortfolioEval, TRADING_DAYS};
pub use probe::interpretability_corr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Episode, STATES};

/// Predictions are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Transitions seen fewer times than this are left out of the average AUC.
pub const MIN_TRANSITION_COUNT: usize = 10;

/// One-vs-rest AUC of `scores` for the cells flagged `positive`.
///
/// Ties between a positive and a negative count one half. Runs in
/// `O(n log n)` by ranking the scores.
pub fn auc_one_vs_rest(scores: &[f64], positive: &[bool]) -> Result<f64> {
    check_auc_inputs(scores, positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks with tied groups sharing their mid rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos = order[i..=j].iter().filter(|&&k| positive[k]).count();
        rank_sum += mid * pos as f64;
        i = j + 1;
    }
    let p = positive.iter().filter(|&&v| v).count() as f64;
    let n = scores.len() as f64 - p;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Reference `O(n²)` pairwise AUC.
pub fn auc_naive(scores: &[f64], positive: &[bool]) -> Result<f64> {
    check_auc_inputs(scores, positive)?;
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    Ok(wins / pairs)
}

fn check_auc_inputs(scores: &[f64], positive: &[bool]) -> Result<()> {
    if scores.len() != positive.len() {
        return Err(Error::shape("auc", &[scores.len()], &[positive.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("AUC scores contain NaN"));
    }
    let p = positive.iter().filter(|&&v| v).count();
    if p == 0 || p == positive.len() {
        return Err(Error::Undefined(format!(
            "AUC needs both classes ({p} positives of {})",
            positive.len()
        )));
    }
    Ok(())
}

/// KL divergences between true and predicted distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlMetrics {
    /// Mean of `p_k log(p_k / q_k)` for the absorbing class only.
    pub kl_absorbing: f64,
    /// Mean over cells of the full `KL(p || q)`.
    pub kl_full: f64,
}

/// KL metrics over cells of `classes` probabilities each, laid out row-wise.
pub fn kl_metrics(p: &[f64], q: &[f64], classes: usize, k: usize) -> Result<KlMetrics> {
    if p.len() != q.len() || classes == 0 || !p.len().is_multiple_of(classes) || k >= classes {
        return Err(Error::shape("kl_metrics", &[p.len(), classes], &[q.len(), k]));
    }
    if p.iter().chain(q).any(|v| v.is_nan()) {
        return Err(Error::numeric("KL inputs contain NaN"));
    }
    let cells = p.len() / classes;
    if cells == 0 {
        return Err(Error::Undefined("KL over zero cells".into()));
    }
    let term = |pv: f64, qv: f64| {
        if pv > 0.0 {
            pv * (pv / qv.max(PROB_FLOOR)).ln()
        } else {
            0.0
        }
    };
    let mut full = 0.0;
    let mut absorbing = 0.0;
    for (pr, qr) in p.chunks(classes).zip(q.chunks(classes)) {
        full += pr.iter().zip(qr).map(|(&a, &b)| term(a, b)).sum::<f64>();
        absorbing += term(pr[k], qr[k]);
    }
    Ok(KlMetrics {
        kl_absorbing: absorbing / cells as f64,
        kl_full: full / cells as f64,
    })
}

/// Coefficient of determination of `pred` for `truth`.
pub fn r2(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_res: f64 = truth.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|a| (a - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("R² of a constant target".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation with a constant series".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `(R², Pearson ρ)` of predicted against true probabilities.
pub fn r2_and_corr(truth: &[f64], pred: &[f64]) -> Result<(f64, f64)> {
    Ok((r2(truth, pred)?, pearson(truth, pred)?))
}

/// Spearman rank correlation, with tied values sharing their mean rank.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&ranks(a), &ranks(b))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            out[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    out
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("paired series", &[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Err(Error::Undefined("need at least two samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::numeric("series contain non-finite values"));
    }
    Ok(())
}

/// Row-wise softmax of `logits` with `classes` columns.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// One-vs-rest AUC for a `from -> to` state transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionAuc {
    pub from: u8,
    pub to: u8,
    pub count: usize,
    pub auc: Option<f64>,
}

/// Evaluation of predicted transition probabilities on the contagion task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEval {
    pub cells: usize,
    /// AUC of the absorbing state against all others over every cell.
    pub auc_absorbing: Option<f64>,
    /// Unweighted mean of transition AUCs seen at least
    /// [`MIN_TRANSITION_COUNT`] times.
    pub average_auc: Option<f64>,
    pub transitions: Vec<TransitionAuc>,
    pub kl_absorbing: f64,
    pub kl_full: f64,
    pub r2_absorbing: Option<f64>,
    pub corr_absorbing: Option<f64>,
}

/// Gathered true and predicted probabilities over the evaluated cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellSet {
    pub from: Vec<u8>,
    pub to: Vec<u8>,
    pub p_true: Vec<f64>,
    pub p_pred: Vec<f64>,
}

impl CellSet {
    /// Collects cells of `ids` that are active at `t < T - 1`. `pred` holds
    /// `[ids.len(), T, 3]` probabilities.
    pub fn collect(ep: &Episode, ids: &[usize], pred: &[f64]) -> Result<Self> {
        if pred.len() != ids.len() * ep.t * STATES {
            return Err(Error::shape("CellSet", &[pred.len()], &[ids.len(), ep.t, STATES]));
        }
        let mut set = CellSet::default();
        set.extend(ep, ids, pred);
        Ok(set)
    }

    pub fn extend(&mut self, ep: &Episode, ids: &[usize], pred: &[f64]) {
        for (row, &i) in ids.iter().enumerate() {
            for s in 0..ep.t.saturating_sub(1) {
                if !ep.is_active(i, s) {
                    continue;
                }
                self.from.push(ep.state(i, s));
                self.to.push(ep.state(i, s + 1));
                self.p_true.extend_from_slice(ep.probs(i, s));
                let at = (row * ep.t + s) * STATES;
                self.p_pred.extend_from_slice(&pred[at..at + STATES]);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.from.len()
    }

    pub fn is_empty(&self) -> bool {
        self.from.is_empty()
    }

    fn class_column(values: &[f64], c: usize) -> Vec<f64> {
        values.chunks(STATES).map(|r| r[c]).collect()
    }

    pub fn evaluate(&self) -> Result<ClassificationEval> {
        let k = STATES - 1;
        let kl = kl_metrics(&self.p_true, &self.p_pred, STATES, k)?;
        let pred_k = Self::class_column(&self.p_pred, k);
        let true_k = Self::class_column(&self.p_true, k);
        let absorbed: Vec<bool> = self.to.iter().map(|&s| s as usize == STATES).collect();
        let auc_absorbing = auc_one_vs_rest(&pred_k, &absorbed).ok();
        let mut transitions = Vec::new();
        for from in 1..STATES as u8 {
            let rows: Vec<usize> = (0..self.len()).filter(|&i| self.from[i] == from).collect();
            for to in 1..=STATES as u8 {
                let positive: Vec<bool> = rows.iter().map(|&i| self.to[i] == to).collect();
                let count = positive.iter().filter(|&&v| v).count();
                let scores: Vec<f64> = rows
                    .iter()
                    .map(|&i| self.p_pred[i * STATES + to as usize - 1])
                    .collect();
                let auc = if count >= MIN_TRANSITION_COUNT {
                    auc_one_vs_rest(&scores, &positive).ok()
                } else {
                    None
                };
                transitions.push(TransitionAuc { from, to, count, auc });
            }
        }
        let valid: Vec<f64> = transitions.iter().filter_map(|t| t.auc).collect();
        let average_auc = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
        Ok(ClassificationEval {
            cells: self.len(),
            auc_absorbing,
            average_auc,
            transitions,
            kl_absorbing: kl.kl_absorbing,
            kl_full: kl.kl_full,
            r2_absorbing: r2(&true_k, &pred_k).ok(),
            corr_absorbing: pearson(&true_k, &pred_k).ok(),
        })
    }
}

/// Evaluates `[ids.len(), T, 3]` predicted probabilities on one episode.
pub fn evaluate_contagion(ep: &Episode, ids: &[usize], pred: &[f64]) -> Result<ClassificationEval> {
    CellSet::collect(ep, ids, pred)?.evaluate()
}
