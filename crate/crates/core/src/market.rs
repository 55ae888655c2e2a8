//! Synthetic factor market with a known, partly predictable alpha, used to
//! exercise Sharpe-ratio training and the backtest ledger.
//!
//! Each asset carries a persistent AR(1) signal `s_t`. Its next-day return is
//! `a * s_t + b_i . f_{t+1} + e_{t+1}` where `f` are common factor returns
//! (the first has a positive drift) and `e` is idiosyncratic noise. The scale
//! `a` is set so the signal explains `signal_strength` of the return variance.
//! Models see the cross-sectional ranks of the signal and of the latest
//! return; the oracle holds weights proportional to the signal itself.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::Scalar;
use crate::error::{Error, Result};
use crate::metrics::{portfolio_stats, PortfolioEval};
use crate::model::SetSeqModel;
use crate::rng::stream_rng;
use crate::sim::UnitPanel;
use crate::train::{Batch, BatchSource, CostConfig, Target, L1_EPS};

/// Feature names of [`Market::features`], in column order.
pub const MARKET_FEATURES: [&str; 2] = ["signal_rank", "return_rank"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketConfig {
    pub n_assets: usize,
    pub t_train: usize,
    pub t_test: usize,
    /// Share of next-day return variance explained by the signal.
    pub signal_strength: f64,
    pub signal_ar: f64,
    pub n_factors: usize,
    pub factor_vol: f64,
    /// Daily drift of the first (market) factor.
    pub market_drift: f64,
    /// Cross-sectional dispersion of factor loadings.
    pub loading_sd: f64,
    pub idio_vol: f64,
    pub seed: u64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            n_assets: 500,
            t_train: 750,
            t_test: 250,
            signal_strength: 0.1,
            signal_ar: 0.95,
            n_factors: 3,
            factor_vol: 0.01,
            market_drift: 0.0004,
            loading_sd: 0.3,
            idio_vol: 0.02,
            seed: 0,
        }
    }
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_assets < 2 {
            return Err(Error::Config("n_assets must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.signal_strength) {
            return Err(Error::Config("signal_strength must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.signal_ar) {
            return Err(Error::Config("signal_ar must lie in [0, 1)".into()));
        }
        if self.n_factors == 0 {
            return Err(Error::Config("at least one factor is required".into()));
        }
        if self.t_train < 2 || self.t_test < 2 {
            return Err(Error::Config("train and test spans need at least two days".into()));
        }
        if [self.factor_vol, self.loading_sd, self.idio_vol]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::Config("volatilities must be non-negative".into()));
        }
        Ok(())
    }

    pub fn days(&self) -> usize {
        self.t_train + self.t_test
    }

    /// Scale of the signal in returns for the configured variance share.
    pub fn signal_scale(&self) -> f64 {
        let loadings = 1.0 + self.n_factors as f64 * self.loading_sd.powi(2);
        let noise = loadings * self.factor_vol.powi(2) + self.idio_vol.powi(2);
        (self.signal_strength / (1.0 - self.signal_strength) * noise).sqrt()
    }
}

/// A generated market over `t_train + t_test` days.
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub n: usize,
    pub t: usize,
    pub t_train: usize,
    /// Features known at the close of each day, `[n, t, 2]`.
    pub features: UnitPanel,
    /// `returns[i * t + d]` is asset `i`'s return on day `d`.
    pub returns: Vec<f64>,
    /// The persistent signal `s_t`, laid out like `returns`.
    pub signal: Vec<f64>,
    /// Expected next-day return, `a` times the cross-sectionally centred `s_t`.
    pub alpha: Vec<f64>,
    /// Equal-weight market return per day.
    pub market: Vec<f64>,
}

pub fn generate_market(cfg: &MarketConfig) -> Result<Market> {
    cfg.validate()?;
    let (n, t) = (cfg.n_assets, cfg.days());
    let mut rng: ChaCha8Rng = stream_rng(cfg.seed, 0x6d61726b6574);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let loadings: Vec<f64> = (0..n * cfg.n_factors)
        .map(|j| {
            let base = if j % cfg.n_factors == 0 { 1.0 } else { 0.0 };
            base + cfg.loading_sd * normal()
        })
        .collect();
    let a = cfg.signal_scale();
    let innov = (1.0 - cfg.signal_ar.powi(2)).sqrt();
    let mut current: Vec<f64> = (0..n).map(|_| normal()).collect();
    let mut signal = vec![0.0; n * t];
    let mut alpha = vec![0.0; n * t];
    let mut returns = vec![0.0; n * t];
    for d in 0..t {
        let factors: Vec<f64> = (0..cfg.n_factors)
            .map(|f| {
                let drift = if f == 0 { cfg.market_drift } else { 0.0 };
                drift + cfg.factor_vol * normal()
            })
            .collect();
        for i in 0..n {
            let prev_alpha = if d > 0 { alpha[i * t + d - 1] } else { 0.0 };
            let exposure: f64 = loadings[i * cfg.n_factors..(i + 1) * cfg.n_factors]
                .iter()
                .zip(&factors)
                .map(|(b, f)| b * f)
                .sum();
            returns[i * t + d] = prev_alpha + exposure + cfg.idio_vol * normal();
            if d > 0 {
                current[i] = cfg.signal_ar * current[i] + innov * normal();
            }
            signal[i * t + d] = current[i];
        }
        // Centring keeps the signal book neutral to the common drift.
        let centre = current.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            alpha[i * t + d] = a * (current[i] - centre);
        }
    }
    let mut data = vec![0.0; n * t * MARKET_FEATURES.len()];
    let mut column = vec![0.0; n];
    for (c, source) in [&signal, &returns].into_iter().enumerate() {
        for d in 0..t {
            for i in 0..n {
                column[i] = source[i * t + d];
            }
            for (i, r) in rank_normalize(&column).into_iter().enumerate() {
                data[(i * t + d) * MARKET_FEATURES.len() + c] = r;
            }
        }
    }
    let market = (0..t)
        .map(|d| (0..n).map(|i| returns[i * t + d]).sum::<f64>() / n as f64)
        .collect();
    Ok(Market {
        n,
        t,
        t_train: cfg.t_train,
        features: UnitPanel::new(n, t, MARKET_FEATURES.len(), data)?,
        returns,
        signal,
        alpha,
        market,
    })
}

/// Cross-sectional ranks mapped to `[-0.5, 0.5]`, ties sharing their mean rank.
pub fn rank_normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = rank / (n - 1) as f64 - 0.5;
        }
        i = j + 1;
    }
    out
}

impl Market {
    /// Return of asset `i` on day `d`.
    pub fn ret(&self, i: usize, d: usize) -> f64 {
        self.returns[i * self.t + d]
    }

    /// Oracle weights for `days`: the weight held on day `d` is proportional
    /// to the centred signal, and so to the expected return, known at the
    /// close of `d - 1`. Unlike `alpha` it stays defined without a signal.
    pub fn oracle_weights(&self, days: std::ops::Range<usize>) -> Vec<Vec<f64>> {
        days.map(|d| {
            let s: Vec<f64> = (0..self.n).map(|i| self.signal[i * self.t + d - 1]).collect();
            let centre = s.iter().sum::<f64>() / self.n as f64;
            l1_normalized(&s.iter().map(|v| v - centre).collect::<Vec<_>>())
        })
        .collect()
    }

    pub fn equal_weights(&self, days: std::ops::Range<usize>) -> Vec<Vec<f64>> {
        days.map(|_| vec![1.0 / self.n as f64; self.n]).collect()
    }

    /// Weights from a model run over all days. The weight held on day `d`
    /// is the normalised model output at `d - 1`, so it only depends on
    /// features up to the previous close.
    pub fn model_weights<F: Scalar>(
        &self,
        model: &SetSeqModel<F>,
        days: std::ops::Range<usize>,
    ) -> Result<Vec<Vec<f64>>> {
        let (out, _) = model.predict(&self.features)?;
        if out.numel() != self.n * self.t {
            return Err(Error::shape("model_weights", out.shape(), &[self.n, self.t, 1]));
        }
        let raw = out.to_f64();
        Ok(days
            .map(|d| l1_normalized(&(0..self.n).map(|i| raw[i * self.t + d - 1]).collect::<Vec<_>>()))
            .collect())
    }

    /// Test-period days, excluding the first day of the series.
    pub fn test_days(&self) -> std::ops::Range<usize> {
        self.t_train.max(1)..self.t
    }

    /// Training batch source of random windows from the training span.
    pub fn source(&self, window: usize, steps: usize) -> Result<MarketSource<'_>> {
        if window < 3 || window > self.t_train {
            return Err(Error::Config(format!("window must lie in [3, {}]", self.t_train)));
        }
        Ok(MarketSource {
            market: self,
            window,
            steps,
        })
    }
}

/// Scales `w` to unit L1 norm, with the same epsilon as the training loss.
pub fn l1_normalized(w: &[f64]) -> Vec<f64> {
    let norm: f64 = w.iter().map(|v| v.abs()).sum::<f64>() + L1_EPS;
    w.iter().map(|v| v / norm).collect()
}

/// Random training windows; the weight chosen at window position `s` is
/// scored on the next day's return.
pub struct MarketSource<'a> {
    market: &'a Market,
    window: usize,
    steps: usize,
}

impl BatchSource for MarketSource<'_> {
    fn steps_per_epoch(&self) -> usize {
        self.steps
    }

    fn batch(&mut self, _epoch: usize, _step: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let m = self.market;
        // The last scored return must fall inside the training span.
        let start = rng.gen_range(0..=m.t_train - self.window);
        let panel = m.features.window(start, self.window);
        let mut y = vec![0.0; m.n * self.window];
        for i in 0..m.n {
            for s in 0..self.window - 1 {
                y[i * self.window + s] = m.ret(i, start + s + 1);
            }
        }
        Ok(Batch {
            panel,
            target: Target::Returns {
                y,
                valid: self.window - 1,
            },
        })
    }
}

/// Day-by-day record of a strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestLedger {
    pub days: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub gross: Vec<f64>,
    pub cost: Vec<f64>,
    pub net: Vec<f64>,
    pub turnover: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl BacktestLedger {
    /// RFC 4180 CSV with one row per day.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("day,gross,net,cost,turnover\n");
        for k in 0..self.days.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.days[k], self.gross[k], self.net[k], self.cost[k], self.turnover[k]
            ));
        }
        out
    }
}

/// Runs `weights` (one vector per day in `days`) through the market.
///
/// Costs follow the training loss: a short-book rate every day plus a
/// turnover rate from the second day on.
pub fn backtest(
    market: &Market,
    days: std::ops::Range<usize>,
    weights: Vec<Vec<f64>>,
    cost: Option<&CostConfig>,
) -> Result<(BacktestLedger, PortfolioEval)> {
    let days: Vec<usize> = days.collect();
    if weights.len() != days.len() || days.iter().any(|&d| d >= market.t) {
        return Err(Error::shape("backtest", &[weights.len()], &[days.len()]));
    }
    if weights.iter().any(|w| w.len() != market.n) {
        return Err(Error::domain("every weight vector must cover all assets"));
    }
    let mut gross = Vec::with_capacity(days.len());
    let mut costs = Vec::with_capacity(days.len());
    let mut turnover = Vec::with_capacity(days.len());
    for (k, (&d, w)) in days.iter().zip(&weights).enumerate() {
        gross.push(w.iter().enumerate().map(|(i, wi)| wi * market.ret(i, d)).sum::<f64>());
        let tv = if k == 0 {
            0.0
        } else {
            w.iter().zip(&weights[k - 1]).map(|(a, b)| (a - b).abs()).sum()
        };
        turnover.push(tv);
        let short: f64 = w.iter().map(|&v| (-v).max(0.0)).sum();
        costs.push(cost.map_or(0.0, |c| c.short_rate * short + c.turnover_rate * tv));
    }
    let net: Vec<f64> = gross.iter().zip(&costs).map(|(r, c)| r - c).collect();
    let market_r: Vec<f64> = days.iter().map(|&d| market.market[d]).collect();
    let eval = portfolio_stats(&weights, &net, &market_r)?;
    let ledger = BacktestLedger {
        days,
        weights,
        gross,
        cost: costs,
        net,
        turnover,
        cumulative: eval.cumulative_return.clone(),
    };
    Ok((ledger, eval))
}
