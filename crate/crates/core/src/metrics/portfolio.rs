use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Annualisation constant for daily series.
pub const TRADING_DAYS: f64 = 252.0;

/// Summary statistics of a daily strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioEval {
    pub sharpe_annualized: f64,
    pub mean_return_annualized: f64,
    pub std_return_annualized: f64,
    pub beta: Option<f64>,
    pub daily_turnover: f64,
    pub short_fraction: f64,
    pub cumulative_return: Vec<f64>,
}

/// Statistics of daily `returns` for weights `weights[T][N]` against
/// `market` returns.
///
/// The Sharpe ratio uses the population standard deviation. Turnover is
/// the mean L1 change between consecutive days and is zero for a single day.
pub fn portfolio_stats(weights: &[Vec<f64>], returns: &[f64], market: &[f64]) -> Result<PortfolioEval> {
    let t = returns.len();
    if weights.len() != t || market.len() != t {
        return Err(Error::shape("portfolio_stats", &[weights.len(), market.len()], &[t]));
    }
    if t < 2 {
        return Err(Error::domain("portfolio statistics need at least two days"));
    }
    let (mean, var) = moments(returns);
    if var <= 0.0 {
        return Err(Error::Undefined("constant returns have no Sharpe ratio".into()));
    }
    let std = var.sqrt();
    let (m_mean, m_var) = moments(market);
    let beta = (m_var > 0.0).then(|| {
        let cov = returns
            .iter()
            .zip(market)
            .map(|(r, m)| (r - mean) * (m - m_mean))
            .sum::<f64>()
            / t as f64;
        cov / m_var
    });
    let turnover = weights
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum::<f64>()
        / (t - 1) as f64;
    let short_fraction = weights
        .iter()
        .map(|w| w.iter().map(|&v| (-v).max(0.0)).sum::<f64>())
        .sum::<f64>()
        / t as f64;
    let mut level = 1.0;
    let cumulative_return = returns
        .iter()
        .map(|r| {
            level *= 1.0 + r;
            level - 1.0
        })
        .collect();
    Ok(PortfolioEval {
        sharpe_annualized: mean / std * TRADING_DAYS.sqrt(),
        mean_return_annualized: mean * TRADING_DAYS,
        std_return_annualized: std * TRADING_DAYS.sqrt(),
        beta,
        daily_turnover: turnover,
        short_fraction,
        cumulative_return,
    })
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}
