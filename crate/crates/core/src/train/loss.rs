use serde::{Deserialize, Serialize};

use crate::diff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Linear transaction-cost model: a turnover rate on the L1 change of
/// weights plus a daily rate on the short book.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub turnover_rate: f64,
    pub short_rate: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            turnover_rate: 0.0005,
            short_rate: 0.0001,
        }
    }
}

/// Added to the L1 norm before normalising weights.
pub const L1_EPS: f64 = 1e-12;

/// Mean cross-entropy over unmasked cells of `logits[M, T, C]`.
pub fn cross_entropy<F: Scalar>(tape: &mut Tape<F>, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
    tape.cross_entropy(logits, labels, mask)
}

/// Scales `raw[M, T]` so each period has unit L1 norm.
pub fn l1_normalize<F: Scalar>(tape: &mut Tape<F>, raw: Var) -> Result<Var> {
    let m = tape.shape(raw)[0];
    let norm = tape.l1_norm(raw, 0)?;
    let norm = tape.add_scalar(norm, F::lit(L1_EPS));
    let norm = tape.expand(norm, 0, m)?;
    tape.div(raw, norm)
}

/// Daily portfolio returns, net of costs when `cost` is set, for normalised
/// weights `w[M, T]` held against next-period returns `y[M, T]`.
///
/// The first period pays no turnover cost since there is no previous weight.
pub fn portfolio_returns<F: Scalar>(tape: &mut Tape<F>, w: Var, y: Var, cost: Option<&CostConfig>) -> Result<Var> {
    let gross = tape.mul(w, y)?;
    let r = tape.sum_axis(gross, 0)?;
    let Some(cost) = cost else { return Ok(r) };
    let t_len = tape.shape(w)[1];
    let neg = tape.neg(w);
    let short = tape.relu(neg);
    let short = tape.sum_axis(short, 0)?;
    let mut c = tape.scale(short, F::lit(cost.short_rate));
    if t_len > 1 {
        let next = tape.narrow(w, 1, 1, t_len - 1)?;
        let prev = tape.narrow(w, 1, 0, t_len - 1)?;
        let delta = tape.sub(next, prev)?;
        let turnover = tape.l1_norm(delta, 0)?;
        let zero = tape.constant(Tensor::zeros(&[1]));
        let turnover = tape.concat(&[zero, turnover], 0)?;
        let turnover = tape.scale(turnover, F::lit(cost.turnover_rate));
        c = tape.add(c, turnover)?;
    }
    tape.sub(r, c)
}

/// `-mean(r) / std(r)` with the population standard deviation.
pub fn neg_sharpe<F: Scalar>(tape: &mut Tape<F>, r: Var) -> Result<Var> {
    let n = tape.value(r).numel();
    if n < 2 {
        return Err(Error::domain("the Sharpe ratio needs at least two periods"));
    }
    let shape = tape.shape(r).to_vec();
    let mean = tape.mean_all(r)?;
    let mean_b = tape.broadcast_scalar(mean, &shape)?;
    let centered = tape.sub(r, mean_b)?;
    let sq = tape.square(centered);
    let var = tape.mean_all(sq)?;
    if !(tape.value(var).item() > F::zero()) {
        return Err(Error::numeric(format!(
            "returns are constant (mean {:.6e}); the Sharpe ratio is undefined",
            tape.value(mean).item().as_f64()
        )));
    }
    let std = tape.sqrt(var);
    let sr = tape.div(mean, std)?;
    Ok(tape.neg(sr))
}

/// Negative Sharpe ratio of the strategy given by `raw[M, T]` (or
/// `[M, T, 1]`) against next-period returns `y[M, T]`.
pub fn sharpe_loss<F: Scalar>(tape: &mut Tape<F>, raw: Var, y: Var, cost: Option<&CostConfig>) -> Result<Var> {
    let ys = tape.shape(y).to_vec();
    let raw = if tape.shape(raw).len() == 3 {
        tape.reshape(raw, &ys)?
    } else {
        raw
    };
    if tape.shape(raw) != ys.as_slice() || ys.len() != 2 {
        return Err(Error::shape("sharpe_loss", tape.shape(raw), &ys));
    }
    if ys[1] < 2 {
        return Err(Error::domain("the Sharpe ratio needs at least two periods"));
    }
    let w = l1_normalize(tape, raw)?;
    let r = portfolio_returns(tape, w, y, cost)?;
    neg_sharpe(tape, r)
}
