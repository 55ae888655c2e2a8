use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of a scalar function of `params` against
/// fourth-order central differences with step `eps`.
///
/// At most `max_coords` coordinates per parameter are probed, spread evenly.
/// The error for one coordinate is `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<Fun>(f: Fun, params: &[Tensor<f64>], eps: f64, max_coords: usize) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::numeric("non-finite output during gradient check"));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::numeric("non-finite output during gradient check"));
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].numel();
        let ad = grads.get(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for c in (0..n).step_by(stride) {
            let base = params[pi].data()[c];
            let mut at = |delta: f64| -> Result<f64> {
                work[pi].data_mut()[c] = base + delta;
                let v = eval(&work);
                work[pi].data_mut()[c] = base;
                v
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let err = (ad[c] - fd).abs() / (ad[c].abs() + fd.abs()).max(1e-8);
            if !err.is_finite() {
                return Err(Error::numeric("non-finite gradient during gradient check"));
            }
            max_rel = max_rel.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: checked,
    })
}
