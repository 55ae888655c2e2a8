use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::Params;

/// Adam with a constant step size and optional decoupled weight decay per
/// parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update. `decay` maps parameter names to decoupled weight-decay
    /// coefficients.
    pub fn update<F: Scalar>(
        &mut self,
        params: &mut Params<F>,
        grads: &Params<F>,
        decay: &BTreeMap<String, f64>,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Format(format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", g.shape(), p.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let wd = decay.get(name).copied().unwrap_or(0.0);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let mut wf = w.as_f64();
                wf -= self.lr * (mhat / (vhat.sqrt() + self.eps) + wd * wf);
                *w = F::lit(wf);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over all gradient entries.
pub fn grad_norm<F: Scalar>(grads: &Params<F>) -> f64 {
    grads
        .values()
        .flat_map(|t: &Tensor<F>| t.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params: Params<f64> = BTreeMap::new();
        params.insert("w".into(), Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut grads: Params<f64> = BTreeMap::new();
        grads.insert("w".into(), Tensor::new(&[2], vec![0.5, -2.0]).unwrap());
        let mut adam = Adam::new(0.003);
        adam.update(&mut params, &grads, &BTreeMap::new()).unwrap();
        let w = params["w"].data();
        assert!((w[0] - (1.0 - 0.003)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 0.003)).abs() < 1e-9);
    }
}
