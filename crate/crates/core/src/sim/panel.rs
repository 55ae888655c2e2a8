use super::{Episode, STATES};
use crate::diff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Covariates of `m` units over `t` periods, `d` features each, unit-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitPanel {
    pub m: usize,
    pub t: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl UnitPanel {
    pub fn new(m: usize, t: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * t * d {
            return Err(Error::shape("panel", &[m, t, d], &[data.len()]));
        }
        Ok(Self { m, t, d, data })
    }

    pub fn at(&self, unit: usize, t: usize) -> &[f64] {
        let base = (unit * self.t + t) * self.d;
        &self.data[base..base + self.d]
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::new(
            &[self.m, self.t, self.d],
            self.data.iter().map(|&v| F::lit(v)).collect(),
        )
        .expect("panel dimensions are consistent")
    }

    /// Panel restricted to the listed units, in the given order.
    pub fn select(&self, ids: &[usize]) -> UnitPanel {
        let w = self.t * self.d;
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        UnitPanel {
            m: ids.len(),
            t: self.t,
            d: self.d,
            data,
        }
    }

    /// Panel restricted to periods `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> UnitPanel {
        let mut data = Vec::with_capacity(self.m * len * self.d);
        for i in 0..self.m {
            let base = (i * self.t + start) * self.d;
            data.extend_from_slice(&self.data[base..base + len * self.d]);
        }
        UnitPanel {
            m: self.m,
            t: len,
            d: self.d,
            data,
        }
    }
}

/// Feature count of [`Episode::panel`]: the binary feature and a one-hot state.
pub const CONTAGION_FEATURES: usize = 1 + STATES;

/// Next-state targets for the listed units, flattened unit-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTargets {
    /// Class index of the state at `t + 1`.
    pub labels: Vec<usize>,
    /// Cells that are active at `t` and have a successor.
    pub mask: Vec<bool>,
}

impl Episode {
    /// Model input for the listed units.
    pub fn panel(&self, ids: &[usize]) -> UnitPanel {
        let mut data = Vec::with_capacity(ids.len() * self.t * CONTAGION_FEATURES);
        for &i in ids {
            for s in 0..self.t {
                let state = self.state(i, s) as usize;
                data.push(self.x[i] as f64);
                for c in 1..=STATES {
                    data.push(if c == state { 1.0 } else { 0.0 });
                }
            }
        }
        UnitPanel {
            m: ids.len(),
            t: self.t,
            d: CONTAGION_FEATURES,
            data,
        }
    }

    pub fn targets(&self, ids: &[usize]) -> StateTargets {
        let mut labels = Vec::with_capacity(ids.len() * self.t);
        let mut mask = Vec::with_capacity(ids.len() * self.t);
        for &i in ids {
            for s in 0..self.t {
                if s + 1 < self.t {
                    labels.push(self.state(i, s + 1) as usize - 1);
                    mask.push(self.is_active(i, s));
                } else {
                    labels.push(0);
                    mask.push(false);
                }
            }
        }
        StateTargets { labels, mask }
    }
}
