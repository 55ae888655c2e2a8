//! Synthetic contagion panel.
//!
//! Each unit carries a binary feature `x` and moves between three states,
//! the third of which is absorbing. Leaving for the absorbing state happens
//! at a rate driven by a latent intensity `lambda_x` shared by all units with
//! the same feature, and realised absorptions feed back into it:
//! `lambda_{x,t+1} = beta * lambda_{x,t} + alpha * N_{x,t}`.

mod io;
mod panel;

pub use io::{read_binary, read_jsonl, write_binary, write_jsonl};
pub use panel::{StateTargets, UnitPanel, CONTAGION_FEATURES};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Substreams;

/// Number of unit states; index 2 is absorbing.
pub const STATES: usize = 3;
pub const ABSORBING: u8 = 3;

/// Denominator of the per-group absorption fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DenominatorMode {
    /// Units of the group not yet absorbed at `t`.
    #[default]
    Active,
    /// All units of the group.
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub m: usize,
    pub t: usize,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda0: [f64; 2],
    pub denominator_mode: DenominatorMode,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            m: 1000,
            t: 100,
            mu: 0.001,
            alpha: 4.0,
            beta: 0.5,
            lambda0: [0.0, 0.0],
            denominator_mode: DenominatorMode::Active,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || !self.m.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "unit count must be even and at least 2, got {}",
                self.m
            )));
        }
        if self.t < 2 {
            return Err(Error::Config(format!(
                "period count must be at least 2, got {}",
                self.t
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be non-negative, got {}", self.mu)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if self.lambda0.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("initial intensities must be non-negative".into()));
        }
        Ok(())
    }
}

/// Row-stochastic transition matrix for a unit with feature `x` under
/// intensity `lambda`.
pub fn transition_matrix(x: u8, lambda: f64, mu: f64) -> Result<[[f64; 3]; 3]> {
    if lambda < 0.0 || mu < 0.0 || lambda.is_nan() || mu.is_nan() {
        return Err(Error::domain(format!("negative intensity (lambda={lambda}, mu={mu})")));
    }
    Ok(transition_rows(x, lambda, mu))
}

fn transition_rows(x: u8, lambda: f64, mu: f64) -> [[f64; 3]; 3] {
    let xf = x as f64;
    let hazard = (lambda + mu) * (1.0 + 0.1 * xf);
    let stay = 1.0 + xf;
    let norm = stay + 1.0 + hazard;
    [
        [stay / norm, 1.0 / norm, hazard / norm],
        [1.0 / norm, stay / norm, hazard / norm],
        [0.0, 0.0, 1.0],
    ]
}

/// One simulated panel.
///
/// `states` is unit-major (`states[i * t + s]`), holding values 1, 2 or 3.
/// `true_probs[(i * t + s) * 3 + c]` is the exact probability that unit `i`
/// is in state `c + 1` at `s + 1` given everything up to `s`. The absorption
/// fractions cover the `t - 1` transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub m: usize,
    pub t: usize,
    pub x: Vec<u8>,
    pub states: Vec<u8>,
    pub lambda: [Vec<f64>; 2],
    pub frac_default: [Vec<f64>; 2],
    pub true_probs: Vec<f64>,
}

impl Episode {
    pub fn state(&self, unit: usize, t: usize) -> u8 {
        self.states[unit * self.t + t]
    }

    pub fn is_active(&self, unit: usize, t: usize) -> bool {
        self.state(unit, t) != ABSORBING
    }

    pub fn probs(&self, unit: usize, t: usize) -> &[f64] {
        let at = (unit * self.t + t) * STATES;
        &self.true_probs[at..at + STATES]
    }

    /// Reorders units so that new unit `j` is old unit `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Episode> {
        check_ids(perm, self.m)?;
        if perm.len() != self.m {
            return Err(Error::domain("permutation length differs from unit count"));
        }
        let mut out = self.clone();
        for (j, &i) in perm.iter().enumerate() {
            out.x[j] = self.x[i];
            out.states[j * self.t..(j + 1) * self.t].copy_from_slice(&self.states[i * self.t..(i + 1) * self.t]);
            let w = self.t * STATES;
            out.true_probs[j * w..(j + 1) * w].copy_from_slice(&self.true_probs[i * w..(i + 1) * w]);
        }
        Ok(out)
    }

    /// Structural checks used after deserialisation.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Format(format!("invalid episode: {msg}")));
        if self.x.len() != self.m
            || self.states.len() != self.m * self.t
            || self.true_probs.len() != self.m * self.t * STATES
        {
            return bad("array lengths do not match dimensions");
        }
        for g in 0..2 {
            if self.lambda[g].len() != self.t || self.frac_default[g].len() + 1 != self.t {
                return bad("group series have the wrong length");
            }
        }
        if self.x.iter().any(|&v| v > 1) || self.states.iter().any(|&s| !(1..=3).contains(&s)) {
            return bad("feature or state out of range");
        }
        for i in 0..self.m {
            for s in 1..self.t {
                if self.state(i, s - 1) == ABSORBING && self.state(i, s) != ABSORBING {
                    return bad("unit left the absorbing state");
                }
            }
        }
        Ok(())
    }
}

/// Per-group unit counts entering the absorption fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCounts {
    /// Denominator per group and transition `t` (length `T - 1`).
    pub base: [Vec<usize>; 2],
    /// Absorptions between `t` and `t + 1`.
    pub absorbed: [Vec<usize>; 2],
}

/// Counts over the listed units.
pub fn group_counts(ep: &Episode, ids: &[usize], mode: DenominatorMode) -> GroupCounts {
    let steps = ep.t - 1;
    let mut base = [vec![0; steps], vec![0; steps]];
    let mut absorbed = [vec![0; steps], vec![0; steps]];
    for &i in ids {
        let g = ep.x[i] as usize;
        for s in 0..steps {
            let active = ep.is_active(i, s);
            if active || mode == DenominatorMode::Total {
                base[g][s] += 1;
            }
            if active && !ep.is_active(i, s + 1) {
                absorbed[g][s] += 1;
            }
        }
    }
    GroupCounts { base, absorbed }
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Simulates one episode on keystream `stream`; unit `i` uses substream `i`.
pub fn simulate(cfg: &SimConfig, stream: u64) -> Result<Episode> {
    let keys: Vec<u64> = (0..cfg.m as u64).collect();
    simulate_units(cfg, stream, &keys)
}

/// Simulates with an explicit substream key per unit. Permuting `keys`
/// permutes the resulting episode exactly.
pub fn simulate_units(cfg: &SimConfig, stream: u64, keys: &[u64]) -> Result<Episode> {
    cfg.validate()?;
    let (m, t_len) = (cfg.m, cfg.t);
    if keys.len() != m {
        return Err(Error::domain("one substream key per unit is required"));
    }
    let mut draws = Substreams::new(cfg.seed, stream);

    // Feature 1 goes to the half of the units with the smallest feature keys.
    let feature_key: Vec<f64> = keys.iter().map(|&k| draws.uniform(k, 0)).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| feature_key[a].total_cmp(&feature_key[b]).then(keys[a].cmp(&keys[b])));
    let mut x = vec![0u8; m];
    for &i in &order[..m / 2] {
        x[i] = 1;
    }

    let mut states = vec![0u8; m * t_len];
    for i in 0..m {
        states[i * t_len] = if draws.uniform(keys[i], 1) < 0.5 { 1 } else { 2 };
    }

    let mut lambda = [vec![0.0; t_len], vec![0.0; t_len]];
    let mut frac_default = [vec![0.0; t_len - 1], vec![0.0; t_len - 1]];
    lambda[0][0] = cfg.lambda0[0];
    lambda[1][0] = cfg.lambda0[1];
    let mut true_probs = vec![0.0; m * t_len * STATES];
    let group_total = [m / 2, m / 2];

    for s in 0..t_len {
        let rows = [
            transition_rows(0, lambda[0][s], cfg.mu),
            transition_rows(1, lambda[1][s], cfg.mu),
        ];
        let mut active = [0usize; 2];
        let mut absorbed = [0usize; 2];
        for i in 0..m {
            let g = x[i] as usize;
            let cur = states[i * t_len + s];
            let row = rows[g][(cur - 1) as usize];
            true_probs[(i * t_len + s) * STATES..(i * t_len + s + 1) * STATES].copy_from_slice(&row);
            if s + 1 == t_len {
                continue;
            }
            let next = if cur == ABSORBING {
                ABSORBING
            } else {
                active[g] += 1;
                let u = draws.uniform(keys[i], 2 + s as u64);
                let next = if u < row[0] {
                    1
                } else if u < row[0] + row[1] {
                    2
                } else {
                    3
                };
                if next == ABSORBING {
                    absorbed[g] += 1;
                }
                next
            };
            states[i * t_len + s + 1] = next;
        }
        if s + 1 == t_len {
            break;
        }
        for g in 0..2 {
            let den = match cfg.denominator_mode {
                DenominatorMode::Active => active[g],
                DenominatorMode::Total => group_total[g],
            };
            let n = fraction(absorbed[g], den);
            frac_default[g][s] = n;
            lambda[g][s + 1] = cfg.beta * lambda[g][s] + cfg.alpha * n;
        }
    }

    Ok(Episode {
        m,
        t: t_len,
        x,
        states,
        lambda,
        frac_default,
        true_probs,
    })
}

/// Partial view of an episode's cross-section.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub n: usize,
    /// Observed unit indices in increasing order.
    pub observed_ids: Vec<usize>,
    /// Observed absorption fraction per group and transition.
    pub frac_default_obs: [Vec<f64>; 2],
    /// Set where the group had no observed units in the denominator.
    pub missing: [Vec<bool>; 2],
    /// Group sizes over the whole population (the filter's `M_g`).
    pub group_size: [Vec<usize>; 2],
    /// Observed group sizes (the filter's `n`).
    pub n_obs: [Vec<usize>; 2],
}

fn check_ids(ids: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    for &i in ids {
        if i >= m || std::mem::replace(&mut seen[i], true) {
            return Err(Error::domain(format!("unit id {i} is out of range or repeated")));
        }
    }
    Ok(())
}

/// Observes `n` units drawn uniformly without replacement.
pub fn observe<R: Rng + ?Sized>(ep: &Episode, n: usize, mode: DenominatorMode, rng: &mut R) -> Result<Observation> {
    if n == 0 || n > ep.m {
        return Err(Error::domain(format!("observed count {n} outside [1, {}]", ep.m)));
    }
    let mut ids = sample(rng, ep.m, n).into_vec();
    ids.sort_unstable();
    observe_ids(ep, &ids, mode)
}

/// Observation restricted to the given units.
pub fn observe_ids(ep: &Episode, ids: &[usize], mode: DenominatorMode) -> Result<Observation> {
    if ids.is_empty() {
        return Err(Error::domain("at least one unit must be observed"));
    }
    check_ids(ids, ep.m)?;
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let all: Vec<usize> = (0..ep.m).collect();
    let full = group_counts(ep, &all, mode);
    let obs = group_counts(ep, &sorted, mode);
    let mut frac = [Vec::new(), Vec::new()];
    let mut missing = [Vec::new(), Vec::new()];
    for g in 0..2 {
        frac[g] = obs.absorbed[g]
            .iter()
            .zip(&obs.base[g])
            .map(|(&a, &b)| fraction(a, b))
            .collect();
        missing[g] = obs.base[g].iter().map(|&b| b == 0).collect();
    }
    Ok(Observation {
        n: sorted.len(),
        observed_ids: sorted,
        frac_default_obs: frac,
        missing,
        group_size: full.base,
        n_obs: obs.base,
    })
}

/// Mean absorption fraction per period, measured against all units.
pub fn default_rate(ep: &Episode) -> f64 {
    let mut total = 0usize;
    for i in 0..ep.m {
        for s in 0..ep.t - 1 {
            if ep.is_active(i, s) && !ep.is_active(i, s + 1) {
                total += 1;
            }
        }
    }
    total as f64 / (ep.m * (ep.t - 1)) as f64
}
