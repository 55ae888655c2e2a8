//! Kalman-filter estimate of the latent intensity from partially observed
//! absorption fractions, and the transition probabilities it implies.
//!
//! Three filter forms are provided:
//!
//! * [`KalmanVariant::DynamicsConsistent`] predicts with the simulator's own
//!   recursion, `beta * l + alpha * p`, and weighs `alpha * N_obs` against
//!   `alpha * p`. Under full observation the gain is 1 and the estimate
//!   reproduces the true intensity path exactly.
//! * [`KalmanVariant::AppendixLiteral`] predicts with `beta * l + p`, adds the
//!   process noise without the `alpha^2` factor and corrects with
//!   `K * (N_obs - p)`.
//! * [`KalmanVariant::FixedGain`] trusts the observed fraction completely:
//!   `beta * l + alpha * N_obs`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{transition_matrix, Episode, Observation, SimConfig, ABSORBING, STATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KalmanVariant {
    AppendixLiteral,
    #[default]
    DynamicsConsistent,
    FixedGain,
}

impl std::str::FromStr for KalmanVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appendix" | "appendix_literal" => Ok(Self::AppendixLiteral),
            "dynamics" | "dynamics_consistent" => Ok(Self::DynamicsConsistent),
            "fixed-gain" | "fixed_gain" => Ok(Self::FixedGain),
            other => Err(Error::Config(format!(
                "unknown kalman variant `{other}`; expected one of appendix, dynamics, fixed-gain"
            ))),
        }
    }
}

/// Filter state for one feature group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub x: u8,
    pub lambda_hat: f64,
    pub p: f64,
    pub k: f64,
    pub group_size: usize,
    pub n_obs: usize,
}

impl KalmanState {
    pub fn new(x: u8, lambda0: f64) -> Self {
        Self {
            x,
            lambda_hat: lambda0,
            p: 0.0,
            k: 1.0,
            group_size: 0,
            n_obs: 0,
        }
    }
}

/// One period of observation for one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupObs {
    pub nbar: f64,
    /// The group had no observed units; the fraction carries no information.
    pub missing: bool,
    pub group_size: usize,
    pub n_obs: usize,
}

/// Probability of moving to the absorbing state from either live state.
pub fn rare_prob(lambda_hat: f64, x: u8, mu: f64) -> f64 {
    let hazard = (lambda_hat + mu) * (1.0 + 0.1 * x as f64);
    hazard / (2.0 + x as f64 + hazard)
}

/// Variance of the observed fraction around the population fraction.
pub fn observation_variance(p: f64, alpha: f64, group_size: usize, n_obs: usize) -> f64 {
    if group_size == 0 {
        return 0.0;
    }
    let mg = group_size as f64;
    let gap = (group_size - n_obs) as f64;
    alpha * alpha * p * (1.0 - p) * (gap / (mg * mg) + gap * gap / (mg * mg * (n_obs as f64 + 1.0)))
}

pub fn kalman_step(state: &KalmanState, obs: GroupObs, variant: KalmanVariant, cfg: &SimConfig) -> Result<KalmanState> {
    if obs.n_obs > obs.group_size {
        return Err(Error::domain(format!(
            "observed count {} exceeds group size {}",
            obs.n_obs, obs.group_size
        )));
    }
    if !(0.0..=1.0).contains(&obs.nbar) {
        return Err(Error::domain(format!("observed fraction {} outside [0, 1]", obs.nbar)));
    }
    let p = rare_prob(state.lambda_hat, state.x, cfg.mu);
    let sigma_n = if obs.group_size == 0 {
        0.0
    } else {
        p * (1.0 - p) / obs.group_size as f64
    };
    let sigma_eps = observation_variance(p, cfg.alpha, obs.group_size, obs.n_obs);
    let beta = cfg.beta;
    let alpha = cfg.alpha;

    let p_pred = match variant {
        KalmanVariant::AppendixLiteral => beta * beta * state.p + sigma_n,
        _ => beta * beta * state.p + alpha * alpha * sigma_n,
    };
    let k = match variant {
        KalmanVariant::FixedGain => 1.0,
        // An empty group has no absorptions, so the zero fraction is exact.
        _ if obs.group_size == 0 => 1.0,
        _ if obs.missing => 0.0,
        _ if sigma_eps == 0.0 => 1.0,
        _ if p_pred == 0.0 => 0.0,
        _ => p_pred / (p_pred + sigma_eps),
    };
    let lambda_hat = match variant {
        KalmanVariant::AppendixLiteral => beta * state.lambda_hat + p + k * (obs.nbar - p),
        _ => beta * state.lambda_hat + (1.0 - k) * alpha * p + k * alpha * obs.nbar,
    };
    Ok(KalmanState {
        x: state.x,
        lambda_hat: lambda_hat.max(0.0),
        p: (1.0 - k) * p_pred,
        k,
        group_size: obs.group_size,
        n_obs: obs.n_obs,
    })
}

/// Filtered series for one group. `lambda_hat[t]` uses observations up to
/// `t - 1`; `gain[t]` and `variance[t]` belong to the update that produced it
/// (index 0 holds the initial state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanPath {
    pub lambda_hat: Vec<f64>,
    pub gain: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn estimate_path(x: u8, series: &[GroupObs], variant: KalmanVariant, cfg: &SimConfig) -> Result<KalmanPath> {
    let mut state = KalmanState::new(x, cfg.lambda0[x as usize]);
    let mut path = KalmanPath {
        lambda_hat: vec![state.lambda_hat],
        gain: vec![state.k],
        variance: vec![state.p],
    };
    for &obs in series {
        state = kalman_step(&state, obs, variant, cfg)?;
        path.lambda_hat.push(state.lambda_hat);
        path.gain.push(state.k);
        path.variance.push(state.p);
    }
    Ok(path)
}

/// Group observation series extracted from an [`Observation`].
pub fn group_series(obs: &Observation, g: usize) -> Vec<GroupObs> {
    (0..obs.frac_default_obs[g].len())
        .map(|s| GroupObs {
            nbar: obs.frac_default_obs[g][s],
            missing: obs.missing[g][s],
            group_size: obs.group_size[g][s],
            n_obs: obs.n_obs[g][s],
        })
        .collect()
}

/// Filters both groups of an observation.
pub fn filter_observation(obs: &Observation, variant: KalmanVariant, cfg: &SimConfig) -> Result<[KalmanPath; 2]> {
    Ok([
        estimate_path(0, &group_series(obs, 0), variant, cfg)?,
        estimate_path(1, &group_series(obs, 1), variant, cfg)?,
    ])
}

/// Next-state probabilities for the listed units under estimated intensities,
/// laid out like [`Episode::true_probs`] restricted to `ids`.
pub fn oracle_predict(ep: &Episode, ids: &[usize], lambda_hat: &[Vec<f64>; 2], mu: f64) -> Result<Vec<f64>> {
    for path in lambda_hat {
        if path.len() < ep.t {
            return Err(Error::shape("oracle_predict", &[path.len()], &[ep.t]));
        }
    }
    let mut rows = Vec::with_capacity(ep.t);
    for (l0, l1) in lambda_hat[0].iter().zip(&lambda_hat[1]).take(ep.t) {
        rows.push([transition_matrix(0, *l0, mu)?, transition_matrix(1, *l1, mu)?]);
    }
    let mut out = Vec::with_capacity(ids.len() * ep.t * STATES);
    for &i in ids {
        let g = ep.x[i] as usize;
        for (s, r) in rows.iter().enumerate() {
            let state = ep.state(i, s);
            debug_assert!((1..=ABSORBING).contains(&state));
            out.extend_from_slice(&r[g][(state - 1) as usize]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{observe_ids, simulate, DenominatorMode};

    fn cfg() -> SimConfig {
        SimConfig {
            m: 200,
            t: 60,
            seed: 4,
            ..SimConfig::default()
        }
    }

    #[test]
    fn rare_prob_matches_transition_entry() {
        assert_eq!(rare_prob(0.0, 0, 0.0), 0.0);
        assert!((rare_prob(0.02, 0, 0.001) - 0.021 / 2.021).abs() < 1e-15);
        for &(l, x, mu) in &[(0.3, 1u8, 0.001), (2.5, 0, 0.01), (0.0, 1, 0.2)] {
            let row = transition_matrix(x, l, mu).unwrap();
            assert!((rare_prob(l, x, mu) - row[0][2]).abs() < 1e-15);
            assert!((rare_prob(l, x, mu) - row[1][2]).abs() < 1e-15);
        }
    }

    #[test]
    fn full_observation_gives_unit_gain() {
        let state = KalmanState {
            p: 1e-4,
            ..KalmanState::new(0, 0.02)
        };
        let obs = GroupObs {
            nbar: 0.03,
            missing: false,
            group_size: 500,
            n_obs: 500,
        };
        for v in [KalmanVariant::AppendixLiteral, KalmanVariant::DynamicsConsistent] {
            assert_eq!(kalman_step(&state, obs, v, &SimConfig::default()).unwrap().k, 1.0);
        }
    }

    #[test]
    fn fixed_gain_is_the_plain_recursion() {
        let c = SimConfig::default();
        let state = KalmanState::new(1, 0.7);
        let obs = GroupObs {
            nbar: 0.05,
            missing: false,
            group_size: 400,
            n_obs: 37,
        };
        let next = kalman_step(&state, obs, KalmanVariant::FixedGain, &c).unwrap();
        assert_eq!(next.lambda_hat, c.beta * 0.7 + c.alpha * 0.05);
    }

    #[test]
    fn literal_step_matches_hand_evaluation() {
        let c = SimConfig::default();
        let state = KalmanState {
            p: 1e-4,
            ..KalmanState::new(0, 0.02)
        };
        let obs = GroupObs {
            nbar: 0.03,
            missing: false,
            group_size: 500,
            n_obs: 250,
        };
        let next = kalman_step(&state, obs, KalmanVariant::AppendixLiteral, &c).unwrap();
        // Hand evaluation of the five update formulas.
        let p = 0.021 / 2.021;
        let var_n = p * (1.0 - p) / 500.0;
        let var_e = 16.0 * p * (1.0 - p) * (250.0 / 250_000.0 + 62_500.0 / (250_000.0 * 251.0));
        let pred = 0.5 * 0.02 + p;
        let p_pred = 0.25 * 1e-4 + var_n;
        let k = p_pred / (p_pred + var_e);
        assert!((next.k - k).abs() < 1e-15);
        assert!((next.lambda_hat - (pred + k * (0.03 - p))).abs() < 1e-15);
        assert!((next.p - (1.0 - k) * p_pred).abs() < 1e-18);
    }

    #[test]
    fn oversized_observation_is_rejected() {
        let obs = GroupObs {
            nbar: 0.0,
            missing: false,
            group_size: 10,
            n_obs: 11,
        };
        let r = kalman_step(
            &KalmanState::new(0, 0.0),
            obs,
            KalmanVariant::DynamicsConsistent,
            &cfg(),
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn full_observation_reproduces_intensity() {
        let c = cfg();
        let ep = simulate(&c, 0).unwrap();
        let ids: Vec<usize> = (0..ep.m).collect();
        let obs = observe_ids(&ep, &ids, DenominatorMode::Active).unwrap();
        let paths = filter_observation(&obs, KalmanVariant::DynamicsConsistent, &c).unwrap();
        for (path, truth) in paths.iter().zip(&ep.lambda) {
            assert_eq!(&path.lambda_hat, truth);
        }
    }

    #[test]
    fn gains_fall_with_fewer_observations() {
        let c = cfg();
        let ep = simulate(&c, 1).unwrap();
        let all: Vec<usize> = (0..ep.m).collect();
        let some: Vec<usize> = (0..ep.m).step_by(10).collect();
        let full = filter_observation(
            &observe_ids(&ep, &all, DenominatorMode::Active).unwrap(),
            KalmanVariant::DynamicsConsistent,
            &c,
        )
        .unwrap();
        let seen = observe_ids(&ep, &some, DenominatorMode::Active).unwrap();
        let part = filter_observation(&seen, KalmanVariant::DynamicsConsistent, &c).unwrap();
        for g in 0..2 {
            for s in 1..ep.t {
                assert_eq!(full[g].gain[s], 1.0);
                assert!((0.0..=1.0).contains(&part[g].gain[s]));
                assert!(part[g].variance[s] >= 0.0);
                assert!(part[g].lambda_hat[s] >= 0.0);
                if seen.n_obs[g][s - 1] < seen.group_size[g][s - 1] {
                    assert!(part[g].gain[s] < 1.0);
                }
            }
        }
    }

    #[test]
    fn true_intensity_gives_true_probabilities() {
        let c = cfg();
        let ep = simulate(&c, 2).unwrap();
        let ids: Vec<usize> = (0..ep.m).collect();
        let pred = oracle_predict(&ep, &ids, &ep.lambda, c.mu).unwrap();
        assert_eq!(pred, ep.true_probs);
        for (i, row) in pred.chunks(3).enumerate() {
            if ep.states[i] == ABSORBING {
                assert_eq!(row, &[0.0, 0.0, 1.0]);
            }
        }
    }
}
