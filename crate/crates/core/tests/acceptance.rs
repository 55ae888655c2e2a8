//! Acceptance suite. Each criterion prints one PASS or FAIL line.
//!
//! The desk-scale criteria train their models here, which takes well over an
//! hour on one core. `ACCEPTANCE=1,7,8` restricts a run to the listed
//! criteria; models shared between criteria are trained once per run.
//!
//! The run is a report: it exits zero after printing every line so that the
//! rest of the workspace tests still run. Set `ACCEPTANCE_STRICT=1` to exit
//! non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setseq_core::diff::{grad_check, Tape, Tensor, Var};
use setseq_core::experiment::{probe_matrix, sweep_units, SweepConfig, SweepPoint};
use setseq_core::kalman::{filter_observation, KalmanVariant};
use setseq_core::market::{backtest, generate_market, MarketConfig};
use setseq_core::mem::{measure_peak, TrackingAllocator};
use setseq_core::metrics::{auc_naive, auc_one_vs_rest, kl_metrics, pearson, r2, spearman, ClassificationEval};
use setseq_core::model::{
    ffn, gate_matrix, seq_layer, summary_gated, summary_mean, summary_mha, Bound, Ffn, ForwardOpts, Params,
    SetSeqConfig, SetSeqModel, SummaryVariant,
};
use setseq_core::sim::{observe_ids, simulate, SimConfig, UnitPanel};
use setseq_core::train::{
    cross_entropy, sharpe_loss, train, ContagionSource, CostConfig, LossKind, SamplerConfig, SamplerMode, TrainConfig,
};
use setseq_core::Result;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

/// Training episodes per epoch and epochs for the desk-scale models.
const DESK_EPISODES: usize = 250;
const DESK_EPOCHS: usize = 40;
/// Largest unit count drawn by the mixture sampler during desk training.
const DESK_CAP: usize = 250;
const SET_LAYERS: usize = 2;
/// Held-out episodes for the model-based evaluations.
const EVAL_EPISODES: usize = 50;
/// Steps for the matched summary-variant comparison.
const VARIANT_STEPS: usize = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

type Criterion = fn(&mut Lab) -> Result<Outcome>;

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(&str, Criterion); 10] = [
        ("kalman exactness at full observation", kalman_exactness),
        ("oracle KL falls with observed units", oracle_monotonicity),
        ("set summary beats the no-set ablation", set_vs_ablation),
        (
            "attention is at least as accurate as the mean, at higher cost",
            attention_vs_mean,
        ),
        ("first summary dimension tracks the intensity", interpretability),
        ("mixture-trained model matches the oracle curves", generalization),
        ("fast metrics match their oracles", metric_oracles),
        ("finite-difference gradient suite", gradient_suite),
        ("structural properties of a trained model", structural_properties),
        ("portfolio pipeline ordering and ledger", portfolio_pipeline),
    ];
    let mut lab = Lab::default();
    let mut failed = 0;
    let mut ran = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = k + 1;
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = run(&mut lab).unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let secs = started.elapsed().as_secs_f64();
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id:>2}: {name}: {} [{secs:.1}s]", outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// Trained models shared between criteria.
#[derive(Default)]
struct Lab {
    mixture: Option<SetSeqModel<f32>>,
    ablation: Option<SetSeqModel<f32>>,
}

impl Lab {
    fn mixture(&mut self) -> Result<&SetSeqModel<f32>> {
        if self.mixture.is_none() {
            self.mixture = Some(train_desk(SummaryVariant::Mean)?);
        }
        Ok(self.mixture.as_ref().unwrap())
    }

    fn ablation(&mut self) -> Result<&SetSeqModel<f32>> {
        if self.ablation.is_none() {
            self.ablation = Some(train_desk(SummaryVariant::None)?);
        }
        Ok(self.ablation.as_ref().unwrap())
    }
}

fn desk_config(variant: SummaryVariant) -> SetSeqConfig {
    SetSeqConfig {
        d_model: 16,
        n_setseq_layers: SET_LAYERS,
        n_plain_seq_layers: 1,
        variant,
        ..SetSeqConfig::default()
    }
}

fn train_desk(variant: SummaryVariant) -> Result<SetSeqModel<f32>> {
    let mut model = SetSeqModel::init(desk_config(variant), 0)?;
    let mut source = ContagionSource::new(SimConfig::default(), DESK_EPISODES, SamplerConfig::mixture(DESK_CAP))?;
    let cfg = TrainConfig {
        epochs: DESK_EPOCHS,
        ..TrainConfig::default()
    };
    train(&mut model, &mut source, &cfg)?;
    Ok(model)
}

fn fixed_units(k: usize) -> SamplerConfig {
    SamplerConfig {
        mode: SamplerMode::Fixed(k),
        ..SamplerConfig::mixture(k)
    }
}

fn point<'a>(points: &'a [SweepPoint], n: usize, method: &str) -> &'a ClassificationEval {
    &points
        .iter()
        .find(|p| p.n == n && p.method == method)
        .expect("sweep point")
        .eval
}

/// Model metrics at full observation on held-out episodes.
fn full_observation_eval(model: &SetSeqModel<f32>) -> Result<ClassificationEval> {
    let sim = SimConfig::default();
    let cfg = SweepConfig {
        unit_counts: vec![sim.m],
        episodes: EVAL_EPISODES,
        seed: 0,
    };
    let points = sweep_units(&sim, &cfg, KalmanVariant::DynamicsConsistent, Some(model))?;
    Ok(point(&points, sim.m, "model").clone())
}

fn kalman_exactness(_: &mut Lab) -> Result<Outcome> {
    let sim = SimConfig::default();
    let all: Vec<usize> = (0..sim.m).collect();
    let mut worst: f64 = 0.0;
    for e in 0..10 {
        let ep = simulate(&sim, e)?;
        let obs = observe_ids(&ep, &all, sim.denominator_mode)?;
        let paths = filter_observation(&obs, KalmanVariant::DynamicsConsistent, &sim)?;
        for (g, path) in paths.iter().enumerate() {
            assert_eq!(path.lambda_hat.len(), ep.lambda[g].len());
            for (a, b) in path.lambda_hat.iter().zip(&ep.lambda[g]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(Outcome::new(
        worst < 1e-12,
        format!("max |lambda_hat - lambda| = {worst:.2e}"),
    ))
}

fn oracle_monotonicity(_: &mut Lab) -> Result<Outcome> {
    let sim = SimConfig::default();
    let cfg = SweepConfig::default();
    let points = sweep_units::<f32>(&sim, &cfg, KalmanVariant::DynamicsConsistent, None)?;
    let ns: Vec<f64> = cfg.unit_counts.iter().map(|&n| n as f64).collect();
    let kl: Vec<f64> = cfg
        .unit_counts
        .iter()
        .map(|&n| point(&points, n, "kalman").kl_full)
        .collect();
    let rho = spearman(&ns, &kl)?;
    Ok(Outcome::new(
        rho <= -0.9,
        format!("spearman {rho:.3}, kl_full {kl:.4?}"),
    ))
}

fn set_vs_ablation(lab: &mut Lab) -> Result<Outcome> {
    let set = full_observation_eval(lab.mixture()?)?;
    let none = full_observation_eval(lab.ablation()?)?;
    let (auc_set, auc_none) = (
        set.auc_absorbing.unwrap_or(f64::NAN),
        none.auc_absorbing.unwrap_or(f64::NAN),
    );
    let pass = set.kl_full <= 0.5 * none.kl_full && auc_set >= auc_none + 0.03;
    Ok(Outcome::new(
        pass,
        format!(
            "kl_full {:.5} vs {:.5}, AUC {auc_set:.4} vs {auc_none:.4}",
            set.kl_full, none.kl_full
        ),
    ))
}

/// Seconds of one training epoch and peak heap growth at `m` units over a
/// short horizon, after a warm-up epoch.
fn training_cost(variant: SummaryVariant, m: usize, t: usize) -> Result<(f64, usize)> {
    let sim = SimConfig {
        m,
        t,
        ..SimConfig::default()
    };
    let mut model = SetSeqModel::<f32>::init(desk_config(variant), 0)?;
    let mut source = ContagionSource::new(sim, 2, fixed_units(m))?;
    let cfg = TrainConfig {
        epochs: 2,
        max_steps_per_epoch: Some(2),
        ..TrainConfig::default()
    };
    let (report, peak) = measure_peak(|| train(&mut model, &mut source, &cfg));
    Ok((report?.epoch_secs[1], peak))
}

fn attention_vs_mean(_: &mut Lab) -> Result<Outcome> {
    let mut kl = Vec::new();
    for variant in [SummaryVariant::Mha, SummaryVariant::Mean] {
        let mut model = SetSeqModel::init(desk_config(variant), 0)?;
        let mut source = ContagionSource::new(SimConfig::default(), DESK_EPISODES, fixed_units(100))?;
        let cfg = TrainConfig {
            epochs: VARIANT_STEPS.div_ceil(DESK_EPISODES),
            ..TrainConfig::default()
        };
        train(&mut model, &mut source, &cfg)?;
        kl.push(full_observation_eval(&model)?.kl_full);
    }
    // Attention over 1000 units stores T * heads score matrices of 10^6
    // entries; a ten-period horizon keeps that within memory.
    let (mha_secs, mha_mem) = training_cost(SummaryVariant::Mha, 1000, 10)?;
    let (mean_secs, mean_mem) = training_cost(SummaryVariant::Mean, 1000, 10)?;
    let (time_ratio, mem_ratio) = (mha_secs / mean_secs, mha_mem as f64 / mean_mem as f64);
    let pass = kl[0] <= kl[1] && time_ratio >= 2.0 && mem_ratio >= 2.0;
    Ok(Outcome::new(
        pass,
        format!(
            "kl_full mha {:.5} vs mean {:.5}, epoch time x{time_ratio:.2}, peak memory x{mem_ratio:.2}",
            kl[0], kl[1]
        ),
    ))
}

fn interpretability(lab: &mut Lab) -> Result<Outcome> {
    let sim = SimConfig::default();
    let cfg = SweepConfig {
        unit_counts: vec![20, 50, 100, 200, 500, 1000],
        episodes: EVAL_EPISODES,
        seed: 0,
    };
    let matrix = probe_matrix(lab.mixture()?, &sim, &cfg)?;
    let full = matrix.last().expect("probe rows");
    let best = (0..full.len())
        .max_by(|&a, &b| full[a].total_cmp(&full[b]))
        .expect("probe layers");
    let column: Vec<f64> = matrix.iter().map(|row| row[best]).collect();
    let ns: Vec<f64> = cfg.unit_counts.iter().map(|&n| n as f64).collect();
    let rho = spearman(&ns, &column)?;
    let pass = full[best] >= 0.8 && rho >= 0.9;
    Ok(Outcome::new(
        pass,
        format!("layer {best}: |corr| {column:.3?} over n, spearman {rho:.3}"),
    ))
}

fn generalization(lab: &mut Lab) -> Result<Outcome> {
    let sim = SimConfig::default();
    let cfg = SweepConfig {
        unit_counts: vec![100, 500, 1000],
        episodes: EVAL_EPISODES,
        seed: 0,
    };
    let points = sweep_units(&sim, &cfg, KalmanVariant::DynamicsConsistent, Some(lab.mixture()?))?;
    let mut pass = true;
    let mut parts = Vec::new();
    for &n in &cfg.unit_counts {
        let (m, k) = (point(&points, n, "model"), point(&points, n, "kalman"));
        let gaps = [
            (m.auc_absorbing, k.auc_absorbing, 0.05),
            (m.r2_absorbing, k.r2_absorbing, 0.1),
            (m.corr_absorbing, k.corr_absorbing, 0.1),
        ]
        .map(|(a, b, tol)| {
            let gap = (a.unwrap_or(f64::NAN) - b.unwrap_or(f64::NAN)).abs();
            pass &= gap <= tol;
            gap
        });
        parts.push(format!(
            "n={n} |dAUC| {:.3} |dR2| {:.3} |dcorr| {:.3}",
            gaps[0], gaps[1], gaps[2]
        ));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

/// Pairwise AUC with ties counted as one half.
fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn metric_oracles(_: &mut Lab) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..80);
        // Six score levels make ties common.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6u8)) / 5.0).collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        positive[0] = true;
        positive[1] = false;
        let fast = auc_one_vs_rest(&scores, &positive)?;
        let naive = auc_naive(&scores, &positive)?;
        let oracle = pairwise_auc(&scores, &positive);
        worst = worst.max((fast - naive).abs()).max((fast - oracle).abs());
    }

    let p = [0.7, 0.2, 0.1, 0.5, 0.25, 0.25];
    let q = [0.5, 0.3, 0.2, 0.25, 0.25, 0.5];
    let kl = kl_metrics(&p, &q, 3, 2)?;
    let cell0 = 0.7 * (0.7f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.3).ln() + 0.1 * (0.1f64 / 0.2).ln();
    let cell1 = 0.5 * 2f64.ln() + 0.25 * (0.25f64 / 0.5).ln();
    let kl_err = (kl.kl_full - (cell0 + cell1) / 2.0)
        .abs()
        .max((kl.kl_absorbing - (0.1 * (0.1f64 / 0.2).ln() + 0.25 * (0.25f64 / 0.5).ln()) / 2.0).abs());

    // Residuals 0.5, -0.5, 0, 1 against deviations -1.5, -0.5, 0.5, 1.5.
    let truth = [1.0, 2.0, 3.0, 4.0];
    let pred = [0.5, 2.5, 3.0, 3.0];
    let r2_err = (r2(&truth, &pred)? - (1.0 - 1.5 / 5.0)).abs();
    // Prediction deviations -1.75, 0.25, 0.75, 0.75: covariance sum 4,
    // squared sums 5 and 4.25.
    let corr_err = (pearson(&truth, &pred)? - 4.0 / (5.0f64 * 4.25).sqrt()).abs();

    let pass = worst <= 1e-12 && kl_err <= 1e-12 && r2_err <= 1e-12 && corr_err <= 1e-12;
    Ok(Outcome::new(
        pass,
        format!(
            "AUC max gap {worst:.1e} over 1000 tied instances; kl {kl_err:.1e}, R2 {r2_err:.1e}, corr {corr_err:.1e}"
        ),
    ))
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let c = tape.constant(rand_tensor(&shape, 999));
    let p = tape.mul(y, c)?;
    tape.sum_all(p)
}

fn ffn_params(d_in: usize, d_out: usize, seed: u64) -> Vec<Tensor<f64>> {
    let h = 4 * d_out;
    vec![
        rand_tensor(&[d_in, h], seed),
        rand_tensor(&[h], seed + 1),
        rand_tensor(&[h, d_out], seed + 2),
        rand_tensor(&[d_out], seed + 3),
    ]
}

fn ffn_of(v: &[Var]) -> Ffn {
    Ffn {
        w1: v[0],
        b1: v[1],
        w2: v[2],
        b2: v[3],
    }
}

type Objective<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn gradient_suite(_: &mut Lab) -> Result<Outcome> {
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, params: &[Tensor<f64>], f: Objective| {
        let err = grad_check(f, params, 1e-4, 24).map_or(f64::INFINITY, |r| r.max_rel_error);
        results.push((name.to_string(), err));
    };
    let eval = || ForwardOpts::eval();

    for (name, d_in, d_out) in [("phi", 9, 4), ("psi", 5, 3), ("rho", 4, 2)] {
        let mut params = vec![rand_tensor(&[3, 4, d_in], 10)];
        params.extend(ffn_params(d_in, d_out, 11));
        record(name, &params, &|t, v| {
            let y = ffn(t, v[0], &ffn_of(&v[1..]), 0.0, &mut eval())?;
            project(t, y)
        });
    }
    let e = rand_tensor(&[4, 5, 4], 20);
    let mut params = vec![e.clone()];
    params.extend(ffn_params(4, 2, 21));
    record("summary_mean", &params, &|t, v| {
        let y = summary_mean(t, v[0], &ffn_of(&v[1..]), 0.0, &mut eval())?;
        project(t, y)
    });
    let mut params = vec![e.clone()];
    params.extend((0..4).map(|i| rand_tensor(&[4, if i == 3 { 2 } else { 4 }], 22 + i)));
    record("summary_mha", &params, &|t, v| {
        let y = summary_mha(t, v[0], v[1], v[2], v[3], v[4], 2)?;
        project(t, y)
    });
    let mut params = vec![e, rand_tensor(&[4, 4], 26)];
    params.extend(ffn_params(4, 2, 27));
    record("summary_gated", &params, &|t, v| {
        let g = gate_matrix(t, v[0], v[1])?;
        let y = summary_gated(t, v[0], g, &ffn_of(&v[2..]), 0.0, &mut eval())?;
        project(t, y)
    });
    let params = [
        rand_tensor(&[2, 8, 3], 30),
        rand_tensor(&[3, 4], 31),
        rand_tensor(&[3, 3], 32),
        rand_tensor(&[3], 33),
    ];
    record("seq_layer", &params, &|t, v| {
        let y = seq_layer(t, v[0], v[1], v[2], v[3], 0.0, &mut eval())?;
        project(t, y)
    });

    let small = |variant, input_dim, output_dim| SetSeqConfig {
        input_dim,
        n_setseq_layers: 2,
        n_plain_seq_layers: 1,
        d_model: 4,
        chunk_len: 3,
        summary_dim: 2,
        phi_out_dim: 4,
        kernel_len: 3,
        variant,
        mha_heads: 2,
        output_dim,
        ..SetSeqConfig::default()
    };
    let (m, t_len) = (4, 8);
    let input = rand_tensor(&[m, t_len, 4], 40);
    let labels: Vec<usize> = (0..m * t_len).map(|i| (i * 7) % 3).collect();
    let mask: Vec<bool> = (0..m * t_len).map(|i| i % 5 != 0).collect();
    for variant in [
        SummaryVariant::None,
        SummaryVariant::Mean,
        SummaryVariant::Mha,
        SummaryVariant::Gated,
    ] {
        let model = SetSeqModel::<f64>::init(small(variant, 4, 3), 41)?;
        let names: Vec<String> = model.params.keys().cloned().collect();
        let params: Vec<Tensor<f64>> = model.params.values().cloned().collect();
        record(&format!("model_{variant}_cross_entropy"), &params, &|t, v| {
            let bound = Bound::from_vars(names.iter().cloned(), v)?;
            let x = t.constant(input.clone());
            let out = model.forward(t, &bound, x, &mut eval())?;
            cross_entropy(t, out.output, &labels, &mask)
        });
    }

    let returns = rand_tensor(&[3, 10], 50);
    let returns = Tensor::new(&[3, 10], returns.data().iter().map(|v| v * 0.02).collect())?;
    let model = SetSeqModel::<f64>::init(small(SummaryVariant::Mean, 2, 1), 51)?;
    let names: Vec<String> = model.params.keys().cloned().collect();
    let params: Vec<Tensor<f64>> = model.params.values().cloned().collect();
    let input = rand_tensor(&[3, 10, 2], 52);
    let cost = CostConfig::default();
    // Shifted outputs keep every weight away from the kink of |w| at zero.
    record("model_mean_net_sharpe", &params, &|t, v| {
        let bound = Bound::from_vars(names.iter().cloned(), v)?;
        let x = t.constant(input.clone());
        let out = model.forward(t, &bound, x, &mut eval())?;
        let raw = t.add_scalar(out.output, 3.0);
        let y = t.constant(returns.clone());
        sharpe_loss(t, raw, y, Some(&cost))
    });

    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let failing: Vec<&str> = results
        .iter()
        .filter(|(_, e)| e.is_nan() || *e >= 1e-5)
        .map(|(n, _)| n.as_str())
        .collect();
    let detail = if failing.is_empty() {
        format!("{} checks, max relative error {worst:.2e}", results.len())
    } else {
        format!("max relative error {worst:.2e}; failing {failing:?}")
    };
    Ok(Outcome::new(failing.is_empty(), detail))
}

fn to_f64(params: &Params<f32>) -> Result<Params<f64>> {
    params
        .iter()
        .map(|(k, v)| Ok((k.clone(), Tensor::new(v.shape(), v.to_f64())?)))
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn outputs(model: &SetSeqModel<f64>, panel: &UnitPanel) -> Result<Vec<f64>> {
    Ok(model.predict(panel)?.0.into_data())
}

fn structural_properties(lab: &mut Lab) -> Result<Outcome> {
    let trained = lab.mixture()?;
    let cfg = trained.config.clone();
    let model = SetSeqModel::<f64>::from_params(cfg.clone(), to_f64(&trained.params)?)?;
    let sim = SimConfig::default();
    let ep = simulate(&sim, 1 << 40)?;
    let c = cfg.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checks = Vec::new();

    // Relabelling units permutes outputs and leaves the summaries unchanged.
    let ids: Vec<usize> = rand::seq::index::sample(&mut rng, ep.m, 200).into_vec();
    let panel = ep.panel(&ids);
    let mut perm: Vec<usize> = (0..ids.len()).collect();
    perm.shuffle(&mut rng);
    let (base, trace) = model.predict(&panel)?;
    let (moved, moved_trace) = model.predict(&panel.select(&perm))?;
    let (base, moved) = (base.into_data(), moved.into_data());
    let row = ep.t * sim_states();
    let mut equi: f64 = 0.0;
    for (r, &src) in perm.iter().enumerate() {
        equi = equi.max(max_diff(
            &moved[r * row..(r + 1) * row],
            &base[src * row..(src + 1) * row],
        ));
    }
    let inv = (0..trace.layers.len())
        .map(|l| max_diff(&trace.layers[l], &moved_trace.layers[l]))
        .fold(0.0, f64::max);
    checks.push(("equivariance", equi, 1e-10));
    checks.push(("invariance", inv, 1e-10));

    // Perturbing periods from `cut` on leaves earlier outputs bit-identical.
    let cut = ep.t / 2;
    let mut shocked = panel.clone();
    for i in 0..ids.len() {
        for s in cut..ep.t {
            for k in 0..c {
                shocked.data[(i * ep.t + s) * c + k] += rng.gen_range(-1.0..1.0);
            }
        }
    }
    let after = outputs(&model, &shocked)?;
    let mut leak: f64 = 0.0;
    let mut moved_later = false;
    for i in 0..ids.len() {
        for s in 0..ep.t {
            let at = (i * ep.t + s) * sim_states();
            let d = max_diff(&after[at..at + sim_states()], &base[at..at + sim_states()]);
            if s < cut {
                leak = leak.max(d);
            } else {
                moved_later |= d > 0.0;
            }
        }
    }
    checks.push(("causality", if moved_later { leak } else { f64::INFINITY }, 0.0));

    // Inference at unit counts below the training panels.
    let mut bad_rows: f64 = 0.0;
    for m in [1, 10, 100] {
        let out = outputs(&model, &ep.panel(&ids[..m]))?;
        bad_rows = bad_rows.max(if out.len() == m * row && out.iter().all(|v| v.is_finite()) {
            0.0
        } else {
            f64::INFINITY
        });
    }
    checks.push(("variable M", bad_rows, 0.0));

    // Listing every unit twice leaves the mean summary, and so each output, unchanged.
    let doubled_ids: Vec<usize> = (0..100).chain(0..100).collect();
    let small = ep.panel(&ids[..100]);
    let single = outputs(&model, &small)?;
    let doubled = outputs(&model, &small.select(&doubled_ids))?;
    let mut dup: f64 = 0.0;
    for (r, &src) in doubled_ids.iter().enumerate() {
        dup = dup.max(max_diff(
            &doubled[r * row..(r + 1) * row],
            &single[src * row..(src + 1) * row],
        ));
    }
    checks.push(("duplication", dup, 1e-10));

    // The trained mean model with a fresh gate, forced to G = 1/M.
    let gated_cfg = SetSeqConfig {
        variant: SummaryVariant::Gated,
        ..cfg
    };
    let mut params = model.params.clone();
    params.extend(
        SetSeqModel::<f64>::init(gated_cfg.clone(), 5)?
            .params
            .into_iter()
            .filter(|(k, _)| k.contains(".gate.")),
    );
    let gated = SetSeqModel::from_params(gated_cfg, params)?;
    let mut tape = Tape::inference();
    let bound = gated.bind(&mut tape);
    let x = tape.constant(small.to_tensor());
    let mut opts = ForwardOpts {
        uniform_gate: true,
        ..ForwardOpts::eval()
    };
    let out = gated.forward(&mut tape, &bound, x, &mut opts)?;
    checks.push(("uniform gate", max_diff(tape.value(out.output).data(), &single), 1e-6));

    let pass = checks.iter().all(|(_, v, tol)| v <= tol);
    let detail = checks
        .iter()
        .map(|(n, v, _)| format!("{n} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Outcome::new(pass, detail))
}

fn sim_states() -> usize {
    setseq_core::sim::STATES
}

fn portfolio_pipeline(_: &mut Lab) -> Result<Outcome> {
    let model_cfg = SetSeqConfig {
        input_dim: 2,
        n_setseq_layers: 1,
        n_plain_seq_layers: 1,
        d_model: 8,
        phi_out_dim: 4,
        kernel_len: 10,
        mha_heads: 2,
        output_dim: 1,
        ..SetSeqConfig::default()
    };
    let cost = CostConfig::default();
    let seeds = 5;
    let mut sr = [0.0; 3];
    let mut ledger_ok = true;
    let mut worst_l1: f64 = 0.0;
    for seed in 0..seeds {
        let market = generate_market(&MarketConfig {
            n_assets: 500,
            signal_strength: 0.1,
            seed,
            ..MarketConfig::default()
        })?;
        let mut model = SetSeqModel::<f32>::init(model_cfg.clone(), seed)?;
        let mut source = market.source(60, 50)?;
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.003,
            loss: LossKind::NetSharpe,
            seed,
            ..TrainConfig::default()
        };
        train(&mut model, &mut source, &cfg)?;
        let days = market.test_days();
        let books = [
            market.model_weights(&model, days.clone())?,
            market.oracle_weights(days.clone()),
            market.equal_weights(days.clone()),
        ];
        for (k, w) in books.into_iter().enumerate() {
            let (ledger, eval) = backtest(&market, days.clone(), w, Some(&cost))?;
            sr[k] += eval.sharpe_annualized / seeds as f64;
            for d in 0..ledger.days.len() {
                ledger_ok &= ledger.net[d] == ledger.gross[d] - ledger.cost[d];
                let l1: f64 = ledger.weights[d].iter().map(|w| w.abs()).sum();
                worst_l1 = worst_l1.max((l1 - 1.0).abs());
            }
        }
    }
    let [model, oracle, equal] = sr;
    let pass = model >= 1.5 * equal && model <= oracle && ledger_ok && worst_l1 <= 1e-9;
    Ok(Outcome::new(
        pass,
        format!(
            "mean net SR model {model:.2}, oracle {oracle:.2}, equal weight {equal:.2}; \
             r_net = r - cost {ledger_ok}, max |L1 - 1| {worst_l1:.1e}"
        ),
    ))
}
