use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use setseq_core::diff::{load_checkpoint, save_checkpoint, DType, Scalar};
use setseq_core::experiment::{
    kalman_probs, model_probs, probe_matrix, sweep_csv, sweep_observation, sweep_units, SweepConfig, SweepPoint,
    TEST_STREAM_BASE,
};
use setseq_core::kalman::{filter_observation, KalmanVariant};
use setseq_core::market::{backtest, generate_market, Market};
use setseq_core::mem::measure_peak;
use setseq_core::metrics::{CellSet, ClassificationEval, PortfolioEval};
use setseq_core::model::{SetSeqConfig, SetSeqModel, SummaryVariant};
use setseq_core::sim::{default_rate, simulate, write_binary, write_jsonl};
use setseq_core::train::{train, ContagionSource, TrainConfig, TrainReport};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{verify, OutputDir, MANIFEST_NAME};
use crate::svg::{line_chart, Series};

/// Flags shared by every command, after config overrides were applied.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub units: Option<usize>,
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Contagion,
    Portfolio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EpisodeFormat {
    Jsonl,
    Binary,
}

/// `model.json` of a trained model directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub task: Task,
    pub precision: DType,
    pub config: SetSeqConfig,
}

const MODEL_FILE: &str = "model.json";
const WEIGHTS_FILE: &str = "final.ssck";

fn load_model<F: Scalar>(dir: &Path) -> CliResult<(ModelFile, SetSeqModel<F>)> {
    let text = std::fs::read_to_string(dir.join(MODEL_FILE))
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.join(MODEL_FILE).display())))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{MODEL_FILE}: {e}")))?;
    let params = load_checkpoint(&dir.join(WEIGHTS_FILE))?;
    let model = SetSeqModel::from_params(file.config.clone(), params)?;
    Ok((file, model))
}

fn observed_units(ctx: &Ctx) -> CliResult<usize> {
    let n = ctx.units.unwrap_or(ctx.cfg.sim.m);
    if n == 0 || n > ctx.cfg.sim.m {
        return Err(CliError::Config(format!("--units must lie in [1, {}]", ctx.cfg.sim.m)));
    }
    Ok(n)
}

/// Quotes a CSV field when RFC 4180 requires it.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

pub fn simulate_cmd(ctx: &Ctx, episodes: Option<usize>, format: EpisodeFormat, held_out: bool) -> CliResult<()> {
    let n = episodes.unwrap_or(ctx.cfg.episodes);
    let base = if held_out { TEST_STREAM_BASE } else { 0 };
    let eps = (0..n)
        .map(|e| simulate(&ctx.cfg.sim, base + e as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = OutputDir::create(ctx.out.clone())?;
    let name = match format {
        EpisodeFormat::Jsonl => {
            write_jsonl(&out.path("episodes.jsonl"), &eps)?;
            "episodes.jsonl"
        }
        EpisodeFormat::Binary => {
            write_binary(&out.path("episodes.bin"), &eps)?;
            "episodes.bin"
        }
    };
    out.track(name);
    let mut csv = String::from("episode,stream,default_rate\n");
    for (e, ep) in eps.iter().enumerate() {
        let _ = writeln!(csv, "{e},{},{}", base + e as u64, default_rate(ep));
    }
    out.write("default_rates.csv", csv)?;
    out.finish("simulate", &ctx.cfg.sim)?;
    log::info!("wrote {n} episodes to {}", ctx.out.display());
    Ok(())
}

fn variant_name(v: KalmanVariant) -> &'static str {
    match v {
        KalmanVariant::AppendixLiteral => "appendix",
        KalmanVariant::DynamicsConsistent => "dynamics",
        KalmanVariant::FixedGain => "fixed-gain",
    }
}

pub fn kalman_cmd(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let variants = [
        KalmanVariant::AppendixLiteral,
        KalmanVariant::DynamicsConsistent,
        KalmanVariant::FixedGain,
    ];
    let mut points = Vec::new();
    for v in variants {
        for mut p in sweep_units::<f64>(&cfg.sim, &cfg.sweep, v, None)? {
            p.method = variant_name(v).into();
            points.push(p);
        }
    }
    let mut out = OutputDir::create(ctx.out.clone())?;
    out.write("kalman_sweep.csv", sweep_csv(&points))?;

    // Filter paths on the first held-out episode at the requested count.
    let n = ctx.units.unwrap_or(100).min(cfg.sim.m);
    let ep = simulate(&cfg.sim, TEST_STREAM_BASE)?;
    let obs = sweep_observation(&ep, &cfg.sim, n, cfg.sweep.seed, 0)?;
    let mut csv = String::from("variant,group,t,lambda,lambda_hat,gain,variance\n");
    for v in variants {
        let paths = filter_observation(&obs, v, &cfg.sim)?;
        for (g, path) in paths.iter().enumerate() {
            for s in 0..ep.t {
                let _ = writeln!(
                    csv,
                    "{},{g},{s},{},{},{},{}",
                    variant_name(v),
                    ep.lambda[g][s],
                    path.lambda_hat[s],
                    path.gain[s],
                    path.variance[s]
                );
            }
        }
    }
    out.write("kalman_paths.csv", csv)?;
    out.finish("kalman", cfg)?;
    Ok(())
}

fn save_trained<F: Scalar>(
    out: &mut OutputDir,
    task: Task,
    precision: DType,
    model: &SetSeqModel<F>,
    report: &TrainReport,
    peak_heap: usize,
) -> CliResult<()> {
    save_checkpoint(&out.path(WEIGHTS_FILE), &model.params)?;
    out.track(WEIGHTS_FILE);
    out.write_json(
        MODEL_FILE,
        &ModelFile {
            task,
            precision,
            config: model.config.clone(),
        },
    )?;
    out.write("history.csv", report.history_csv())?;
    out.write_json(
        "train.json",
        &serde_json::json!({
            "epoch_secs": report.epoch_secs,
            "mean_epoch_secs": report.mean_epoch_secs(),
            "peak_tape_bytes": report.peak_tape_bytes,
            "peak_heap_bytes": peak_heap,
            "parameters": model.num_params(),
        }),
    )?;
    Ok(())
}

fn train_contagion<F: Scalar>(
    cfg: &RunConfig,
    model_cfg: SetSeqConfig,
    tcfg: &TrainConfig,
) -> CliResult<(SetSeqModel<F>, TrainReport, usize)> {
    let mut source = ContagionSource::new(cfg.sim.clone(), cfg.episodes, cfg.sampler)?;
    let mut model = SetSeqModel::<F>::init(model_cfg, tcfg.seed)?;
    let (report, peak) = measure_peak(|| train(&mut model, &mut source, tcfg));
    Ok((model, report?, peak))
}

fn portfolio_train_config(cfg: &RunConfig, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
    TrainConfig {
        epochs: cfg.portfolio.epochs,
        learning_rate: cfg.portfolio.learning_rate,
        loss: cfg.portfolio.loss,
        checkpoint_dir,
        ..cfg.train.clone()
    }
}

fn train_portfolio<F: Scalar>(
    cfg: &RunConfig,
    market: &Market,
    tcfg: &TrainConfig,
) -> CliResult<(SetSeqModel<F>, TrainReport, usize)> {
    let mut source = market.source(cfg.portfolio.window, cfg.portfolio.steps_per_epoch)?;
    let mut model = SetSeqModel::<F>::init(cfg.portfolio.model.clone(), tcfg.seed)?;
    let (report, peak) = measure_peak(|| train(&mut model, &mut source, tcfg));
    Ok((model, report?, peak))
}

fn train_typed<F: Scalar>(ctx: &Ctx, task: Task) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let mut out = OutputDir::create(ctx.out.clone())?;
    let ckpt = Some(out.path("checkpoints"));
    match task {
        Task::Contagion => {
            let tcfg = TrainConfig {
                checkpoint_dir: ckpt,
                ..cfg.train.clone()
            };
            let (model, report, peak) = train_contagion::<F>(cfg, cfg.model.clone(), &tcfg)?;
            save_trained(&mut out, task, cfg.train.precision, &model, &report, peak)?;
        }
        Task::Portfolio => {
            let market = generate_market(&cfg.market)?;
            let tcfg = portfolio_train_config(cfg, ckpt);
            let (model, report, peak) = train_portfolio::<F>(cfg, &market, &tcfg)?;
            save_trained(&mut out, task, cfg.train.precision, &model, &report, peak)?;
        }
    }
    out.finish("train", cfg)?;
    Ok(())
}

pub fn train_cmd(ctx: &Ctx, task: Task) -> CliResult<()> {
    match ctx.cfg.train.precision {
        DType::F32 => train_typed::<f32>(ctx, task),
        DType::F64 => train_typed::<f64>(ctx, task),
    }
}

#[derive(Debug, Serialize)]
struct ContagionReport {
    observed_units: usize,
    episodes: usize,
    kalman_variant: KalmanVariant,
    model: ClassificationEval,
    kalman: ClassificationEval,
}

fn transitions_csv(rows: &[(&str, &ClassificationEval)]) -> String {
    let mut csv = String::from("method,from,to,count,auc\n");
    for (name, eval) in rows {
        for t in &eval.transitions {
            let _ = writeln!(csv, "{name},{},{},{},{}", t.from, t.to, t.count, opt(t.auc));
        }
    }
    csv
}

fn portfolio_report<F: Scalar>(cfg: &RunConfig, model: &SetSeqModel<F>) -> CliResult<(PortfolioEval, PortfolioEval)> {
    let market = generate_market(&cfg.market)?;
    let days = market.test_days();
    let w = market.model_weights(model, days.clone())?;
    let (_, gross) = backtest(&market, days.clone(), w.clone(), None)?;
    let (_, net) = backtest(&market, days, w, Some(&cfg.train.cost))?;
    Ok((gross, net))
}

fn eval_typed<F: Scalar>(ctx: &Ctx, dir: &Path) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let (file, model) = load_model::<F>(dir)?;
    let mut out = OutputDir::create(ctx.out.clone())?;
    match file.task {
        Task::Contagion => {
            let n = observed_units(ctx)?;
            let mut learned = CellSet::default();
            let mut oracle = CellSet::default();
            for e in 0..cfg.test_episodes {
                let ep = simulate(&cfg.sim, TEST_STREAM_BASE + e as u64)?;
                let obs = sweep_observation(&ep, &cfg.sim, n, cfg.sweep.seed, e)?;
                let (p, _) = model_probs(&model, &ep, &obs.observed_ids)?;
                learned.extend(&ep, &obs.observed_ids, &p);
                let k = kalman_probs(&ep, &obs, cfg.kalman_variant, &cfg.sim)?;
                oracle.extend(&ep, &obs.observed_ids, &k);
            }
            let report = ContagionReport {
                observed_units: n,
                episodes: cfg.test_episodes,
                kalman_variant: cfg.kalman_variant,
                model: learned.evaluate()?,
                kalman: oracle.evaluate()?,
            };
            out.write(
                "transitions.csv",
                transitions_csv(&[("model", &report.model), ("kalman", &report.kalman)]),
            )?;
            out.write_json("eval.json", &report)?;
        }
        Task::Portfolio => {
            let (gross, net) = portfolio_report(cfg, &model)?;
            out.write_json("eval.json", &serde_json::json!({ "gross": gross, "net": net }))?;
        }
    }
    out.finish("eval", cfg)?;
    Ok(())
}

fn model_precision(dir: &Path) -> CliResult<DType> {
    let text = std::fs::read_to_string(dir.join(MODEL_FILE))
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.join(MODEL_FILE).display())))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{MODEL_FILE}: {e}")))?;
    Ok(file.precision)
}

pub fn eval_cmd(ctx: &Ctx, dir: &Path) -> CliResult<()> {
    match model_precision(dir)? {
        DType::F32 => eval_typed::<f32>(ctx, dir),
        DType::F64 => eval_typed::<f64>(ctx, dir),
    }
}

/// Runs the sweep one unit count at a time, in parallel unless asked not to.
/// Each count draws its own observations, so the result does not depend on
/// the schedule.
fn sweep_points<F: Scalar>(ctx: &Ctx, counts: &[usize], model: Option<&SetSeqModel<F>>) -> CliResult<Vec<SweepPoint>> {
    let cfg = &ctx.cfg;
    let one = |n: usize| {
        let sc = SweepConfig {
            unit_counts: vec![n],
            ..cfg.sweep.clone()
        };
        sweep_units(&cfg.sim, &sc, cfg.kalman_variant, model)
    };
    let parts: Vec<_> = if ctx.deterministic {
        counts.iter().map(|&n| one(n)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = counts.iter().map(|&n| s.spawn(move || one(n))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    };
    let mut points = Vec::new();
    for p in parts {
        points.extend(p?);
    }
    Ok(points)
}

fn sweep_typed<F: Scalar>(ctx: &Ctx, dir: Option<&Path>) -> CliResult<()> {
    let model = match dir {
        Some(d) => Some(load_model::<F>(d)?.1),
        None => None,
    };
    let counts = match ctx.units {
        Some(_) => vec![observed_units(ctx)?],
        None => ctx.cfg.sweep.unit_counts.clone(),
    };
    let points = sweep_points(ctx, &counts, model.as_ref())?;
    let mut out = OutputDir::create(ctx.out.clone())?;
    out.write("sweep.csv", sweep_csv(&points))?;
    type Metric = fn(&ClassificationEval) -> Option<f64>;
    let metrics: [(&str, &str, Metric); 3] = [
        ("auc", "absorbing-state AUC", |e| e.auc_absorbing),
        ("r2", "absorbing-state R²", |e| e.r2_absorbing),
        ("corr", "absorbing-state correlation", |e| e.corr_absorbing),
    ];
    for (key, label, get) in metrics {
        let series: Vec<Series> = ["model", "kalman"]
            .into_iter()
            .map(|method| Series {
                label: method,
                points: points
                    .iter()
                    .filter(|p| p.method == method)
                    .map(|p| (p.n as f64, get(&p.eval).unwrap_or(f64::NAN)))
                    .collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        out.write(&format!("sweep_{key}.svg"), line_chart(label, key, &series))?;
    }
    out.finish("sweep-units", &ctx.cfg)?;
    Ok(())
}

pub fn sweep_cmd(ctx: &Ctx, dir: Option<&Path>) -> CliResult<()> {
    match dir.map(model_precision).transpose()? {
        Some(DType::F64) => sweep_typed::<f64>(ctx, dir),
        _ => sweep_typed::<f32>(ctx, dir),
    }
}

#[derive(Debug, Serialize)]
struct AblationRow {
    variant: SummaryVariant,
    kernel_len: usize,
    kl_full: f64,
    auc_absorbing: Option<f64>,
    epoch_secs: f64,
    peak_heap_bytes: usize,
    rel_epoch_time: f64,
    rel_mem: f64,
}

pub fn ablate_cmd(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let mut rows = Vec::new();
    for variant in [SummaryVariant::None, SummaryVariant::Mean, SummaryVariant::Mha] {
        for kernel_len in [1, 50] {
            let model_cfg = SetSeqConfig {
                variant,
                kernel_len,
                ..cfg.model.clone()
            };
            log::info!("ablation: {variant} with kernel {kernel_len}");
            let (model, report, peak) = train_contagion::<f32>(cfg, model_cfg, &cfg.train)?;
            let mut cells = CellSet::default();
            for e in 0..cfg.test_episodes {
                let ep = simulate(&cfg.sim, TEST_STREAM_BASE + e as u64)?;
                let ids: Vec<usize> = (0..ep.m).collect();
                let (p, _) = model_probs(&model, &ep, &ids)?;
                cells.extend(&ep, &ids, &p);
            }
            let eval = cells.evaluate()?;
            rows.push(AblationRow {
                variant,
                kernel_len,
                kl_full: eval.kl_full,
                auc_absorbing: eval.auc_absorbing,
                epoch_secs: report.mean_epoch_secs(),
                peak_heap_bytes: peak,
                rel_epoch_time: f64::NAN,
                rel_mem: f64::NAN,
            });
        }
    }
    let base = rows
        .iter()
        .find(|r| r.variant == SummaryVariant::Mean && r.kernel_len == 50)
        .map(|r| (r.epoch_secs, r.peak_heap_bytes as f64))
        .expect("the grid includes the reference row");
    let mut csv =
        String::from("variant,kernel_len,kl_full,auc_absorbing,epoch_secs,peak_heap_bytes,rel_epoch_time,rel_mem\n");
    for r in &mut rows {
        r.rel_epoch_time = r.epoch_secs / base.0;
        r.rel_mem = r.peak_heap_bytes as f64 / base.1;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.kernel_len,
            r.kl_full,
            opt(r.auc_absorbing),
            r.epoch_secs,
            r.peak_heap_bytes,
            r.rel_epoch_time,
            r.rel_mem
        );
    }
    let mut out = OutputDir::create(ctx.out.clone())?;
    out.write("ablation.csv", csv)?;
    out.write_json("ablation.json", &rows)?;
    out.finish("ablate", cfg)?;
    Ok(())
}

fn probe_typed<F: Scalar>(ctx: &Ctx, dir: &Path) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let (_, model) = load_model::<F>(dir)?;
    let matrix = probe_matrix(&model, &cfg.sim, &cfg.sweep)?;
    let mut csv = String::from("n,layer,abs_corr\n");
    for (n, row) in cfg.sweep.unit_counts.iter().zip(&matrix) {
        for (l, v) in row.iter().enumerate() {
            let _ = writeln!(csv, "{n},{l},{v}");
        }
    }
    let mut out = OutputDir::create(ctx.out.clone())?;
    out.write("probe.csv", csv)?;
    let ep = simulate(&cfg.sim, TEST_STREAM_BASE)?;
    let obs = sweep_observation(&ep, &cfg.sim, observed_units(ctx)?, cfg.sweep.seed, 0)?;
    let (_, trace) = model_probs(&model, &ep, &obs.observed_ids)?;
    out.write("trace.csv", trace.to_csv())?;
    out.finish("probe", cfg)?;
    Ok(())
}

pub fn probe_cmd(ctx: &Ctx, dir: &Path) -> CliResult<()> {
    match model_precision(dir)? {
        DType::F32 => probe_typed::<f32>(ctx, dir),
        DType::F64 => probe_typed::<f64>(ctx, dir),
    }
}

pub fn backtest_cmd(ctx: &Ctx, dir: Option<&Path>) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let market = generate_market(&cfg.market)?;
    let mut out = OutputDir::create(ctx.out.clone())?;
    let model: SetSeqModel<f64> = match dir {
        Some(d) => {
            let (file, model) = load_model::<f64>(d)?;
            if file.task != Task::Portfolio {
                return Err(CliError::Data(format!("{} holds a {:?} model", d.display(), file.task)));
            }
            model
        }
        None => {
            let started = Instant::now();
            let (model, report, peak) = train_portfolio::<f64>(cfg, &market, &portfolio_train_config(cfg, None))?;
            log::info!("trained portfolio model in {:.1}s", started.elapsed().as_secs_f64());
            save_trained(&mut out, Task::Portfolio, DType::F64, &model, &report, peak)?;
            model
        }
    };
    let days = market.test_days();
    let books = [
        ("model", market.model_weights(&model, days.clone())?),
        ("oracle", market.oracle_weights(days.clone())),
        ("equal_weight", market.equal_weights(days.clone())),
    ];
    let mut summary =
        String::from("strategy,costs,sharpe,mean_return,std_return,beta,daily_turnover,short_fraction,total_return\n");
    let mut evals = serde_json::Map::new();
    for (name, w) in books {
        for (tag, cost) in [("gross", None), ("net", Some(&cfg.train.cost))] {
            let (ledger, eval) = backtest(&market, days.clone(), w.clone(), cost)?;
            out.write(&format!("ledger_{name}_{tag}.csv"), ledger.to_csv())?;
            let _ = writeln!(
                summary,
                "{name},{tag},{},{},{},{},{},{},{}",
                eval.sharpe_annualized,
                eval.mean_return_annualized,
                eval.std_return_annualized,
                opt(eval.beta),
                eval.daily_turnover,
                eval.short_fraction,
                eval.cumulative_return.last().copied().unwrap_or(0.0)
            );
            evals.insert(format!("{name}_{tag}"), serde_json::to_value(&eval)?);
        }
    }
    out.write("backtest.csv", summary)?;
    out.write_json("backtest.json", &evals)?;
    out.finish("backtest", cfg)?;
    Ok(())
}

/// Copies verified run outputs into one bundle with an index.
pub fn report_cmd(ctx: &Ctx, inputs: &[PathBuf]) -> CliResult<()> {
    if inputs.is_empty() {
        return Err(CliError::Config("report needs at least one input directory".into()));
    }
    let mut out = OutputDir::create(ctx.out.clone())?;
    let mut index = String::from("source,command,file,sha256\n");
    for (k, dir) in inputs.iter().enumerate() {
        let manifest = verify(dir)?;
        let tag = format!("{k:02}_{}", manifest.command);
        for f in &manifest.files {
            let keep = [".csv", ".json", ".svg"].iter().any(|ext| f.path.ends_with(ext));
            if !keep {
                continue;
            }
            let bytes = std::fs::read(dir.join(&f.path))?;
            out.write(&format!("{tag}/{}", f.path), bytes)?;
            let _ = writeln!(
                index,
                "{},{},{},{}",
                csv_field(&dir.display().to_string()),
                manifest.command,
                csv_field(&f.path),
                f.sha256
            );
        }
        let bytes = std::fs::read(dir.join(MANIFEST_NAME))?;
        out.write(&format!("{tag}/source_{MANIFEST_NAME}"), bytes)?;
    }
    out.write("index.csv", index)?;
    out.finish("report", &inputs)?;
    Ok(())
}
