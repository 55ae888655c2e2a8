use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "sim": {"m": 20, "t": 24},
  "model": {"n_setseq_layers": 1, "n_plain_seq_layers": 1, "d_model": 4, "phi_out_dim": 4,
            "kernel_len": 4, "mha_heads": 2},
  "train": {"epochs": 1, "learning_rate": 0.01},
  "sampler": {"max_units": 20},
  "episodes": 3,
  "test_episodes": 2,
  "sweep": {"unit_counts": [5, 20], "episodes": 2},
  "market": {"n_assets": 20, "t_train": 40, "t_test": 20},
  "portfolio": {"window": 10, "steps_per_epoch": 2, "epochs": 1}
}"#;

fn setseq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setseq"))
        .args(["--config", dir.join("run.json").to_str().unwrap()])
        .args(args)
        .env("SETSEQ_DATA_DIR", dir.join("data"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.json"), TINY).unwrap();

    ok(setseq(dir, &["simulate", "--episodes", "2", "--format", "binary"]));
    assert!(dir.join("data/simulate/episodes.bin").exists());

    ok(setseq(dir, &["kalman", "--units", "10"]));
    let sweep = std::fs::read_to_string(dir.join("data/kalman/kalman_sweep.csv")).unwrap();
    assert!(sweep.starts_with("n,method,metric,value\n"));
    assert!(sweep.contains(",fixed-gain,"));

    let model = dir.join("model");
    ok(setseq(dir, &["train", "--out", model.to_str().unwrap(), "--seed", "3"]));
    assert!(model.join("final.ssck").exists());
    assert!(model.join("checkpoints/epoch000.ssck").exists());

    ok(setseq(
        dir,
        &["eval", "--model", model.to_str().unwrap(), "--units", "10"],
    ));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("data/eval/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["observed_units"], 10);

    let m = model.to_str().unwrap();
    ok(setseq(
        dir,
        &[
            "sweep-units",
            "--model",
            m,
            "--deterministic",
            "--out",
            dir.join("serial").to_str().unwrap(),
        ],
    ));
    ok(setseq(
        dir,
        &[
            "sweep-units",
            "--model",
            m,
            "--out",
            dir.join("parallel").to_str().unwrap(),
        ],
    ));
    let a = std::fs::read(dir.join("serial/sweep.csv")).unwrap();
    let b = std::fs::read(dir.join("parallel/sweep.csv")).unwrap();
    assert_eq!(a, b);
    assert!(dir.join("serial/sweep_auc.svg").exists());

    ok(setseq(dir, &["probe", "--model", m]));
    ok(setseq(dir, &["backtest"]));
    let summary = std::fs::read_to_string(dir.join("data/backtest/backtest.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7);

    ok(setseq(
        dir,
        &[
            "report",
            dir.join("serial").to_str().unwrap(),
            dir.join("data/backtest").to_str().unwrap(),
        ],
    ));
    assert!(dir.join("data/report/index.csv").exists());
}

#[test]
fn same_seed_same_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.json"), TINY).unwrap();
    for name in ["a", "b"] {
        ok(setseq(
            dir,
            &["train", "--seed", "9", "--out", dir.join(name).to_str().unwrap()],
        ));
    }
    for file in ["final.ssck", "history.csv"] {
        assert_eq!(
            std::fs::read(dir.join("a").join(file)).unwrap(),
            std::fs::read(dir.join("b").join(file)).unwrap()
        );
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.json"), r#"{"sim": {"m": 20, "bogus": 1}}"#).unwrap();
    assert_eq!(setseq(dir, &["kalman"]).status.code(), Some(2));

    std::fs::write(dir.join("run.json"), TINY).unwrap();
    assert_eq!(
        setseq(dir, &["eval", "--units", "0", "--model", "missing"])
            .status
            .code(),
        Some(3)
    );
    std::fs::create_dir_all(dir.join("loose")).unwrap();
    std::fs::write(dir.join("loose/x.csv"), "a\n1\n").unwrap();
    let out = setseq(dir, &["report", dir.join("loose").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
    assert_eq!(setseq(dir, &["kalman", "--variant", "bogus"]).status.code(), Some(2));
}
