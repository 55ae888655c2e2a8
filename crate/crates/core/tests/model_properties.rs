//! Structural properties of the Set-Sequence model: exchangeability,
//! causality, variable unit counts and the gated-to-mean reduction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setseq_core::model::{SetSeqConfig, SetSeqModel, SummaryVariant};
use setseq_core::sim::UnitPanel;

const ALL: [SummaryVariant; 4] = [
    SummaryVariant::None,
    SummaryVariant::Mean,
    SummaryVariant::Mha,
    SummaryVariant::Gated,
];

fn config(variant: SummaryVariant) -> SetSeqConfig {
    SetSeqConfig {
        input_dim: 3,
        n_setseq_layers: 2,
        n_plain_seq_layers: 1,
        d_model: 6,
        chunk_len: 3,
        summary_dim: 2,
        phi_out_dim: 4,
        kernel_len: 5,
        dropout: 0.1,
        variant,
        mha_heads: 2,
        output_dim: 3,
        ..Default::default()
    }
}

fn panel(m: usize, t: usize, seed: u64) -> UnitPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..m * t * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    UnitPanel::new(m, t, 3, data).unwrap()
}

fn predict(model: &SetSeqModel<f64>, p: &UnitPanel) -> Vec<f64> {
    model.predict(p).unwrap().0.into_data()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Rows of `[M, T, C]` data for unit `i`.
fn unit(data: &[f64], t: usize, c: usize, i: usize) -> &[f64] {
    &data[i * t * c..(i + 1) * t * c]
}

#[test]
fn permuting_units_permutes_outputs() {
    let (m, t) = (7, 9);
    let p = panel(m, t, 1);
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
    let q = p.select(&perm);
    for variant in ALL {
        let model = SetSeqModel::<f64>::init(config(variant), 3).unwrap();
        let (a, ta) = model.predict(&p).unwrap();
        let (b, tb) = model.predict(&q).unwrap();
        let (a, b) = (a.into_data(), b.into_data());
        for (row, &src) in perm.iter().enumerate() {
            let d = max_diff(unit(&b, t, 3, row), unit(&a, t, 3, src));
            assert!(d < 1e-12, "{variant}: equivariance off by {d:e}");
        }
        // The layer traces average over units, so they are invariant.
        for l in 0..ta.layers.len() {
            let d = max_diff(&ta.layers[l], &tb.layers[l]);
            assert!(d < 1e-12, "{variant}: summary invariance off by {d:e}");
        }
    }
}

#[test]
fn future_inputs_do_not_change_past_outputs() {
    let (m, t, cut) = (5, 12, 7);
    let p = panel(m, t, 4);
    let mut q = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..m {
        for s in cut..t {
            for c in 0..3 {
                q.data[(i * t + s) * 3 + c] += rng.gen_range(-2.0..2.0);
            }
        }
    }
    // The gated summary pools the time-averaged embedding, so it is not
    // causal within a window and is excluded.
    for variant in [SummaryVariant::None, SummaryVariant::Mean, SummaryVariant::Mha] {
        let model = SetSeqModel::<f64>::init(config(variant), 6).unwrap();
        let (a, b) = (predict(&model, &p), predict(&model, &q));
        let mut changed_future = false;
        for i in 0..m {
            for s in 0..t {
                let at = (i * t + s) * 3;
                let d = max_diff(&a[at..at + 3], &b[at..at + 3]);
                if s < cut {
                    assert_eq!(d, 0.0, "{variant}: output at t={s} depends on the future");
                } else {
                    changed_future |= d > 0.0;
                }
            }
        }
        assert!(changed_future, "{variant}: perturbation had no effect");
    }
}

#[test]
fn inference_runs_at_any_unit_count() {
    for variant in ALL {
        let model = SetSeqModel::<f64>::init(config(variant), 7).unwrap();
        for m in [1, 10, 100] {
            let (out, trace) = model.predict(&panel(m, 8, m as u64)).unwrap();
            assert_eq!(out.shape(), &[m, 8, 3]);
            assert!(out.is_finite());
            assert_eq!(trace.layers.len(), if variant == SummaryVariant::None { 0 } else { 2 });
        }
    }
}

#[test]
fn duplicating_every_unit_leaves_outputs_unchanged() {
    let (m, t) = (4, 6);
    let p = panel(m, t, 8);
    let ids: Vec<usize> = (0..m).chain(0..m).collect();
    let doubled = p.select(&ids);
    for variant in ALL {
        let model = SetSeqModel::<f64>::init(config(variant), 9).unwrap();
        let a = predict(&model, &p);
        let b = predict(&model, &doubled);
        for (row, &src) in ids.iter().enumerate() {
            let d = max_diff(unit(&b, t, 3, row), unit(&a, t, 3, src));
            assert!(d < 1e-12, "{variant}: duplicate units changed outputs by {d:e}");
        }
    }
}

#[test]
fn single_unit_set_summaries_agree() {
    // With one unit, mean pooling, attention and gating all return that unit.
    let p = panel(1, 10, 10);
    let gated = SetSeqModel::<f64>::init(config(SummaryVariant::Gated), 11).unwrap();
    let mut mean_params = gated.params.clone();
    mean_params.retain(|k, _| !k.contains(".gate."));
    let mean = SetSeqModel::from_params(config(SummaryVariant::Mean), mean_params).unwrap();
    let d = max_diff(&predict(&gated, &p), &predict(&mean, &p));
    assert!(d < 1e-12, "{d:e}");
}

#[test]
fn uniform_gate_reduces_to_mean_pooling() {
    use setseq_core::diff::Tape;
    use setseq_core::model::ForwardOpts;

    let p = panel(9, 11, 12);
    let gated = SetSeqModel::<f64>::init(config(SummaryVariant::Gated), 13).unwrap();
    let mut mean_params = gated.params.clone();
    mean_params.retain(|k, _| !k.contains(".gate."));
    let mean = SetSeqModel::from_params(config(SummaryVariant::Mean), mean_params).unwrap();

    let mut tape = Tape::inference();
    let bound = gated.bind(&mut tape);
    let x = tape.constant(p.to_tensor());
    let mut opts = ForwardOpts {
        uniform_gate: true,
        ..ForwardOpts::eval()
    };
    let out = gated.forward(&mut tape, &bound, x, &mut opts).unwrap();
    let g = tape.value(out.output).data().to_vec();
    let d = max_diff(&g, &predict(&mean, &p));
    assert!(d < 1e-6, "gated with G = 1/M differs from mean by {d:e}");
}

#[test]
fn eval_is_deterministic_and_f32_tracks_f64() {
    let p = panel(6, 10, 14);
    for variant in ALL {
        let model = SetSeqModel::<f64>::init(config(variant), 15).unwrap();
        assert_eq!(predict(&model, &p), predict(&model, &p));
        let params32 = model
            .params
            .iter()
            .map(|(k, v)| {
                let data = v.data().iter().map(|&x| x as f32).collect();
                (k.clone(), setseq_core::diff::Tensor::new(v.shape(), data).unwrap())
            })
            .collect();
        let m32 = SetSeqModel::<f32>::from_params(config(variant), params32).unwrap();
        let out32: Vec<f64> = m32.predict(&p).unwrap().0.to_f64();
        let d = max_diff(&out32, &predict(&model, &p));
        assert!(d < 1e-4, "{variant}: f32 path differs by {d:e}");
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = serde_json::from_str::<SetSeqConfig>(r#"{"d_model": 8, "dmodel": 9}"#);
    assert!(err.is_err());
    let ok: SetSeqConfig = serde_json::from_str(r#"{"d_model": 8}"#).unwrap();
    assert_eq!(ok.d_model, 8);
}
