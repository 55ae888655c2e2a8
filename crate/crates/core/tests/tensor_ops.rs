use setseq_core::diff::{load_checkpoint, save_checkpoint, Tape, Tensor};
use setseq_core::model::Params;
use setseq_core::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::full(&[2, 4], 3.5));
    let y = tape.softmax(x, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn delta_kernel_conv_is_identity() {
    let mut tape = Tape::<f64>::inference();
    let data: Vec<f64> = (0..2 * 6 * 3).map(|i| (i as f64).sin()).collect();
    let x = tape.constant(t64(&[2, 6, 3], &data));
    // Tap 0 weights the current period.
    let mut k = vec![0.0; 3 * 4];
    for c in 0..3 {
        k[c * 4] = 1.0;
    }
    let k = tape.constant(t64(&[3, 4], &k));
    let y = tape.causal_conv(x, k).unwrap();
    assert_eq!(tape.value(y).data(), data.as_slice());
}

#[test]
fn shifted_delta_kernel_lags_the_input() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(t64(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(t64(&[1, 3], &[0.0, 0.0, 1.0]));
    let y = tape.causal_conv(x, k).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 1.0, 2.0]);
}

#[test]
fn mean_backward_spreads_one_over_len() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[5, 2]));
    let m = tape.mean_axis(x, 0).unwrap();
    let s = tape.sum_all(m).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|&g| (g - 0.2).abs() < 1e-15));
}

#[test]
fn lag_chunk_orders_oldest_first_with_zero_padding() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(t64(&[1, 3, 1], &[1.0, 2.0, 3.0]));
    let y = tape.lag_chunk(x, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 2]);
    assert_eq!(tape.value(y).data(), &[0.0, 1.0, 1.0, 2.0, 2.0, 3.0]);
}

#[test]
fn l2_normalize_keeps_zero_rows() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(t64(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
    let y = tape.l2_normalize(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
}

#[test]
fn shape_mismatches_are_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    let w = tape.param(Tensor::zeros(&[2, 4]));
    assert!(matches!(tape.affine(a, w, None), Err(Error::Shape { .. })));
    assert!(matches!(tape.reshape(a, &[5]), Err(Error::Shape { .. })));
    assert!(tape.sum_axis(a, 2).is_err());
    assert!(matches!(tape.backward(a), Err(Error::Shape { .. })));
    assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn inference_tape_records_no_gradients() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.param(Tensor::full(&[2], 1.0));
    let s = tape.sum_all(x).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(x).is_none());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ssck");
    let mut params = Params::<f32>::new();
    params.insert(
        "a.w".into(),
        Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 1e-7, f32::MAX, 0.0]).unwrap(),
    );
    params.insert("b".into(), Tensor::new(&[1], vec![0.125]).unwrap());
    save_checkpoint(&path, &params).unwrap();
    let back: Params<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back, params);
    assert!(path.with_extension("json").exists());

    // Loading into a wider type converts exactly.
    let wide: Params<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(wide["a.w"].data()[1], -2.5);

    // Truncated files are rejected.
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}
