mod support;

use olens::{RngStream, Tape, Tensor};
use support::{
    central_difference, network_gradient_errors, op_gradient_errors, relative_error, FD_TOLERANCE,
};

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..10 {
        for (op, err) in op_gradient_errors(seed) {
            assert!(
                err < FD_TOLERANCE,
                "{op} seed {seed}: relative error {err:e}"
            );
        }
    }
}

#[test]
fn built_networks_match_central_differences() {
    for seed in 0..10 {
        for (net, err) in network_gradient_errors(seed) {
            assert!(
                err < FD_TOLERANCE,
                "{net} seed {seed}: relative error {err:e}"
            );
        }
    }
}

#[test]
fn dense_input_gradient_is_transposed_weights_times_upstream() {
    let rng = &mut RngStream::new(5);
    let w = support::random_tensor(&[3, 4], rng);
    let x = support::random_tensor(&[4], rng);
    let up = support::random_tensor(&[3], rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let wv = tape.constant(w.clone());
    let bv = tape.constant(Tensor::zeros(&[3]));
    let y = tape.dense(xv, wv, bv).unwrap();
    let u = tape.constant(up.clone());
    let prod = tape.mul(y, u).unwrap();
    let s = tape.sum(prod).unwrap();
    tape.backward(s).unwrap();
    let grad = tape.grad(xv).unwrap().to_vec();

    let expected: Vec<f64> = (0..4)
        .map(|j| (0..3).map(|i| w.data()[i * 4 + j] * up.data()[i]).sum())
        .collect();
    for (g, e) in grad.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12);
    }
    let f = |v: &[f64]| {
        (0..3)
            .map(|i| up.data()[i] * (0..4).map(|j| w.data()[i * 4 + j] * v[j]).sum::<f64>())
            .sum::<f64>()
    };
    let numeric: Vec<f64> = (0..4)
        .map(|i| central_difference(x.data(), i, &f))
        .collect();
    assert!(relative_error(&grad, &numeric) < FD_TOLERANCE);
}

#[test]
fn backward_twice_gives_identical_gradients() {
    let rng = &mut RngStream::new(9);
    let x = support::random_tensor(&[2, 4, 4], rng);
    let k = support::random_tensor(&[2, 2, 3, 3], rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.with_requires_grad(true));
    let kv = tape.leaf(k.with_requires_grad(true));
    let bv = tape.constant(Tensor::zeros(&[2]));
    let c = tape.conv2d(xv, kv, bv, 1, 1).unwrap();
    let r = tape.relu(c).unwrap();
    let p = tape.max_pool2d(r).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    let first = (
        tape.grad(xv).unwrap().to_vec(),
        tape.grad(kv).unwrap().to_vec(),
    );
    tape.backward(s).unwrap();
    assert_eq!(first.0, tape.grad(xv).unwrap());
    assert_eq!(first.1, tape.grad(kv).unwrap());
}
