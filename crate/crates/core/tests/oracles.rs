//! Direct-loop and statistical oracles for the tensor ops and networks.

mod support;

use olens::network::{
    build_classifier, build_unet, load_checkpoint, save_checkpoint, write_checkpoint,
};
use olens::{ForwardMode, RngStream, Tape, Tensor};
use support::{random_tensor, random_unit};

fn conv_oracle(x: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b[o];
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x.data()[(ci * h + iy as usize) * w + ix as usize];
                            acc += xv * k.data()[((o * c + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

fn conv_on_tape(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut tape = Tape::new();
    let (xv, kv, bv) = (
        tape.constant(x.clone()),
        tape.constant(k.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv2d(xv, kv, bv, stride, pad).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_matches_direct_loop() {
    for seed in 0..5 {
        let rng = &mut RngStream::new(seed);
        let x = random_tensor(&[1, 5, 5], rng);
        let k = random_tensor(&[2, 1, 3, 3], rng);
        let b = Tensor::zeros(&[2]);
        let got = conv_on_tape(&x, &k, &b, 1, 1);
        assert_eq!(got.shape(), &[2, 5, 5]);
        for (g, e) in got.data().iter().zip(conv_oracle(&x, &k, b.data(), 1, 1)) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }

        let x = random_tensor(&[3, 9, 7], rng);
        let k = random_tensor(&[4, 3, 3, 3], rng);
        let b = random_tensor(&[4], rng);
        let got = conv_on_tape(&x, &k, &b, 2, 1);
        assert_eq!(got.shape(), &[4, 5, 4]);
        for (g, e) in got.data().iter().zip(conv_oracle(&x, &k, b.data(), 2, 1)) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
    }
}

#[test]
fn max_pool_matches_windowed_max() {
    let rng = &mut RngStream::new(4);
    let x = random_tensor(&[2, 8, 8], rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.max_pool2d(xv).unwrap();
    let got = tape.value(y);
    assert_eq!(got.shape(), &[2, 4, 4]);
    for c in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let window = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .map(|(dy, dx)| x.data()[(c * 8 + 2 * i + dy) * 8 + 2 * j + dx]);
                let expected = window.into_iter().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(got.data()[(c * 4 + i) * 4 + j], expected);
            }
        }
    }
}

#[test]
fn inverted_dropout_is_unbiased() {
    let n = 1_000_000;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(&[n], 1.0));
    let y = tape
        .dropout(x, 0.5, &mut RngStream::new(2024), true)
        .unwrap();
    let out = tape.value(y).data();
    let mean = out.iter().sum::<f64>() / n as f64;
    assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    let dropped = out.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
    assert!((dropped - 0.5).abs() < 0.005, "dropped fraction {dropped}");
    assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn stochastic_passes_differ_across_seeds() {
    let unet = build_unet(4, 0.1, [1, 16, 16], 3).unwrap();
    let input = random_unit(&[1, 16, 16], &mut RngStream::new(1));
    let a = unet
        .forward(&input, ForwardMode::Stochastic, &mut RngStream::new(10))
        .unwrap();
    let b = unet
        .forward(&input, ForwardMode::Stochastic, &mut RngStream::new(11))
        .unwrap();
    assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    let again = unet
        .forward(&input, ForwardMode::Stochastic, &mut RngStream::new(10))
        .unwrap();
    assert_eq!(a, again);
}

#[test]
fn checkpoint_round_trip_preserves_outputs_on_random_inputs() {
    let dir = tempfile::tempdir().unwrap();
    for (name, net) in [
        ("unet.ckpt", build_unet(4, 0.1, [1, 16, 16], 5).unwrap()),
        (
            "cls.ckpt",
            build_classifier(3, [1, 16, 16], 0.2, 6).unwrap(),
        ),
    ] {
        let path = dir.path().join(name);
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(write_checkpoint(&loaded), std::fs::read(&path).unwrap());
        let rng = &mut RngStream::new(77);
        for _ in 0..100 {
            let x = random_unit(&[1, 16, 16], rng);
            let det = |n: &olens::Network| {
                n.forward(&x, ForwardMode::Deterministic, &mut RngStream::new(0))
                    .unwrap()
            };
            let a = det(&net);
            let b = det(&loaded);
            assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        }
    }
}
