//! Shared helpers for the integration tests and the acceptance runner.
#![allow(dead_code)]

use olens::network::{build_classifier, build_unet, Network};
use olens::training::{cross_entropy, dice_loss};
use olens::{ForwardMode, ReduceKind, RngStream, Tape, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn random_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn random_unit(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_range(0.05, 0.95)).collect(),
    )
    .unwrap()
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)` over the checked coordinates; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic) + norm(numeric);
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_difference(x: &[f64], i: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + FD_STEP;
    let up = f(&p);
    p[i] = x[i] - FD_STEP;
    let down = f(&p);
    (up - down) / (2.0 * FD_STEP)
}

/// Collects analytic/numeric pairs. A coordinate whose one-sided slopes
/// disagree sits on a relu or max-pool kink within `±h`; there the analytic
/// value must match one side (a valid subgradient) and the pair is left out of
/// the central-difference error.
#[derive(Debug, Default)]
pub struct FdCheck {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
    pub kinks: usize,
    pub bad_kinks: usize,
}

impl FdCheck {
    pub fn probe(&mut self, analytic: f64, x: &[f64], i: usize, f: &dyn Fn(&[f64]) -> f64) {
        let mut p = x.to_vec();
        let mid = f(&p);
        p[i] = x[i] + FD_STEP;
        let up = f(&p);
        p[i] = x[i] - FD_STEP;
        let down = f(&p);
        let forward = (up - mid) / FD_STEP;
        let backward = (mid - down) / FD_STEP;
        let central = (up - down) / (2.0 * FD_STEP);
        let scale = forward.abs().max(backward.abs());
        // Smooth points differ by |f''|·h (measured below 1e-3 relative); kinks by far more.
        if (forward - backward).abs() > 1e-2 * scale + 1e-8 {
            self.kinks += 1;
            let side = (analytic - forward).abs().min((analytic - backward).abs());
            if side > 0.05 * scale + 1e-7 {
                self.bad_kinks += 1;
            }
        } else {
            self.analytic.push(analytic);
            self.numeric.push(central);
        }
    }

    pub fn checked(&self) -> usize {
        self.analytic.len() + self.kinks
    }

    /// Relative error of the smooth coordinates; infinite when a kink is not
    /// bracketed by the analytic value or when kinks dominate.
    pub fn error(&self) -> f64 {
        if self.bad_kinks > 0 || self.kinks * 10 > self.checked() {
            return f64::INFINITY;
        }
        relative_error(&self.analytic, &self.numeric)
    }
}

/// Picks at most `limit` coordinates out of `n`, all of them when `n` is small.
pub fn coordinates(n: usize, limit: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > limit {
        rng.shuffle(&mut idx);
        idx.truncate(limit);
    }
    idx
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'a;

/// Checks every input of an op against central differences. The op output is
/// contracted with a fixed random tensor so any output shape works.
pub fn check_op(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let probe_rng = &mut RngStream::derive(seed, &[0xFD]);
    let eval = |values: &[Tensor], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(grads)))
            .collect();
        let out = build(&mut tape, &vars).unwrap();
        let shape = tape.value(out).shape().to_vec();
        let weights = random_tensor(&shape, &mut RngStream::derive(seed, &[0xC0]));
        let w = tape.constant(weights);
        let prod = tape.mul(out, w).unwrap();
        let total = tape.reduce(prod, ReduceKind::Sum, None).unwrap();
        let value = tape.value(total).data()[0];
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(total).unwrap();
        (
            value,
            vars.iter()
                .map(|&v| tape.grad(v).unwrap().to_vec())
                .collect(),
        )
    };
    let (_, analytic) = eval(inputs, true);
    let mut check = FdCheck::default();
    for (k, input) in inputs.iter().enumerate() {
        let f = |x: &[f64]| {
            let mut values = inputs.to_vec();
            values[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            eval(&values, false).0
        };
        for i in coordinates(input.numel(), 64, probe_rng) {
            check.probe(analytic[k][i], input.data(), i, &f);
        }
    }
    check.error()
}

/// Relative FD error of every differentiable op for one seed, by op name.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let rng = &mut RngStream::derive(seed, &[0x0A]);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, build: &Build<'_>| {
        out.push((name, check_op(&inputs, build, seed)));
    };

    let x = random_tensor(&[2, 6, 6], rng);
    let k = random_tensor(&[3, 2, 3, 3], rng);
    let b = random_tensor(&[3], rng);
    run("conv2d", vec![x.clone(), k.clone(), b.clone()], &|t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 1)
    });
    let x7 = random_tensor(&[2, 7, 7], rng);
    run("conv2d_stride2", vec![x7, k, b], &|t, v| {
        t.conv2d(v[0], v[1], v[2], 2, 0)
    });
    let k1 = random_tensor(&[1, 2, 1, 1], rng);
    let b1 = random_tensor(&[1], rng);
    run("conv2d_1x1", vec![x.clone(), k1, b1], &|t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 0)
    });
    run("max_pool2d", vec![x.clone()], &|t, v| t.max_pool2d(v[0]));
    run("upsample2d", vec![x.clone()], &|t, v| {
        t.upsample2d_nearest(v[0])
    });
    run("relu", vec![x.clone()], &|t, v| t.relu(v[0]));
    run("sigmoid", vec![x.clone()], &|t, v| t.sigmoid(v[0]));
    let y = random_tensor(&[3, 6, 6], rng);
    run("concat", vec![x.clone(), y], &|t, v| {
        t.concat_channels(v[0], v[1])
    });
    run("reshape", vec![x.clone()], &|t, v| {
        t.reshape(v[0], &[12, 6])
    });
    run("flatten", vec![x.clone()], &|t, v| t.flatten(v[0]));
    let dropout_seed = seed;
    run("dropout", vec![x.clone()], &move |t, v| {
        t.dropout(v[0], 0.3, &mut RngStream::new(dropout_seed), true)
    });
    let region: Vec<bool> = (0..x.numel()).map(|i| i % 3 != 0).collect();
    run("reduce_sum_region", vec![x.clone()], &|t, v| {
        t.reduce(v[0], ReduceKind::Sum, Some(&region))
    });
    run("reduce_mean", vec![x.clone()], &|t, v| {
        t.reduce(v[0], ReduceKind::Mean, None)
    });
    let z = random_tensor(&[2, 6, 6], rng);
    run("add", vec![x.clone(), z.clone()], &|t, v| t.add(v[0], v[1]));
    run("mul", vec![x.clone(), z], &|t, v| t.mul(v[0], v[1]));
    run("scale", vec![x], &|t, v| t.scale(v[0], -1.7));

    let h = random_tensor(&[10], rng);
    let w = random_tensor(&[4, 10], rng);
    let bias = random_tensor(&[4], rng);
    run("dense", vec![h.clone(), w, bias], &|t, v| {
        t.dense(v[0], v[1], v[2])
    });
    run("softmax", vec![h.clone()], &|t, v| t.softmax(v[0]));

    let pred = random_unit(&[1, 6, 6], rng);
    let mask = Tensor::new(
        vec![1, 6, 6],
        (0..36).map(|_| f64::from(rng.uniform() < 0.4)).collect(),
    )
    .unwrap();
    run("dice_loss", vec![pred], &move |t, v| {
        dice_loss(t, v[0], &mask, 1.0).map_err(train_to_tensor)
    });
    let class = rng.int_inclusive(0, 9);
    run("cross_entropy", vec![h], &move |t, v| {
        let p = t.softmax(v[0])?;
        cross_entropy(t, p, class).map_err(train_to_tensor)
    });
    out
}

fn train_to_tensor(e: olens::TrainError) -> TensorError {
    match e {
        olens::TrainError::Tensor(e) => e,
        other => panic!("unexpected training error: {other}"),
    }
}

/// Loss of a network example: Dice for sigmoid outputs, cross-entropy otherwise.
enum NetLoss {
    Dice(Tensor),
    Class(usize),
}

fn net_loss(
    net: &Network,
    input: &Tensor,
    loss: &NetLoss,
    dropout_seed: u64,
    grads: bool,
) -> (f64, Option<(Vec<Vec<Vec<f64>>>, Vec<f64>)>) {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().with_requires_grad(grads));
    let trace = net
        .forward_on_tape(
            &mut tape,
            x,
            ForwardMode::Stochastic,
            &mut RngStream::new(dropout_seed),
            grads,
        )
        .unwrap();
    let l = match loss {
        NetLoss::Dice(mask) => dice_loss(&mut tape, trace.output, mask, 1.0).unwrap(),
        NetLoss::Class(c) => cross_entropy(&mut tape, trace.output, *c).unwrap(),
    };
    let value = tape.value(l).data()[0];
    if !grads {
        return (value, None);
    }
    tape.backward(l).unwrap();
    let params = trace
        .params
        .iter()
        .map(|ps| ps.iter().map(|&p| tape.grad(p).unwrap().to_vec()).collect())
        .collect();
    (value, Some((params, tape.grad(x).unwrap().to_vec())))
}

/// FD check of a whole network: sampled coordinates of every parameter tensor
/// and of the input, with dropout active under a fixed mask stream.
fn check_network(net: &Network, input: &Tensor, loss: &NetLoss, seed: u64) -> f64 {
    let rng = &mut RngStream::derive(seed, &[0xAE7]);
    let (_, grads) = net_loss(net, input, loss, seed, true);
    let (param_grads, input_grad) = grads.unwrap();
    let mut check = FdCheck::default();
    for (layer, tensors) in net.params().iter().enumerate() {
        for (ti, tensor) in tensors.iter().enumerate() {
            let f = |x: &[f64]| {
                let mut perturbed = net.clone();
                let mut ps = tensors.clone();
                ps[ti] = Tensor::new(tensor.shape().to_vec(), x.to_vec()).unwrap();
                perturbed.set_params(layer, ps).unwrap();
                net_loss(&perturbed, input, loss, seed, false).0
            };
            for i in coordinates(tensor.numel(), 6, rng) {
                check.probe(param_grads[layer][ti][i], tensor.data(), i, &f);
            }
        }
    }
    let f = |x: &[f64]| {
        net_loss(
            net,
            &Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap(),
            loss,
            seed,
            false,
        )
        .0
    };
    for i in coordinates(input.numel(), 32, rng) {
        check.probe(input_grad[i], input.data(), i, &f);
    }
    check.error()
}

/// FD errors of the tiny U-Net and classifier on 16×16 inputs for one seed.
pub fn network_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let rng = &mut RngStream::derive(seed, &[0x4E7]);
    let input = random_unit(&[1, 16, 16], rng);
    let unet = build_unet(2, 0.1, [1, 16, 16], seed).unwrap();
    let mask = Tensor::new(
        vec![1, 16, 16],
        (0..256).map(|_| f64::from(rng.uniform() < 0.3)).collect(),
    )
    .unwrap();
    let mut classifier = build_classifier(2, [1, 16, 16], 0.2, seed).unwrap();
    // Give the frozen convs nonzero biases so their gradients are exercised.
    for layer in 0..classifier.layers().len() {
        if let [w, b] = classifier.params()[layer].as_slice() {
            let b = random_tensor(b.shape(), rng).map(|v| 0.1 * v).unwrap();
            classifier.set_params(layer, vec![w.clone(), b]).unwrap();
        }
    }
    let class = rng.int_inclusive(0, 1);
    vec![
        (
            "unet_dice",
            check_network(&unet, &input, &NetLoss::Dice(mask), seed),
        ),
        (
            "classifier_ce",
            check_network(&classifier, &input, &NetLoss::Class(class), seed),
        ),
    ]
}

/// A small conv net with random nonzero biases and a raw two-logit head, so
/// the logit is genuinely nonlinear along any straight path.
pub fn nonlinear_probe(seed: u64) -> Network {
    use olens::network::{LayerKind, LayerSpec};
    let conv = |i, o| LayerKind::Conv {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let layers = vec![
        conv(1, 4),
        LayerKind::Relu,
        conv(4, 4),
        LayerKind::Relu,
        LayerKind::MaxPool,
        LayerKind::Flatten,
        LayerKind::Dense {
            inputs: 64,
            outputs: 2,
        },
    ];
    let mut net = Network::new(
        "probe",
        [1, 8, 8],
        layers.into_iter().map(LayerSpec::new).collect(),
        seed,
    )
    .unwrap();
    let rng = &mut RngStream::derive(seed, &[0xB1A5]);
    for layer in [0, 2, 6] {
        let w = net.params()[layer][0].clone();
        let b = random_tensor(net.params()[layer][1].shape(), rng)
            .map(|v| 0.3 * v)
            .unwrap();
        net.set_params(layer, vec![w, b]).unwrap();
    }
    net
}

/// IG residual and `|F(x) − F(x')|` for class 0 of a probe, zero baseline.
pub fn ig_residual(net: &Network, input: &Tensor, steps: usize) -> (f64, f64) {
    use olens::saliency::{integrated_gradients, target_score};
    use olens::SaliencyTarget;
    let target = SaliencyTarget::ClassScore(0);
    let baseline = Tensor::zeros(input.shape());
    let map = integrated_gradients(net, input, &baseline, &target, steps).unwrap();
    let delta =
        target_score(net, input, &target).unwrap() - target_score(net, &baseline, &target).unwrap();
    (map.completeness_residual.unwrap(), delta.abs())
}

/// Probe/input pairs whose score change is at least `min_delta`, drawn from a
/// fixed seed sequence; `count` of them.
pub fn nonlinear_cases(count: usize, min_delta: f64) -> Vec<(u64, Network, Tensor)> {
    let mut cases = Vec::new();
    for seed in 0..(20 * count as u64) {
        let net = nonlinear_probe(seed);
        let input = random_unit(&[1, 8, 8], &mut RngStream::derive(seed, &[0x1A]));
        if ig_residual(&net, &input, 1).1 >= min_delta {
            cases.push((seed, net, input));
            if cases.len() == count {
                break;
            }
        }
    }
    assert_eq!(
        cases.len(),
        count,
        "too few probes with a large score change"
    );
    cases
}

/// Max IG completeness residual on random linear probes for each step count.
pub fn linear_probe_residual(seed: u64, steps: usize) -> f64 {
    use olens::network::build_linear_probe;
    let rng = &mut RngStream::derive(seed, &[0x11EA]);
    let w = random_tensor(&[3, 64], rng);
    let b = random_tensor(&[3], rng);
    let net = build_linear_probe([1, 8, 8], w, b).unwrap();
    let input = random_tensor(&[1, 8, 8], rng);
    let baseline = random_tensor(&[1, 8, 8], rng);
    let target = olens::SaliencyTarget::ClassScore(rng.int_inclusive(0, 2));
    olens::saliency::integrated_gradients(&net, &input, &baseline, &target, steps)
        .unwrap()
        .completeness_residual
        .unwrap()
}

/// Largest variance-identity residual over `sets` random sample sets with
/// T drawn from [2, 64] and probabilities uniform on [0, 1].
pub fn identity_sweep(sets: usize, seed: u64) -> f64 {
    use olens::uncertainty::decompose_variance;
    use olens::McSampleSet;
    let rng = &mut RngStream::derive(seed, &[0x1DE7]);
    let mut worst: f64 = 0.0;
    for _ in 0..sets {
        let t = rng.int_inclusive(2, 64);
        let samples = (0..t)
            .map(|_| Tensor::new(vec![1, 4, 4], (0..16).map(|_| rng.uniform()).collect()).unwrap())
            .collect();
        let r = decompose_variance(&McSampleSet::new(samples, 0).unwrap());
        worst = worst.max(r.identity_residual());
    }
    worst
}

/// Running means of MC samples after 64, 1024 and 16384 draws on a fixed
/// dropout U-Net; returns the sup-norm errors of the first two against the last.
pub fn mc_convergence(master_seed: u64) -> (f64, f64) {
    use olens::uncertainty::mc_sample_one;
    use rayon::prelude::*;
    let net = build_unet(2, 0.3, [1, 16, 16], 17).unwrap();
    let input = random_unit(&[1, 16, 16], &mut RngStream::new(23));
    let partial = |range: std::ops::Range<usize>| -> Vec<f64> {
        let parts: Vec<Vec<f64>> = range
            .into_par_iter()
            .map(|t| {
                mc_sample_one(&net, &input, master_seed, t)
                    .unwrap()
                    .into_data()
            })
            .collect();
        let mut acc = vec![0.0; 256];
        for p in parts {
            acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        }
        acc
    };
    let s64 = partial(0..64);
    let s1024: Vec<f64> = s64
        .iter()
        .zip(partial(64..1024))
        .map(|(a, b)| a + b)
        .collect();
    let s16384: Vec<f64> = s1024
        .iter()
        .zip(partial(1024..16384))
        .map(|(a, b)| a + b)
        .collect();
    let sup = |s: &[f64], n: f64| {
        s.iter()
            .zip(&s16384)
            .map(|(a, b)| (a / n - b / 16384.0).abs())
            .fold(0.0, f64::max)
    };
    (sup(&s64, 64.0), sup(&s1024, 1024.0))
}
