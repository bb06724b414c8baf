mod support;

use olens::network::build_classifier;
use olens::uncertainty::{decompose_variance, mc_sample, uncertainty_for_classifier};
use olens::{McSampleSet, RngStream, Tensor};
use support::{identity_sweep, mc_convergence, random_unit};

#[test]
fn variance_identity_holds_on_random_sets() {
    let worst = identity_sweep(1000, 1);
    assert!(worst < 1e-12, "residual {worst:e}");
}

#[test]
fn classifier_decomposition_matches_per_class_scalar_oracle() {
    let rng = &mut RngStream::new(8);
    for _ in 0..50 {
        let t = rng.int_inclusive(2, 20);
        let k = rng.int_inclusive(2, 5);
        let samples: Vec<Tensor> = (0..t)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
                let total: f64 = raw.iter().sum();
                Tensor::vector(&raw.iter().map(|v| v / total).collect::<Vec<_>>()).unwrap()
            })
            .collect();
        let set = McSampleSet::new(samples.clone(), 0).unwrap();
        let r = uncertainty_for_classifier(&set).unwrap();
        for c in 0..k {
            let values: Vec<f64> = samples.iter().map(|s| s.data()[c]).collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let ale = values.iter().map(|v| v * (1.0 - v)).sum::<f64>() / n;
            assert!((r.mean.data()[c] - mean).abs() < 1e-12);
            assert!((r.epistemic.data()[c] - var).abs() < 1e-12);
            assert!((r.aleatoric.data()[c] - ale).abs() < 1e-12);
        }
    }
}

#[test]
fn classifier_mc_samples_stay_on_the_simplex() {
    let net = build_classifier(3, [1, 16, 16], 0.5, 2).unwrap();
    let x = random_unit(&[1, 16, 16], &mut RngStream::new(4));
    let set = mc_sample(&net, &x, 12, 9).unwrap();
    let r = uncertainty_for_classifier(&set).unwrap();
    assert!(r.identity_residual() < 1e-12);
    assert!(r.epistemic.data().iter().any(|&v| v > 0.0));
}

#[test]
fn mc_mean_converges() {
    for seed in 0..5 {
        let (coarse, fine) = mc_convergence(seed);
        assert!(fine < coarse, "seed {seed}: {fine:e} >= {coarse:e}");
    }
}

#[test]
fn unit_range_samples_decompose() {
    let set = McSampleSet::new(vec![Tensor::scalar(0.0), Tensor::scalar(1.0)], 0).unwrap();
    let r = decompose_variance(&set);
    assert_eq!(
        (
            r.mean.data()[0],
            r.epistemic.data()[0],
            r.aleatoric.data()[0]
        ),
        (0.5, 0.25, 0.0)
    );
}
