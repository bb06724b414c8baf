//! Gradient attributions: vanilla gradients, guided backpropagation,
//! integrated gradients and SmoothGrad averaging.
//!
//! Every method is a pure observer: it takes the network and input by shared
//! reference and records its own private tapes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ReduceKind, ReluBackwardMode, Tape};
use crate::network::{ForwardMode, Network, NetworkError, OutputKind};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_IG_STEPS: usize = 64;
pub const DEFAULT_N_NOISE: usize = 25;
pub const DEFAULT_SIGMA: f64 = 0.15;
pub const DEFAULT_DISPLAY_PERCENTILE: f64 = 99.0;
/// Probability threshold defining the automatic foreground region.
pub const AUTO_REGION_THRESHOLD: f64 = 0.5;
pub const GRID_MAGIC: &[u8; 8] = b"OLSAL\0v1";

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("invalid target: {0}")]
    BadTarget(String),
    #[error("invalid baseline: {0}")]
    BadBaseline(String),
    #[error("integration steps must be at least 1, got {0}")]
    BadSteps(usize),
    #[error("invalid SmoothGrad parameters: {0}")]
    BadNoise(String),
    #[error("percentile must lie in (50, 100], got {0}")]
    BadPercentile(f64),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("not a saliency grid (bad magic)")]
    BadMagic,
    #[error("grid truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("grid contains non-finite values")]
    NonFinite,
}

/// The scalar whose input gradient is attributed.
#[derive(Debug, Clone, PartialEq)]
pub enum SaliencyTarget {
    /// Pre-softmax logit of one class.
    ClassScore(usize),
    /// Sum of pre-sigmoid logits over a mask of the output.
    RegionSum(Vec<bool>),
}

impl SaliencyTarget {
    /// Checks the target against the network's output.
    pub fn validate(&self, net: &Network) -> Result<(), SaliencyError> {
        let out_len: usize = net.output_shape().iter().product();
        match (self, net.output_kind()) {
            (SaliencyTarget::ClassScore(_), OutputKind::Segmentation) => Err(
                SaliencyError::BadTarget("class score on a segmentation network".into()),
            ),
            (SaliencyTarget::ClassScore(k), _) if *k >= out_len => Err(SaliencyError::BadTarget(
                format!("class {k} out of range for {out_len} outputs"),
            )),
            (SaliencyTarget::RegionSum(_), OutputKind::Classification { .. }) => Err(
                SaliencyError::BadTarget("region sum on a classification network".into()),
            ),
            (SaliencyTarget::RegionSum(m), _) if m.len() != out_len => {
                Err(SaliencyError::BadTarget(format!(
                    "region mask has {} elements, output has {out_len}",
                    m.len()
                )))
            }
            (SaliencyTarget::RegionSum(m), _) if !m.iter().any(|&b| b) => {
                Err(SaliencyError::BadTarget("region mask is empty".into()))
            }
            _ => Ok(()),
        }
    }

    fn mask(&self, out_len: usize) -> Vec<bool> {
        match self {
            SaliencyTarget::ClassScore(k) => (0..out_len).map(|i| i == *k).collect(),
            SaliencyTarget::RegionSum(m) => m.clone(),
        }
    }
}

/// The predicted foreground region at [`AUTO_REGION_THRESHOLD`]. When nothing
/// is predicted the whole output is used and the flag is set.
pub fn auto_region(net: &Network, input: &Tensor) -> Result<(SaliencyTarget, bool), SaliencyError> {
    let out = net.forward(input, ForwardMode::Deterministic, &mut RngStream::new(0))?;
    let mask: Vec<bool> = out
        .data()
        .iter()
        .map(|&p| p >= AUTO_REGION_THRESHOLD)
        .collect();
    if mask.iter().any(|&b| b) {
        Ok((SaliencyTarget::RegionSum(mask), false))
    } else {
        Ok((SaliencyTarget::RegionSum(vec![true; mask.len()]), true))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Guided,
    Integrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    #[default]
    Zero,
    Gray,
}

impl BaselineKind {
    pub fn tensor(self, shape: &[usize]) -> Tensor {
        match self {
            BaselineKind::Zero => Tensor::zeros(shape),
            BaselineKind::Gray => Tensor::filled(shape, 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SaliencyParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ig_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_kind: Option<BaselineKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_noise: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `[H,W]`, signed.
    pub attributions: Tensor,
    pub method: Method,
    pub smoothed: bool,
    pub params: SaliencyParams,
    /// `|sum IG - (F(x) - F(x'))|`; for smoothed IG, the mean over perturbations.
    pub completeness_residual: Option<f64>,
}

/// Target score and its input gradient `[C,H,W]` under a deterministic pass.
pub fn score_and_gradient(
    net: &Network,
    input: &Tensor,
    target: &SaliencyTarget,
    relu_mode: ReluBackwardMode,
) -> Result<(f64, Vec<f64>), SaliencyError> {
    let mut tape = Tape::new();
    tape.set_relu_mode(relu_mode);
    let x = tape.leaf(input.clone().with_requires_grad(true));
    let trace = net.forward_on_tape(
        &mut tape,
        x,
        ForwardMode::Deterministic,
        &mut RngStream::new(0),
        false,
    )?;
    let out_len = tape.value(trace.logits).numel();
    let mask = target.mask(out_len);
    let score = tape.reduce(trace.logits, ReduceKind::Sum, Some(&mask))?;
    tape.backward(score)?;
    let value = tape.value(score).data()[0];
    let grad = tape.grad(x).expect("input requires grad").to_vec();
    Ok((value, grad))
}

/// The target score without gradients.
pub fn target_score(
    net: &Network,
    input: &Tensor,
    target: &SaliencyTarget,
) -> Result<f64, SaliencyError> {
    let (_, logits) =
        net.forward_with_logits(input, ForwardMode::Deterministic, &mut RngStream::new(0))?;
    let mask = target.mask(logits.numel());
    Ok(logits
        .data()
        .iter()
        .zip(&mask)
        .filter(|(_, &b)| b)
        .map(|(v, _)| v)
        .sum())
}

fn spatial(input: &Tensor) -> Result<(usize, usize, usize), SaliencyError> {
    match *input.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::ShapeMismatch(format!(
            "expected [C,H,W] input, got {:?}",
            input.shape()
        ))
        .into()),
    }
}

fn channel_max_abs(grad: &[f64], (c, h, w): (usize, usize, usize)) -> Tensor {
    let plane = h * w;
    let data = (0..plane)
        .map(|i| {
            (0..c)
                .map(|ch| grad[ch * plane + i].abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Tensor::from_parts(vec![h, w], data)
}

fn gradient_map(
    net: &Network,
    input: &Tensor,
    target: &SaliencyTarget,
    mode: ReluBackwardMode,
    method: Method,
) -> Result<SaliencyMap, SaliencyError> {
    target.validate(net)?;
    let dims = spatial(input)?;
    let (_, grad) = score_and_gradient(net, input, target, mode)?;
    Ok(SaliencyMap {
        attributions: channel_max_abs(&grad, dims),
        method,
        smoothed: false,
        params: SaliencyParams::default(),
        completeness_residual: None,
    })
}

/// `max_c |dF/dx|`.
pub fn vanilla_gradient(
    net: &Network,
    input: &Tensor,
    target: &SaliencyTarget,
) -> Result<SaliencyMap, SaliencyError> {
    gradient_map(
        net,
        input,
        target,
        ReluBackwardMode::Standard,
        Method::Vanilla,
    )
}

/// As [`vanilla_gradient`], with relus also blocking negative upstream gradients.
pub fn guided_backprop(
    net: &Network,
    input: &Tensor,
    target: &SaliencyTarget,
) -> Result<SaliencyMap, SaliencyError> {
    gradient_map(net, input, target, ReluBackwardMode::Guided, Method::Guided)
}

/// Right-endpoint Riemann approximation of the path integral from `baseline`
/// to `input`, channel-summed. Steps are evaluated in parallel and reduced in
/// step order.
pub fn integrated_gradients(
    net: &Network,
    input: &Tensor,
    baseline: &Tensor,
    target: &SaliencyTarget,
    steps: usize,
) -> Result<SaliencyMap, SaliencyError> {
    target.validate(net)?;
    if steps == 0 {
        return Err(SaliencyError::BadSteps(steps));
    }
    if baseline.shape() != input.shape() {
        return Err(SaliencyError::BadBaseline(format!(
            "baseline shape {:?} differs from input {:?}",
            baseline.shape(),
            input.shape()
        )));
    }
    let (c, h, w) = spatial(input)?;
    let x = input.data();
    let x0 = baseline.data();
    let grads = (1..=steps)
        .into_par_iter()
        .map(|k| {
            let alpha = k as f64 / steps as f64;
            let point = x
                .iter()
                .zip(x0)
                .map(|(&xi, &bi)| bi + alpha * (xi - bi))
                .collect();
            let point = Tensor::new(input.shape().to_vec(), point)?;
            score_and_gradient(net, &point, target, ReluBackwardMode::Standard).map(|(_, g)| g)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut avg = vec![0.0; x.len()];
    for g in &grads {
        for (a, v) in avg.iter_mut().zip(g) {
            *a += v;
        }
    }
    let ig: Vec<f64> = avg
        .iter()
        .zip(x.iter().zip(x0))
        .map(|(a, (&xi, &bi))| (xi - bi) * (a / steps as f64))
        .collect();
    let plane = h * w;
    let map: Vec<f64> = (0..plane)
        .map(|i| (0..c).map(|ch| ig[ch * plane + i]).sum())
        .collect();
    let delta = target_score(net, input, target)? - target_score(net, baseline, target)?;
    let residual = (ig.iter().sum::<f64>() - delta).abs();
    Ok(SaliencyMap {
        attributions: Tensor::from_parts(vec![h, w], map),
        method: Method::Integrated,
        smoothed: false,
        params: SaliencyParams {
            ig_steps: Some(steps),
            ..SaliencyParams::default()
        },
        completeness_residual: Some(residual),
    })
}

/// Method selection plus the IG-only settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub ig_steps: usize,
    pub baseline: BaselineKind,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ig_steps: DEFAULT_IG_STEPS,
            baseline: BaselineKind::Zero,
        }
    }
}

/// Runs one base method.
pub fn explain(
    net: &Network,
    input: &Tensor,
    target: &SaliencyTarget,
    config: MethodConfig,
) -> Result<SaliencyMap, SaliencyError> {
    match config.method {
        Method::Vanilla => vanilla_gradient(net, input, target),
        Method::Guided => guided_backprop(net, input, target),
        Method::Integrated => {
            let mut map = integrated_gradients(
                net,
                input,
                &config.baseline.tensor(input.shape()),
                target,
                config.ig_steps,
            )?;
            map.params.baseline_kind = Some(config.baseline);
            Ok(map)
        }
    }
}

/// Mean of the base method over `n` inputs perturbed with Gaussian noise of
/// std `sigma * (max(x) - min(x))`; perturbation `j` uses `substream(seed, j)`.
/// With `sigma == 0` the base map is returned unchanged.
pub fn smoothgrad(
    net: &Network,
    input: &Tensor,
    target: &SaliencyTarget,
    config: MethodConfig,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<SaliencyMap, SaliencyError> {
    if n == 0 {
        return Err(SaliencyError::BadNoise("n must be at least 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SaliencyError::BadNoise(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    let params = |mut p: SaliencyParams| {
        p.noise_sigma = Some(sigma);
        p.n_noise = Some(n);
        p
    };
    if sigma == 0.0 {
        let mut map = explain(net, input, target, config)?;
        map.smoothed = true;
        map.params = params(map.params);
        return Ok(map);
    }
    target.validate(net)?;
    let std = sigma * (input.max_value() - input.min_value());
    let maps = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = RngStream::substream(seed, j as u64);
            let data = input
                .data()
                .iter()
                .map(|v| v + std * rng.normal())
                .collect();
            let noisy = Tensor::new(input.shape().to_vec(), data)?;
            explain(net, &noisy, target, config)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let first = &maps[0];
    let mut acc = vec![0.0; first.attributions.numel()];
    for m in &maps {
        for (a, v) in acc.iter_mut().zip(m.attributions.data()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    let residual = first.completeness_residual.map(|_| {
        maps.iter()
            .filter_map(|m| m.completeness_residual)
            .sum::<f64>()
            / n as f64
    });
    Ok(SaliencyMap {
        attributions: Tensor::from_parts(first.attributions.shape().to_vec(), acc),
        method: first.method,
        smoothed: true,
        params: params(first.params),
        completeness_residual: residual,
    })
}

/// Linearly interpolated percentile of `values` (sorted copy), `pct` in `[0,100]`.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `|a|` clipped at its `pct`-th percentile and scaled into `[0,1]`.
pub fn normalize_for_display(map: &Tensor, pct: f64) -> Result<Tensor, SaliencyError> {
    if !(pct > 50.0 && pct <= 100.0) {
        return Err(SaliencyError::BadPercentile(pct));
    }
    let abs: Vec<f64> = map.data().iter().map(|v| v.abs()).collect();
    let mut ceiling = percentile(&abs, pct);
    if ceiling == 0.0 {
        // mass concentrated in a few pixels: fall back to the maximum
        ceiling = abs.iter().copied().fold(0.0, f64::max);
    }
    let data = if ceiling == 0.0 {
        vec![0.0; abs.len()]
    } else {
        abs.iter().map(|&v| (v / ceiling).min(1.0)).collect()
    };
    Ok(Tensor::from_parts(map.shape().to_vec(), data))
}

/// Share of total `|attribution|` falling inside `region`; 0 for an all-zero map.
pub fn mass_fraction(map: &Tensor, region: &[bool]) -> f64 {
    let total: f64 = map.data().iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = map
        .data()
        .iter()
        .zip(region)
        .filter(|(_, &b)| b)
        .map(|(v, _)| v.abs())
        .sum();
    inside / total
}

/// Serializes an `[H,W]` map as magic, `u32` H, `u32` W, then `f64` values, all little-endian.
pub fn encode_grid(map: &Tensor) -> Vec<u8> {
    let (h, w) = match *map.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => (1, map.numel()),
    };
    let mut out = Vec::with_capacity(16 + 8 * map.numel());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Tensor, GridError> {
    if bytes.len() < 16 || &bytes[..8] != GRID_MAGIC {
        return Err(GridError::BadMagic);
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + 8 * h * w;
    if bytes.len() != expected {
        return Err(GridError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![h, w], data).map_err(|_| GridError::NonFinite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_linear_probe, LayerKind, LayerSpec};

    fn probe(weights: &[f64], shape: [usize; 3]) -> Network {
        build_linear_probe(
            shape,
            Tensor::new(vec![1, weights.len()], weights.to_vec()).unwrap(),
            Tensor::vector(&[0.25]).unwrap(),
        )
        .unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn vanilla_on_linear_is_abs_weights() {
        let w = [0.5, -2.0, 0.0, 3.0];
        let net = probe(&w, [1, 2, 2]);
        for seed in 0..3 {
            let m = vanilla_gradient(
                &net,
                &random(&[1, 2, 2], seed),
                &SaliencyTarget::ClassScore(0),
            )
            .unwrap();
            assert_eq!(m.attributions.data(), &[0.5, 2.0, 0.0, 3.0]);
            assert_eq!(m.attributions.shape(), &[2, 2]);
        }
    }

    #[test]
    fn ig_linear_example() {
        let net = probe(&[3.0, 5.0], [1, 1, 2]);
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        for m in [1, 8, 64] {
            let map = integrated_gradients(
                &net,
                &x,
                &Tensor::zeros(&[1, 1, 2]),
                &SaliencyTarget::ClassScore(0),
                m,
            )
            .unwrap();
            assert_eq!(map.attributions.data(), &[3.0, 10.0]);
            assert!(map.completeness_residual.unwrap() <= 1e-12);
        }
        let same = integrated_gradients(&net, &x, &x, &SaliencyTarget::ClassScore(0), 4).unwrap();
        assert!(same.attributions.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ig_argument_errors() {
        let net = probe(&[1.0, 1.0], [1, 1, 2]);
        let x = Tensor::zeros(&[1, 1, 2]);
        let t = SaliencyTarget::ClassScore(0);
        assert!(matches!(
            integrated_gradients(&net, &x, &x, &t, 0),
            Err(SaliencyError::BadSteps(0))
        ));
        assert!(matches!(
            integrated_gradients(&net, &x, &Tensor::zeros(&[1, 2, 1]), &t, 1),
            Err(SaliencyError::BadBaseline(_))
        ));
        assert!(matches!(
            vanilla_gradient(&net, &x, &SaliencyTarget::ClassScore(1)),
            Err(SaliencyError::BadTarget(_))
        ));
        assert!(matches!(
            vanilla_gradient(&net, &x, &SaliencyTarget::RegionSum(vec![false])),
            Err(SaliencyError::BadTarget(_))
        ));
    }

    #[test]
    fn guided_matches_vanilla_without_relu() {
        let net = probe(&[0.3, -0.7, 1.1, -0.2], [1, 2, 2]);
        let x = random(&[1, 2, 2], 4);
        let t = SaliencyTarget::ClassScore(0);
        let v = vanilla_gradient(&net, &x, &t).unwrap();
        let g = guided_backprop(&net, &x, &t).unwrap();
        assert_eq!(v.attributions, g.attributions);
    }

    fn relu_net() -> Network {
        // x -> dense(1->1, w=1) -> relu -> dense(1->1, w=-1)
        let layers = vec![
            LayerSpec::new(LayerKind::Flatten),
            LayerSpec::new(LayerKind::Dense {
                inputs: 1,
                outputs: 1,
            }),
            LayerSpec::new(LayerKind::Relu),
            LayerSpec::new(LayerKind::Dense {
                inputs: 1,
                outputs: 1,
            }),
        ];
        let mut net = Network::new("test", [1, 1, 1], layers, 0).unwrap();
        net.set_params(
            1,
            vec![
                Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
                Tensor::vector(&[0.0]).unwrap(),
            ],
        )
        .unwrap();
        net.set_params(
            3,
            vec![
                Tensor::new(vec![1, 1], vec![-1.0]).unwrap(),
                Tensor::vector(&[0.0]).unwrap(),
            ],
        )
        .unwrap();
        net
    }

    #[test]
    fn guided_blocks_negative_upstream() {
        let net = relu_net();
        let x = Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap();
        let t = SaliencyTarget::ClassScore(0);
        assert_eq!(
            vanilla_gradient(&net, &x, &t).unwrap().attributions.data(),
            &[1.0]
        );
        assert_eq!(
            guided_backprop(&net, &x, &t).unwrap().attributions.data(),
            &[0.0]
        );
    }

    #[test]
    fn smoothgrad_sigma_zero_is_base() {
        let net = relu_net();
        let x = Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap();
        let t = SaliencyTarget::ClassScore(0);
        for method in [Method::Vanilla, Method::Guided, Method::Integrated] {
            let cfg = MethodConfig::new(method);
            let base = explain(&net, &x, &t, cfg).unwrap();
            let s = smoothgrad(&net, &x, &t, cfg, 7, 0.0, 3).unwrap();
            assert_eq!(
                encode_grid(&base.attributions),
                encode_grid(&s.attributions)
            );
            assert!(s.smoothed);
        }
    }

    #[test]
    fn smoothgrad_single_sample_is_base_on_perturbed_input() {
        let net = probe(&[0.3, -0.7, 1.1, -0.2], [1, 2, 2]);
        let x = random(&[1, 2, 2], 8);
        let t = SaliencyTarget::ClassScore(0);
        let cfg = MethodConfig::new(Method::Integrated);
        let s = smoothgrad(&net, &x, &t, cfg, 1, 0.2, 11).unwrap();
        let std = 0.2 * (x.max_value() - x.min_value());
        let mut rng = RngStream::substream(11, 0);
        let noisy = Tensor::new(
            vec![1, 2, 2],
            x.data().iter().map(|v| v + std * rng.normal()).collect(),
        )
        .unwrap();
        assert_eq!(
            s.attributions,
            explain(&net, &noisy, &t, cfg).unwrap().attributions
        );
    }

    #[test]
    fn percentile_display() {
        let zeros = Tensor::zeros(&[3, 3]);
        assert_eq!(normalize_for_display(&zeros, 99.0).unwrap(), zeros);
        let unit = Tensor::new(vec![1, 4], vec![0.0, 0.3, 0.7, 1.0]).unwrap();
        assert_eq!(normalize_for_display(&unit, 100.0).unwrap(), unit);
        let ramp = Tensor::new(vec![100], (0..100).map(f64::from).collect()).unwrap();
        let out = normalize_for_display(&ramp, 99.0).unwrap();
        // 99th percentile of 0..=99 interpolates to 98.01
        let p = percentile(ramp.data(), 99.0);
        assert!((p - 98.01).abs() < 1e-12);
        for (v, o) in ramp.data().iter().zip(out.data()) {
            if *v >= p {
                assert_eq!(*o, 1.0);
            } else {
                assert!(*o < 1.0);
            }
        }
        assert!(matches!(
            normalize_for_display(&ramp, 50.0),
            Err(SaliencyError::BadPercentile(_))
        ));
    }

    #[test]
    fn grid_round_trip_and_errors() {
        let t = random(&[3, 5], 2);
        let bytes = encode_grid(&t);
        assert_eq!(&bytes[..8], b"OLSAL\0v1");
        assert_eq!(bytes.len(), 16 + 8 * 15);
        assert_eq!(decode_grid(&bytes).unwrap(), t);
        assert_eq!(
            decode_grid(&bytes[..20]),
            Err(GridError::Truncated {
                expected: 136,
                actual: 20
            })
        );
        assert_eq!(
            decode_grid(b"OLSAL\0v2\0\0\0\0\0\0\0\0"),
            Err(GridError::BadMagic)
        );
    }

    #[test]
    fn methods_do_not_mutate() {
        let net = relu_net();
        let x = Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap();
        let (net0, x0) = (net.clone(), x.clone());
        let t = SaliencyTarget::ClassScore(0);
        for method in [Method::Vanilla, Method::Guided, Method::Integrated] {
            smoothgrad(&net, &x, &t, MethodConfig::new(method), 3, 0.1, 0).unwrap();
        }
        assert_eq!(net, net0);
        assert_eq!(x, x0);
    }

    #[test]
    fn mass_fraction_basic() {
        let t = Tensor::new(vec![2, 2], vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(mass_fraction(&t, &[true, false, false, false]), 0.25);
        assert_eq!(mass_fraction(&Tensor::zeros(&[2, 2]), &[true; 4]), 0.0);
    }
}
