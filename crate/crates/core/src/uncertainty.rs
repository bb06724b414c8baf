//! Monte-Carlo dropout sampling and epistemic/aleatoric decomposition.

use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::colormap::Colormap;
use crate::data::pnm::{encode_pgm, encode_ppm, PnmError};
use crate::data::render::render_heatmap;
use crate::network::{ForwardMode, Network, NetworkError};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES: usize = 50;
/// Tolerance on simplex coordinates summing to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample {sample} value {value} outside [0,1]")]
    OutOfRange { sample: usize, value: f64 },
    #[error("sample {sample} is not a probability vector: {reason}")]
    NotSimplex { sample: usize, reason: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Image(#[from] PnmError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `T` stochastic predictions for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct McSampleSet {
    samples: Vec<Tensor>,
    master_seed: u64,
}

impl McSampleSet {
    pub fn new(samples: Vec<Tensor>, master_seed: u64) -> Result<Self, UncertaintyError> {
        if samples.len() < 2 {
            return Err(UncertaintyError::TooFewSamples(samples.len()));
        }
        let shape = samples[0].shape();
        for (t, s) in samples.iter().enumerate() {
            if s.shape() != shape {
                return Err(UncertaintyError::ShapeMismatch(format!(
                    "sample {t} has shape {:?}, sample 0 has {shape:?}",
                    s.shape()
                )));
            }
            // endpoints are allowed: a saturated sigmoid legitimately returns 0 or 1
            if let Some(&value) = s.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(UncertaintyError::OutOfRange { sample: t, value });
            }
        }
        Ok(Self {
            samples,
            master_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn shape(&self) -> &[usize] {
        self.samples[0].shape()
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }
}

/// Stochastic forward pass number `t`, drawn from `substream(master_seed, t)`.
pub fn mc_sample_one(
    net: &Network,
    input: &Tensor,
    master_seed: u64,
    t: usize,
) -> Result<Tensor, NetworkError> {
    let mut rng = RngStream::substream(master_seed, t as u64);
    net.forward(input, ForwardMode::Stochastic, &mut rng)
}

/// Draws `t_samples` predictions in parallel. Each sample depends only on its
/// index, so the result is independent of scheduling.
pub fn mc_sample(
    net: &Network,
    input: &Tensor,
    t_samples: usize,
    master_seed: u64,
) -> Result<McSampleSet, UncertaintyError> {
    if t_samples < 2 {
        return Err(UncertaintyError::TooFewSamples(t_samples));
    }
    let samples = (0..t_samples)
        .into_par_iter()
        .map(|t| mc_sample_one(net, input, master_seed, t))
        .collect::<Result<Vec<_>, _>>()?;
    McSampleSet::new(samples, master_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Decomposition {
    #[default]
    Variance,
    Entropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyResult {
    pub mean: Tensor,
    pub epistemic: Tensor,
    pub aleatoric: Tensor,
    pub decomposition: Decomposition,
    pub samples: usize,
}

impl UncertaintyResult {
    /// Largest elementwise deviation from the decomposition's total:
    /// `p(1-p)` for variance, `H(p)` for entropy.
    pub fn identity_residual(&self) -> f64 {
        let total: fn(f64) -> f64 = match self.decomposition {
            Decomposition::Variance => |p| p * (1.0 - p),
            Decomposition::Entropy => binary_entropy,
        };
        self.mean
            .data()
            .iter()
            .zip(self.epistemic.data())
            .zip(self.aleatoric.data())
            .map(|((&p, &e), &a)| (e + a - total(p)).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-element mean computed as a shift from the first sample, so identical
/// samples give their common value exactly.
fn mean_of(set: &McSampleSet) -> Vec<f64> {
    let t = set.len() as f64;
    let first = set.samples[0].data();
    let mut acc = vec![0.0; first.len()];
    for s in &set.samples[1..] {
        for ((a, &v), &f) in acc.iter_mut().zip(s.data()).zip(first) {
            *a += v - f;
        }
    }
    first.iter().zip(&acc).map(|(&f, &a)| f + a / t).collect()
}

fn build(
    set: &McSampleSet,
    mean: Vec<f64>,
    epistemic: Vec<f64>,
    aleatoric: Vec<f64>,
    kind: Decomposition,
) -> UncertaintyResult {
    let shape = set.shape().to_vec();
    UncertaintyResult {
        mean: Tensor::from_parts(shape.clone(), mean),
        epistemic: Tensor::from_parts(shape.clone(), epistemic),
        aleatoric: Tensor::from_parts(shape, aleatoric),
        decomposition: kind,
        samples: set.len(),
    }
}

/// Population variance of the samples (epistemic) and mean Bernoulli variance
/// (aleatoric); they sum to `p(1-p)` of the mean.
pub fn decompose_variance(set: &McSampleSet) -> UncertaintyResult {
    let t = set.len() as f64;
    let mean = mean_of(set);
    let mut epistemic = vec![0.0; mean.len()];
    let mut aleatoric = vec![0.0; mean.len()];
    for s in &set.samples {
        for (i, &p) in s.data().iter().enumerate() {
            let d = p - mean[i];
            epistemic[i] += d * d;
            aleatoric[i] += p * (1.0 - p);
        }
    }
    epistemic.iter_mut().for_each(|v| *v /= t);
    aleatoric.iter_mut().for_each(|v| *v /= t);
    build(set, mean, epistemic, aleatoric, Decomposition::Variance)
}

/// Binary entropy in nats, with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

/// Total entropy of the mean split into expected entropy (aleatoric) and
/// mutual information (epistemic, clamped at zero).
pub fn decompose_entropy(set: &McSampleSet) -> UncertaintyResult {
    let t = set.len() as f64;
    let mean = mean_of(set);
    let mut aleatoric = vec![0.0; mean.len()];
    for s in &set.samples {
        for (a, &p) in aleatoric.iter_mut().zip(s.data()) {
            *a += binary_entropy(p);
        }
    }
    aleatoric.iter_mut().for_each(|v| *v /= t);
    let epistemic = mean
        .iter()
        .zip(&aleatoric)
        .map(|(&p, &a)| (binary_entropy(p) - a).max(0.0))
        .collect();
    build(set, mean, epistemic, aleatoric, Decomposition::Entropy)
}

pub fn decompose(set: &McSampleSet, kind: Decomposition) -> UncertaintyResult {
    match kind {
        Decomposition::Variance => decompose_variance(set),
        Decomposition::Entropy => decompose_entropy(set),
    }
}

/// Coordinatewise variance decomposition over class-probability samples.
pub fn uncertainty_for_classifier(
    set: &McSampleSet,
) -> Result<UncertaintyResult, UncertaintyError> {
    for (t, s) in set.samples.iter().enumerate() {
        if s.shape().len() != 1 {
            return Err(UncertaintyError::NotSimplex {
                sample: t,
                reason: format!("expected a vector, got shape {:?}", s.shape()),
            });
        }
        let sum: f64 = s.data().iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(UncertaintyError::NotSimplex {
                sample: t,
                reason: format!("coordinates sum to {sum}"),
            });
        }
    }
    Ok(decompose_variance(set))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl MapStats {
    pub fn of(t: &Tensor) -> Self {
        Self {
            min: t.min_value(),
            max: t.max_value(),
            mean: t.mean_value(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStats {
    #[serde(rename = "T")]
    pub samples: usize,
    pub decomposition: Decomposition,
    pub seed: u64,
    pub identity_residual: f64,
    pub mean: MapStats,
    pub epistemic: MapStats,
    pub aleatoric: MapStats,
}

impl UncertaintyStats {
    pub fn new(result: &UncertaintyResult, seed: u64) -> Self {
        Self {
            samples: result.samples,
            decomposition: result.decomposition,
            seed,
            identity_residual: result.identity_residual(),
            mean: MapStats::of(&result.mean),
            epistemic: MapStats::of(&result.epistemic),
            aleatoric: MapStats::of(&result.aleatoric),
        }
    }
}

/// Largest value an uncertainty map can take: 1/4 for variances, `ln 2` for entropies.
pub fn map_ceiling(kind: Decomposition) -> f64 {
    match kind {
        Decomposition::Variance => 0.25,
        Decomposition::Entropy => std::f64::consts::LN_2,
    }
}

/// Uncertainty map scaled by its theoretical ceiling into `[0,1]`.
pub fn display_map(map: &Tensor, kind: Decomposition) -> Tensor {
    let c = map_ceiling(kind);
    map.map(|v| (v / c).clamp(0.0, 1.0))
        .expect("clamped values are finite")
}

/// The epistemic map as an RGB heatmap.
pub fn epistemic_heatmap(result: &UncertaintyResult) -> Tensor {
    render_heatmap(
        &display_map(&result.epistemic, result.decomposition),
        Colormap::InfernoLike,
    )
    .expect("display map is unit range and single-channel")
}

/// Writes `mean.pgm`, `epistemic.pgm`, `aleatoric.pgm`, `epistemic.ppm` and
/// `stats.json`. Image files are only written for `[1,H,W]` maps.
pub fn write_result_dir(
    dir: &Path,
    result: &UncertaintyResult,
    seed: u64,
) -> Result<UncertaintyStats, UncertaintyError> {
    let stats = UncertaintyStats::new(result, seed);
    if let [1, _, _] = *result.mean.shape() {
        let kind = result.decomposition;
        fs::write(dir.join("mean.pgm"), encode_pgm(&result.mean)?)?;
        fs::write(
            dir.join("epistemic.pgm"),
            encode_pgm(&display_map(&result.epistemic, kind))?,
        )?;
        fs::write(
            dir.join("aleatoric.pgm"),
            encode_pgm(&display_map(&result.aleatoric, kind))?,
        )?;
        fs::write(
            dir.join("epistemic.ppm"),
            encode_ppm(&epistemic_heatmap(result))?,
        )?;
    }
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    fs::write(dir.join("stats.json"), json + "\n")?;
    Ok(stats)
}
