//! Command-line flags and the optional JSON settings file.
//!
//! Every setting resolves as: built-in default, overridden by the `--config`
//! file, overridden by an explicit flag. The file is a flat JSON object whose
//! keys are the flag names in snake_case; unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "olens",
    version,
    about = "Train small CNNs and inspect them with MC-dropout uncertainty and saliency maps"
)]
pub struct Cli {
    /// JSON settings file; keys are flag names in snake_case. Flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a network on a dataset directory and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Monte-Carlo dropout mean, epistemic and aleatoric maps for one image.
    Uncertainty(UncertaintyArgs),
    /// Saliency map for one image.
    Explain(ExplainArgs),
    /// Composite panel: input, prediction, uncertainty and saliency maps side by side.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vessels,
    Lesions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Binary,
    Quadrant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decomp {
    Variance,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Vanilla,
    Guided,
    Ig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Zero,
    Gray,
}

/// `class:K` or `region:auto`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSpec {
    Class(usize),
    RegionAuto,
}

impl FromStr for TargetSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("class", k)) => k
                .parse()
                .map(TargetSpec::Class)
                .map_err(|_| format!("invalid class index in target `{s}`")),
            Some(("region", "auto")) => Ok(TargetSpec::RegionAuto),
            _ => Err(format!(
                "target must be `class:K` or `region:auto`, got `{s}`"
            )),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Which generator to run.
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Number of images [default: 200].
    #[arg(long)]
    pub n: Option<usize>,
    /// Image side in pixels; at least 32 and divisible by 4 (vessels) or 8 (lesions) [default: 64].
    #[arg(long)]
    pub size: Option<usize>,
    /// Lesion labelling: presence (binary) or lesion quadrant [default: binary].
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Dataset seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Task the dataset must have been generated for.
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training epochs [default: 30 for vessels, 25 for lesions].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 0.003].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Dropout rate [default: 0.1 for vessels, 0.2 for lesions].
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Mini-batch size [default: 8].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// U-Net base channel count [default: 8].
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Held-out validation fraction [default: 0.2].
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Epochs of conv feature pre-training on a lesion-presence pretext task (lesions only) [default: 8].
    #[arg(long)]
    pub pretext_epochs: Option<usize>,
    /// Seed for initialization, data split, shuffling and dropout [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run-log file that epoch lines are appended to [default: <OUT>.log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UncertaintyArgs {
    /// Checkpoint to sample.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Input image (binary PGM).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Number of stochastic forward passes T, at least 2 [default: 50].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Decomposition estimator [default: variance].
    #[arg(long, value_enum)]
    pub decomp: Option<Decomp>,
    /// Master seed for the dropout masks [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Checkpoint to explain.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Input image (binary PGM).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Attribution method [default: vanilla].
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Average the method over noisy copies of the input (SmoothGrad).
    #[arg(long)]
    pub smooth: bool,
    /// `class:K` for classifiers or `region:auto` for segmentation
    /// [default: predicted class, or region:auto].
    #[arg(long)]
    pub target: Option<String>,
    /// Integration steps for `--method ig` [default: 64].
    #[arg(long)]
    pub ig_steps: Option<usize>,
    /// Integration baseline for `--method ig` [default: zero].
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// SmoothGrad noise std as a fraction of the input range [default: 0.15].
    #[arg(long)]
    pub sigma: Option<f64>,
    /// SmoothGrad sample count [default: 25].
    #[arg(long)]
    pub n_noise: Option<usize>,
    /// SmoothGrad noise seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Checkpoint to report on.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Input image (binary PGM).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Stochastic forward passes for the uncertainty tiles [default: 50].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Decomposition estimator for the uncertainty tiles [default: variance].
    #[arg(long, value_enum)]
    pub decomp: Option<Decomp>,
    /// Integration steps for the integrated-gradients tile [default: 64].
    #[arg(long)]
    pub ig_steps: Option<usize>,
    /// SmoothGrad noise std as a fraction of the input range [default: 0.15].
    #[arg(long)]
    pub sigma: Option<f64>,
    /// SmoothGrad sample count [default: 25].
    #[arg(long)]
    pub n_noise: Option<usize>,
    /// Seed for dropout masks and SmoothGrad noise [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSettings {
    pub task: Option<Task>,
    pub n: Option<usize>,
    pub size: Option<usize>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub batch_size: Option<usize>,
    pub base_channels: Option<usize>,
    pub val_fraction: Option<f64>,
    pub pretext_epochs: Option<usize>,
    pub log: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub samples: Option<usize>,
    pub decomp: Option<Decomp>,
    pub method: Option<MethodArg>,
    pub smooth: Option<bool>,
    pub target: Option<String>,
    pub ig_steps: Option<usize>,
    pub baseline: Option<Baseline>,
    pub sigma: Option<f64>,
    pub n_noise: Option<usize>,
}

impl FileSettings {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::args(format!("config {}: {e}", path.display())))
    }
}

/// Flag, else file value, else default.
pub fn pick<T: Clone>(flag: Option<T>, file: &Option<T>, default: T) -> T {
    flag.or_else(|| file.clone()).unwrap_or(default)
}

/// Flag, else file value; an error naming the flag if neither is set.
pub fn require<T: Clone>(flag: Option<T>, file: &Option<T>, name: &str) -> CliResult<T> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| CliError::args(format!("missing required setting --{name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn target_parsing() {
        assert_eq!("class:3".parse(), Ok(TargetSpec::Class(3)));
        assert_eq!("region:auto".parse(), Ok(TargetSpec::RegionAuto));
        assert!("class:x".parse::<TargetSpec>().is_err());
        assert!("region:all".parse::<TargetSpec>().is_err());
    }

    #[test]
    fn precedence() {
        assert_eq!(pick(Some(1), &Some(2), 3), 1);
        assert_eq!(pick(None, &Some(2), 3), 2);
        assert_eq!(pick(None, &None, 3), 3);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let err = serde_json::from_str::<FileSettings>(r#"{"seed": 1, "sed": 2}"#).unwrap_err();
        assert!(err.to_string().contains("sed"));
        let ok: FileSettings =
            serde_json::from_str(r#"{"seed": 1, "method": "ig", "task": "vessels"}"#).unwrap();
        assert_eq!(ok.method, Some(MethodArg::Ig));
    }
}
