use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use olens::data::pnm::{encode_pgm, encode_ppm};
use olens::data::render::{gray_to_rgb, render_heatmap, render_overlay, tile_row};
use olens::data::synth::{gen_lesions, gen_vessels, LesionMode};
use olens::data::{
    read_dataset, write_lesion_dataset, write_vessel_dataset, Colormap, DatasetError, Generator,
};
use olens::network::{build_unet, write_checkpoint};
use olens::pipeline::{pretrained_features, ClassifierRecipe, VesselRecipe};
use olens::saliency::{
    encode_grid, explain, smoothgrad, target_score, BaselineKind, MethodConfig, DEFAULT_IG_STEPS,
    DEFAULT_N_NOISE, DEFAULT_SIGMA,
};
use olens::training::{evaluate, train_with};
use olens::uncertainty::{
    decompose, display_map, epistemic_heatmap, mc_sample, uncertainty_for_classifier,
    write_result_dir, UncertaintyError, UncertaintyStats, DEFAULT_SAMPLES,
};
use olens::{
    Decomposition, EpochReport, ForwardMode, LossKind, Method, Network, OutputKind, RngStream,
    Tensor, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::common::{emit, load_input, load_net, resolve_target, saliency_error, saliency_heatmap};
use crate::config::*;
use crate::error::{CliError, CliResult};
use crate::output::{write_file_atomic, Staging};

/// Overlay opacity of explanation heatmaps.
const OVERLAY_ALPHA: f64 = 0.6;
/// White gap between report tiles, in pixels.
const TILE_SEPARATOR: usize = 2;

fn dataset_error(dir: &Path, e: DatasetError) -> CliError {
    match e {
        DatasetError::Io(e) => CliError::io(format!("{}: {e}", dir.display())),
        other => CliError::data(format!("{}: {other}", dir.display())),
    }
}

fn check_range(name: &str, value: f64, lo: f64, hi_exclusive: f64) -> CliResult<()> {
    if !(value >= lo && value < hi_exclusive) {
        return Err(CliError::args(format!(
            "--{name} must lie in [{lo}, {hi_exclusive}), got {value}"
        )));
    }
    Ok(())
}

pub fn synth(a: SynthArgs, f: &FileSettings) -> CliResult<()> {
    let task = require(a.task, &f.task, "task")?;
    let n = pick(a.n, &f.n, 200);
    let size = pick(a.size, &f.size, 64);
    let seed = pick(a.seed, &f.seed, 0);
    let mode = pick(a.mode, &f.mode, Mode::Binary);
    let out = require(a.out, &f.out, "out")?;
    if n == 0 {
        return Err(CliError::args("--n must be positive"));
    }
    let stage;
    let manifest = match task {
        Task::Vessels => {
            let samples = gen_vessels(n, size, seed).map_err(CliError::args)?;
            stage = Staging::new(&out)?;
            write_vessel_dataset(stage.path(), &samples, size, seed)
        }
        Task::Lesions => {
            let mode = match mode {
                Mode::Binary => LesionMode::Binary,
                Mode::Quadrant => LesionMode::Quadrant,
            };
            let samples = gen_lesions(n, size, mode, seed).map_err(CliError::args)?;
            stage = Staging::new(&out)?;
            write_lesion_dataset(stage.path(), &samples, size, mode, seed)
        }
    }
    .map_err(|e| CliError::io(format!("writing dataset: {e}")))?;
    stage.commit()?;
    emit(&manifest);
    Ok(())
}

/// Epoch line written to the run log: losses only, so the file is reproducible.
#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".log.jsonl");
    out.with_file_name(name)
}

pub fn train(a: TrainArgs, f: &FileSettings) -> CliResult<()> {
    let task = require(a.task, &f.task, "task")?;
    let data = require(a.data, &f.data, "data")?;
    let out = require(a.out, &f.out, "out")?;
    let log_path = a
        .log
        .or_else(|| f.log.clone())
        .unwrap_or_else(|| default_log_path(&out));
    let seed = pick(a.seed, &f.seed, 0);
    let vessel = VesselRecipe::default();
    let lesion = ClassifierRecipe::default();
    let (defaults, default_dropout) = match task {
        Task::Vessels => (&vessel.train, vessel.dropout),
        Task::Lesions => (&lesion.train, lesion.dropout),
    };
    let config = TrainConfig {
        epochs: pick(a.epochs, &f.epochs, defaults.epochs),
        batch_size: pick(a.batch_size, &f.batch_size, defaults.batch_size),
        learning_rate: pick(a.lr, &f.lr, defaults.learning_rate),
        val_fraction: pick(a.val_fraction, &f.val_fraction, defaults.val_fraction),
        seed,
        ..defaults.clone()
    };
    config.validate().map_err(CliError::args)?;
    let dropout = pick(a.dropout, &f.dropout, default_dropout);
    check_range("dropout", dropout, 0.0, 1.0)?;
    let base_channels = pick(a.base_channels, &f.base_channels, vessel.base_channels);
    if base_channels == 0 {
        return Err(CliError::args("--base-channels must be positive"));
    }
    let pretext_epochs = pick(a.pretext_epochs, &f.pretext_epochs, lesion.pretext.epochs);

    let dataset = read_dataset(&data).map_err(|e| dataset_error(&data, e))?;
    let manifest = &dataset.manifest;
    let expected = match task {
        Task::Vessels => Generator::Vessels,
        Task::Lesions => Generator::Lesions,
    };
    if manifest.generator != expected {
        return Err(CliError::data(format!(
            "{} holds a {:?} dataset but --task is {task:?}",
            data.display(),
            manifest.generator
        )));
    }
    if dataset.examples.len() < 2 {
        return Err(CliError::data("training needs at least 2 examples"));
    }
    let size = manifest.args.size;
    let mut net: Network = match task {
        Task::Vessels => {
            build_unet(base_channels, dropout, [1, size, size], seed).map_err(CliError::data)?
        }
        Task::Lesions => {
            let mode = manifest.args.mode.unwrap_or_default();
            let recipe = ClassifierRecipe {
                size,
                dropout,
                init_seed: seed,
                pretext_seed: seed.wrapping_add(101),
                pretext: TrainConfig {
                    epochs: pretext_epochs,
                    seed,
                    ..lesion.pretext.clone()
                },
                mode,
                ..lesion.clone()
            };
            let mut net = pretrained_features(&recipe).map_err(CliError::data)?;
            net.replace_head(recipe.classes(), seed.wrapping_add(1))
                .map_err(CliError::data)?;
            net
        }
    };

    if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::io(format!("cannot create {}: {e}", parent.display())))?;
    }
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::io(format!("cannot open run log {}: {e}", log_path.display())))?;
    let mut log_error = None;
    train_with(&mut net, &dataset.examples, &config, |r: &EpochReport| {
        emit(r);
        let line = serde_json::to_string(&LogLine {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
        })
        .expect("log line serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
    })
    .map_err(CliError::data)?;
    if let Some(e) = log_error {
        return Err(CliError::io(format!(
            "writing run log {}: {e}",
            log_path.display()
        )));
    }
    let bytes = write_checkpoint(&net);
    write_file_atomic(&out, &bytes)?;
    emit(&json!({
        "checkpoint": out.display().to_string(),
        "bytes": bytes.len(),
        "arch": net.arch(),
        "param_count": net.param_count(),
        "epochs_trained": net.epochs_trained(),
    }));
    Ok(())
}

pub fn eval(a: EvalArgs, f: &FileSettings) -> CliResult<()> {
    let ckpt = require(a.ckpt, &f.ckpt, "ckpt")?;
    let data = require(a.data, &f.data, "data")?;
    let net = load_net(&ckpt)?;
    let dataset = read_dataset(&data).map_err(|e| dataset_error(&data, e))?;
    let m = &dataset.manifest;
    let loss = match (m.generator, net.output_kind()) {
        (Generator::Vessels, OutputKind::Segmentation) => LossKind::Dice,
        (Generator::Lesions, OutputKind::Classification { classes }) => {
            let expected = match m.args.mode.unwrap_or_default() {
                LesionMode::Binary => 2,
                LesionMode::Quadrant => 4,
            };
            if classes != expected {
                return Err(CliError::data(format!(
                    "checkpoint has {classes} classes, dataset labels have {expected}"
                )));
            }
            LossKind::CrossEntropy
        }
        (g, k) => {
            return Err(CliError::data(format!(
                "a {g:?} dataset cannot evaluate a {k:?} checkpoint"
            )))
        }
    };
    if net.input_shape() != [1, m.args.size, m.args.size] {
        return Err(CliError::checkpoint(format!(
            "checkpoint expects input {:?}, dataset images are {}x{}",
            net.input_shape(),
            m.args.size,
            m.args.size
        )));
    }
    let report = evaluate(&net, &dataset.examples, loss, 1.0).map_err(CliError::data)?;
    emit(&json!({
        "loss": loss,
        "count": report.count,
        "mean_loss": report.mean_loss,
        "accuracy": report.accuracy,
    }));
    Ok(())
}

fn decomposition(d: Decomp) -> Decomposition {
    match d {
        Decomp::Variance => Decomposition::Variance,
        Decomp::Entropy => Decomposition::Entropy,
    }
}

fn sample_count(flag: Option<usize>, file: &Option<usize>) -> CliResult<usize> {
    let t = pick(flag, file, DEFAULT_SAMPLES);
    if t < 2 {
        return Err(CliError::args(format!(
            "--samples must be at least 2, got {t}"
        )));
    }
    Ok(t)
}

fn uncertainty_error(e: UncertaintyError) -> CliError {
    match e {
        UncertaintyError::Io(e) => CliError::io(e),
        UncertaintyError::TooFewSamples(_) => CliError::args(e),
        other => CliError::checkpoint(other),
    }
}

fn run_uncertainty(
    net: &Network,
    input: &Tensor,
    t: usize,
    kind: Decomposition,
    seed: u64,
) -> CliResult<olens::UncertaintyResult> {
    if !net.has_dropout() {
        eprintln!(
            "warning: checkpoint has no active dropout; epistemic uncertainty will be exactly 0"
        );
    }
    let set = mc_sample(net, input, t, seed).map_err(uncertainty_error)?;
    match net.output_kind() {
        OutputKind::Segmentation => Ok(decompose(&set, kind)),
        OutputKind::Classification { .. } => {
            uncertainty_for_classifier(&set).map_err(uncertainty_error)
        }
        OutputKind::Raw => Err(CliError::checkpoint("checkpoint has no probability output")),
    }
}

pub fn uncertainty(a: UncertaintyArgs, f: &FileSettings) -> CliResult<()> {
    let ckpt = require(a.ckpt, &f.ckpt, "ckpt")?;
    let input_path = require(a.input, &f.input, "input")?;
    let out = require(a.out, &f.out, "out")?;
    let t = sample_count(a.samples, &f.samples)?;
    let kind = decomposition(pick(a.decomp, &f.decomp, Decomp::Variance));
    let seed = pick(a.seed, &f.seed, 0);
    let net = load_net(&ckpt)?;
    let input = load_input(&input_path, &net)?;
    if kind == Decomposition::Entropy && !matches!(net.output_kind(), OutputKind::Segmentation) {
        return Err(CliError::args(
            "entropy decomposition needs a segmentation checkpoint",
        ));
    }
    let result = run_uncertainty(&net, &input, t, kind, seed)?;
    let stage = Staging::new(&out)?;
    let stats = write_result_dir(stage.path(), &result, seed).map_err(uncertainty_error)?;
    stage.commit()?;
    emit(&stats);
    Ok(())
}

fn method_of(m: MethodArg) -> Method {
    match m {
        MethodArg::Vanilla => Method::Vanilla,
        MethodArg::Guided => Method::Guided,
        MethodArg::Ig => Method::Integrated,
    }
}

fn ig_steps(flag: Option<usize>, file: &Option<usize>) -> CliResult<usize> {
    let m = pick(flag, file, DEFAULT_IG_STEPS);
    if m == 0 {
        return Err(CliError::args("--ig-steps must be at least 1"));
    }
    Ok(m)
}

fn noise(
    sigma: Option<f64>,
    fs: &Option<f64>,
    n: Option<usize>,
    fn_: &Option<usize>,
) -> CliResult<(f64, usize)> {
    let sigma = pick(sigma, fs, DEFAULT_SIGMA);
    let n = pick(n, fn_, DEFAULT_N_NOISE);
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CliError::args(format!(
            "--sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if n == 0 {
        return Err(CliError::args("--n-noise must be at least 1"));
    }
    Ok((sigma, n))
}

#[derive(Serialize)]
struct ExplainParams {
    method: Method,
    smoothed: bool,
    target: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    region_fallback: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ig_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<BaselineKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_noise: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    score_input: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    score_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    completeness_residual: Option<f64>,
}

pub fn explain_cmd(a: ExplainArgs, f: &FileSettings) -> CliResult<()> {
    let ckpt = require(a.ckpt, &f.ckpt, "ckpt")?;
    let input_path = require(a.input, &f.input, "input")?;
    let out = require(a.out, &f.out, "out")?;
    let method = method_of(pick(a.method, &f.method, MethodArg::Vanilla));
    let smooth = a.smooth || f.smooth.unwrap_or(false);
    let steps = ig_steps(a.ig_steps, &f.ig_steps)?;
    let (sigma, n_noise) = noise(a.sigma, &f.sigma, a.n_noise, &f.n_noise)?;
    let seed = pick(a.seed, &f.seed, 0);
    let baseline = match pick(a.baseline, &f.baseline, Baseline::Zero) {
        Baseline::Zero => BaselineKind::Zero,
        Baseline::Gray => BaselineKind::Gray,
    };
    let spec = a
        .target
        .or_else(|| f.target.clone())
        .map(|s| s.parse::<TargetSpec>())
        .transpose()
        .map_err(CliError::args)?;

    let net = load_net(&ckpt)?;
    let input = load_input(&input_path, &net)?;
    let resolved = resolve_target(&net, &input, spec)?;
    let config = MethodConfig {
        method,
        ig_steps: steps,
        baseline,
    };
    let map = if smooth {
        smoothgrad(&net, &input, &resolved.target, config, n_noise, sigma, seed)
    } else {
        explain(&net, &input, &resolved.target, config)
    }
    .map_err(saliency_error)?;

    let score_input = target_score(&net, &input, &resolved.target).map_err(saliency_error)?;
    let score_baseline = match method {
        Method::Integrated => Some(
            target_score(&net, &baseline.tensor(input.shape()), &resolved.target)
                .map_err(saliency_error)?,
        ),
        _ => None,
    };
    let params = ExplainParams {
        method,
        smoothed: smooth,
        target: resolved.label,
        region_fallback: resolved.region_fallback,
        ig_steps: (method == Method::Integrated).then_some(steps),
        baseline: (method == Method::Integrated).then_some(baseline),
        noise_sigma: smooth.then_some(sigma),
        n_noise: smooth.then_some(n_noise),
        seed: smooth.then_some(seed),
        score_input,
        score_baseline,
        completeness_residual: map.completeness_residual,
    };
    let heat = saliency_heatmap(&map.attributions)?;
    let unit = olens::saliency::normalize_for_display(
        &map.attributions,
        olens::saliency::DEFAULT_DISPLAY_PERCENTILE,
    )
    .map_err(saliency_error)?;
    let base = first_channel(&input);
    let overlay = render_overlay(&base, &unit, OVERLAY_ALPHA, Colormap::InfernoLike)
        .map_err(CliError::data)?;

    let stage = Staging::new(&out)?;
    stage.write("attribution.f64", &encode_grid(&map.attributions))?;
    stage.write("heatmap.ppm", &encode_ppm(&heat).map_err(CliError::data)?)?;
    stage.write(
        "overlay.ppm",
        &encode_ppm(&overlay).map_err(CliError::data)?,
    )?;
    let json = serde_json::to_string_pretty(&params).expect("params serialize") + "\n";
    stage.write("params.json", json.as_bytes())?;
    stage.commit()?;
    emit(&params);
    Ok(())
}

/// `[1,H,W]` view of the first input channel, clamped for display.
fn first_channel(input: &Tensor) -> Tensor {
    let [_, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let data = input.data()[..h * w]
        .iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Tensor::new(vec![1, h, w], data).expect("finite")
}

pub fn report(a: ReportArgs, f: &FileSettings) -> CliResult<()> {
    let ckpt = require(a.ckpt, &f.ckpt, "ckpt")?;
    let input_path = require(a.input, &f.input, "input")?;
    let out = require(a.out, &f.out, "out")?;
    let t = sample_count(a.samples, &f.samples)?;
    let kind = decomposition(pick(a.decomp, &f.decomp, Decomp::Variance));
    let steps = ig_steps(a.ig_steps, &f.ig_steps)?;
    let (sigma, n_noise) = noise(a.sigma, &f.sigma, a.n_noise, &f.n_noise)?;
    let seed = pick(a.seed, &f.seed, 0);

    let net = load_net(&ckpt)?;
    let input = load_input(&input_path, &net)?;
    let base = first_channel(&input);
    let mut names: Vec<&str> = vec!["input"];
    let mut tiles = vec![gray_to_rgb(&base).map_err(CliError::data)?];
    let mut stats: Option<UncertaintyStats> = None;
    match net.output_kind() {
        OutputKind::Segmentation => {
            let pred = net
                .forward(&input, ForwardMode::Deterministic, &mut RngStream::new(0))
                .map_err(CliError::checkpoint)?;
            let result = run_uncertainty(&net, &input, t, kind, seed)?;
            tiles.push(gray_to_rgb(&pred).map_err(CliError::data)?);
            tiles.push(epistemic_heatmap(&result));
            tiles.push(
                render_heatmap(&display_map(&result.aleatoric, kind), Colormap::InfernoLike)
                    .map_err(CliError::data)?,
            );
            names.extend(["prediction", "epistemic", "aleatoric"]);
            stats = Some(UncertaintyStats::new(&result, seed));
        }
        OutputKind::Classification { .. } => {
            let result = run_uncertainty(&net, &input, t, Decomposition::Variance, seed)?;
            stats = Some(UncertaintyStats::new(&result, seed));
        }
        OutputKind::Raw => {}
    }
    let resolved = resolve_target(&net, &input, None)?;
    let mut residual = None;
    for (name, method, smooth) in [
        ("vanilla", Method::Vanilla, false),
        ("guided", Method::Guided, false),
        ("integrated", Method::Integrated, false),
        ("smoothgrad", Method::Vanilla, true),
    ] {
        let config = MethodConfig {
            method,
            ig_steps: steps,
            baseline: BaselineKind::Zero,
        };
        let map = if smooth {
            smoothgrad(&net, &input, &resolved.target, config, n_noise, sigma, seed)
        } else {
            explain(&net, &input, &resolved.target, config)
        }
        .map_err(saliency_error)?;
        if method == Method::Integrated {
            residual = map.completeness_residual;
        }
        tiles.push(saliency_heatmap(&map.attributions)?);
        names.push(name);
    }
    let panel = tile_row(&tiles, TILE_SEPARATOR).map_err(CliError::data)?;
    let summary = json!({
        "tiles": names,
        "separator": TILE_SEPARATOR,
        "width": panel.shape()[2],
        "height": panel.shape()[1],
        "target": resolved.label,
        "region_fallback": resolved.region_fallback,
        "samples": t,
        "seed": seed,
        "ig_steps": steps,
        "ig_completeness_residual": residual,
        "uncertainty": stats,
    });
    let stage = Staging::new(&out)?;
    stage.write("report.ppm", &encode_ppm(&panel).map_err(CliError::data)?)?;
    stage.write("input.pgm", &encode_pgm(&base).map_err(CliError::data)?)?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    stage.write("report.json", text.as_bytes())?;
    stage.commit()?;
    emit(&summary);
    Ok(())
}
