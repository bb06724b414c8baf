use std::path::Path;

use olens::data::pnm::{read_pgm, PnmError};
use olens::data::render::render_heatmap;
use olens::data::Colormap;
use olens::network::{load_checkpoint, CheckpointError};
use olens::saliency::{
    auto_region, normalize_for_display, SaliencyError, DEFAULT_DISPLAY_PERCENTILE,
};
use olens::training::argmax;
use olens::{ForwardMode, Network, OutputKind, RngStream, SaliencyTarget, Tensor};
use serde::Serialize;

use crate::config::TargetSpec;
use crate::error::{CliError, CliResult};

/// Prints one JSON object as a single stdout line.
pub fn emit<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string(value).expect("log values serialize")
    );
}

pub fn load_net(path: &Path) -> CliResult<Network> {
    load_checkpoint(path).map_err(|e| match e {
        CheckpointError::Io(e) => {
            CliError::io(format!("cannot read checkpoint {}: {e}", path.display()))
        }
        other => CliError::checkpoint(format!("{}: {other}", path.display())),
    })
}

/// Reads a PGM and checks it fits the network's input.
pub fn load_input(path: &Path, net: &Network) -> CliResult<Tensor> {
    let image = read_pgm(path).map_err(|e| match e {
        PnmError::Io(e) => CliError::io(format!("cannot read {}: {e}", path.display())),
        other => CliError::data(format!("{}: {other}", path.display())),
    })?;
    if image.shape() != net.input_shape() {
        return Err(CliError::checkpoint(format!(
            "checkpoint expects input {:?}, {} is {:?}",
            net.input_shape(),
            path.display(),
            image.shape()
        )));
    }
    Ok(image)
}

pub fn saliency_error(e: SaliencyError) -> CliError {
    match e {
        SaliencyError::BadTarget(m) => CliError::target(m),
        SaliencyError::Network(e) => CliError::checkpoint(e),
        other => CliError::args(other),
    }
}

pub struct ResolvedTarget {
    pub target: SaliencyTarget,
    pub label: String,
    /// Set when `region:auto` found no foreground and fell back to the whole image.
    pub region_fallback: Option<bool>,
}

/// Explicit target, or the default for the checkpoint kind: the predicted
/// class for classifiers and `region:auto` for segmentation.
pub fn resolve_target(
    net: &Network,
    input: &Tensor,
    spec: Option<TargetSpec>,
) -> CliResult<ResolvedTarget> {
    let kind = net.output_kind();
    let resolved = match (spec, kind) {
        (None | Some(TargetSpec::RegionAuto), OutputKind::Segmentation) => {
            let (target, fallback) = auto_region(net, input).map_err(saliency_error)?;
            ResolvedTarget {
                target,
                label: "region:auto".into(),
                region_fallback: Some(fallback),
            }
        }
        (Some(TargetSpec::RegionAuto), _) => {
            return Err(CliError::target(
                "region:auto requires a segmentation checkpoint",
            ));
        }
        (Some(TargetSpec::Class(k)), OutputKind::Segmentation) => {
            return Err(CliError::target(format!(
                "class:{k} is invalid for a segmentation checkpoint"
            )));
        }
        (Some(TargetSpec::Class(k)), _) => ResolvedTarget {
            target: SaliencyTarget::ClassScore(k),
            label: format!("class:{k}"),
            region_fallback: None,
        },
        (None, _) => {
            let out = net
                .forward(input, ForwardMode::Deterministic, &mut RngStream::new(0))
                .map_err(CliError::checkpoint)?;
            let k = argmax(out.data());
            ResolvedTarget {
                target: SaliencyTarget::ClassScore(k),
                label: format!("class:{k}"),
                region_fallback: None,
            }
        }
    };
    resolved.target.validate(net).map_err(saliency_error)?;
    Ok(resolved)
}

/// Absolute attributions, percentile-clipped and rendered with the inferno map.
pub fn saliency_heatmap(attributions: &Tensor) -> CliResult<Tensor> {
    let unit =
        normalize_for_display(attributions, DEFAULT_DISPLAY_PERCENTILE).map_err(saliency_error)?;
    render_heatmap(&unit, Colormap::InfernoLike).map_err(CliError::data)
}
