//! Synthetic datasets, netpbm I/O, and heatmap rendering.

pub mod colormap;
pub mod pnm;
pub mod render;
pub mod synth;

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use colormap::Colormap;
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm, PnmError};
pub use render::{gray_to_rgb, render_heatmap, render_overlay, tile_row, RenderError};
pub use synth::{gen_lesions, gen_vessels, LesionMode, LesionSample, SynthError, VesselSample};

use crate::training::{Example, Target};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("labels.csv line {line}: {reason}")]
    Labels { line: usize, reason: String },
    #[error("{path}: {source}")]
    Image { path: String, source: PnmError },
    #[error("{0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Vessels,
    Lesions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestArgs {
    pub n: usize,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<LesionMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator: Generator,
    pub args: ManifestArgs,
    pub seed: u64,
    pub count: usize,
    pub version: u32,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub examples: Vec<Example>,
}

fn image_name(i: usize) -> String {
    format!("img_{i:05}.pgm")
}

fn mask_name(i: usize) -> String {
    format!("msk_{i:05}.pgm")
}

fn write_image(path: &Path, image: &crate::Tensor) -> Result<(), DatasetError> {
    write_pgm(path, image).map_err(|source| DatasetError::Image {
        path: path.display().to_string(),
        source,
    })
}

fn read_image(path: &Path) -> Result<crate::Tensor, DatasetError> {
    read_pgm(path).map_err(|source| DatasetError::Image {
        path: path.display().to_string(),
        source,
    })
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), DatasetError> {
    fs::write(dir.join("manifest.json"), manifest.to_json() + "\n")?;
    Ok(())
}

/// Writes images, masks and the manifest into an existing directory.
pub fn write_vessel_dataset(
    dir: &Path,
    samples: &[VesselSample],
    size: usize,
    seed: u64,
) -> Result<Manifest, DatasetError> {
    for (i, s) in samples.iter().enumerate() {
        write_image(&dir.join(image_name(i)), &s.image)?;
        write_image(&dir.join(mask_name(i)), &s.mask)?;
    }
    let manifest = Manifest {
        generator: Generator::Vessels,
        args: ManifestArgs {
            n: samples.len(),
            size,
            mode: None,
        },
        seed,
        count: samples.len(),
        version: DATASET_VERSION,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Writes images, `labels.csv` and the manifest into an existing directory.
pub fn write_lesion_dataset(
    dir: &Path,
    samples: &[LesionSample],
    size: usize,
    mode: LesionMode,
    seed: u64,
) -> Result<Manifest, DatasetError> {
    let mut csv = String::from("index,label\n");
    for (i, s) in samples.iter().enumerate() {
        write_image(&dir.join(image_name(i)), &s.image)?;
        csv.push_str(&format!("{i},{}\n", s.label));
    }
    fs::write(dir.join("labels.csv"), csv)?;
    let manifest = Manifest {
        generator: Generator::Lesions,
        args: ManifestArgs {
            n: samples.len(),
            size,
            mode: Some(mode),
        },
        seed,
        count: samples.len(),
        version: DATASET_VERSION,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(DatasetError::Manifest(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    Ok(manifest)
}

fn parse_labels(text: &str, count: usize) -> Result<Vec<usize>, DatasetError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "index,label")) => {}
        _ => {
            return Err(DatasetError::Labels {
                line: 1,
                reason: "expected header `index,label`".into(),
            })
        }
    }
    let mut labels = Vec::with_capacity(count);
    for (n, line) in lines {
        let bad = |reason: String| DatasetError::Labels {
            line: n + 1,
            reason,
        };
        let (index, label) = line
            .split_once(',')
            .ok_or_else(|| bad("expected two fields".into()))?;
        let index: usize = index
            .trim()
            .parse()
            .map_err(|e| bad(format!("index: {e}")))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|e| bad(format!("label: {e}")))?;
        if index != labels.len() {
            return Err(bad(format!(
                "expected index {}, found {index}",
                labels.len()
            )));
        }
        labels.push(label);
    }
    if labels.len() != count {
        return Err(DatasetError::Inconsistent(format!(
            "labels.csv has {} rows, manifest count is {count}",
            labels.len()
        )));
    }
    Ok(labels)
}

/// Loads a dataset directory written by this crate.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest = read_manifest(dir)?;
    let size = manifest.args.size;
    let labels = match manifest.generator {
        Generator::Lesions => Some(parse_labels(
            &fs::read_to_string(dir.join("labels.csv"))?,
            manifest.count,
        )?),
        Generator::Vessels => None,
    };
    let mut examples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let input = read_image(&dir.join(image_name(i)))?;
        if input.shape() != [1, size, size] {
            return Err(DatasetError::Inconsistent(format!(
                "{} has shape {:?}, manifest size is {size}",
                image_name(i),
                input.shape()
            )));
        }
        let target = match &labels {
            Some(l) => Target::Class(l[i]),
            None => {
                let mask = read_image(&dir.join(mask_name(i)))?;
                if mask.shape() != input.shape() {
                    return Err(DatasetError::Inconsistent(format!(
                        "{} shape differs from image",
                        mask_name(i)
                    )));
                }
                Target::Mask(mask)
            }
        };
        examples.push(Example { input, target });
    }
    Ok(Dataset { manifest, examples })
}
