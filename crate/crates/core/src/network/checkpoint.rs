//! Binary checkpoint format.
//!
//! ```text
//! offset  size       content
//! 0       8          magic "OLENS\0v1"
//! 8       4          meta_len, u32 little-endian
//! 12      meta_len   UTF-8 JSON: {"arch","input_shape","layers","param_counts","seed","epochs_trained"}
//! ...     8 * N      parameters as f64 little-endian, layer order, tensor order within a layer
//! ```
//! `N` is the sum of `param_counts`, one entry per layer.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LayerSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"OLENS\0v1";
const MAGIC_PREFIX: &[u8] = b"OLENS\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found:?}")]
    VersionMismatch { found: String },
    #[error("parameter payload has {actual} bytes, metadata declares {expected}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("invalid checkpoint metadata: {0}")]
    MetaParseError(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    arch: String,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    param_counts: Vec<usize>,
    seed: u64,
    epochs_trained: u64,
}

/// Serializes `net` into checkpoint bytes.
pub fn write_checkpoint(net: &Network) -> Vec<u8> {
    let meta = Meta {
        arch: net.arch.clone(),
        input_shape: net.input_shape,
        layers: net.layers.clone(),
        param_counts: net.layers.iter().map(LayerSpec::param_count).collect(),
        seed: net.seed,
        epochs_trained: net.epochs_trained,
    };
    let meta_bytes = serde_json::to_vec(&meta).expect("checkpoint metadata is always serializable");
    let mut out = Vec::with_capacity(12 + meta_bytes.len() + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for tensor in net.params.iter().flatten() {
        out.extend_from_slice(&tensor.to_le_bytes());
    }
    out
}

/// Parses checkpoint bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Network, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC_PREFIX.len()] != MAGIC_PREFIX {
        return Err(CheckpointError::BadMagic);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[MAGIC_PREFIX.len()..MAGIC.len()]).into_owned(),
        });
    }
    let header_end = MAGIC.len() + 4;
    if bytes.len() < header_end {
        return Err(CheckpointError::MetaParseError(
            "missing metadata length".into(),
        ));
    }
    let meta_len = u32::from_le_bytes(bytes[MAGIC.len()..header_end].try_into().unwrap()) as usize;
    let meta_end = header_end
        .checked_add(meta_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            CheckpointError::MetaParseError("metadata extends past end of file".into())
        })?;
    let meta: Meta = serde_json::from_slice(&bytes[header_end..meta_end])
        .map_err(|e| CheckpointError::MetaParseError(e.to_string()))?;

    if meta.param_counts.len() != meta.layers.len() {
        return Err(CheckpointError::MetaParseError(format!(
            "{} param counts for {} layers",
            meta.param_counts.len(),
            meta.layers.len()
        )));
    }
    let declared: usize = meta.param_counts.iter().sum();
    let payload = &bytes[meta_end..];
    if payload.len() != declared * 8 {
        return Err(CheckpointError::TruncatedPayload {
            expected: declared * 8,
            actual: payload.len(),
        });
    }
    for (i, (layer, &count)) in meta.layers.iter().zip(&meta.param_counts).enumerate() {
        if layer.param_count() != count {
            return Err(CheckpointError::MetaParseError(format!(
                "layer {i} declares {count} parameters, its spec implies {}",
                layer.param_count()
            )));
        }
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut params = Vec::with_capacity(meta.layers.len());
    for layer in &meta.layers {
        let mut tensors = Vec::new();
        for shape in layer.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            tensors.push(
                Tensor::new(shape, data)
                    .map_err(|e| CheckpointError::MetaParseError(e.to_string()))?,
            );
        }
        params.push(tensors);
    }
    Network::from_raw(
        meta.arch,
        meta.input_shape,
        meta.layers,
        params,
        meta.seed,
        meta.epochs_trained,
    )
    .map_err(|e| CheckpointError::MetaParseError(e.to_string()))
}

/// Writes a checkpoint file; returns the number of bytes written.
pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<usize, CheckpointError> {
    let bytes = write_checkpoint(net);
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network, CheckpointError> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_classifier, build_unet, ForwardMode};
    use crate::rng::RngStream;

    #[test]
    fn round_trip_preserves_bytes_and_outputs() {
        let net = build_unet(4, 0.2, [1, 16, 16], 9).unwrap();
        let bytes = write_checkpoint(&net);
        let loaded = read_checkpoint(&bytes).unwrap();
        assert_eq!(loaded, net);
        assert_eq!(write_checkpoint(&loaded), bytes);
        let mut rng = RngStream::new(1);
        let x = Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.uniform()).collect()).unwrap();
        let a = net
            .forward(&x, ForwardMode::Stochastic, &mut RngStream::new(4))
            .unwrap();
        let b = loaded
            .forward(&x, ForwardMode::Stochastic, &mut RngStream::new(4))
            .unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }

    #[test]
    fn header_layout() {
        let net = build_classifier(2, [1, 16, 16], 0.1, 1).unwrap();
        let bytes = write_checkpoint(&net);
        assert_eq!(&bytes[..8], b"OLENS\0v1");
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[12..12 + meta_len]).unwrap();
        let mut keys: Vec<&str> = meta
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            [
                "arch",
                "epochs_trained",
                "input_shape",
                "layers",
                "param_counts",
                "seed"
            ]
        );
        assert_eq!(bytes.len() - 12 - meta_len, 8 * net.param_count());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = write_checkpoint(&build_unet(4, 0.2, [1, 16, 16], 9).unwrap());
        assert!(matches!(
            read_checkpoint(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = write_checkpoint(&build_unet(4, 0.2, [1, 16, 16], 9).unwrap());
        bytes[7] = b'2';
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::VersionMismatch { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            read_checkpoint(b"OL"),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn wrong_declared_param_count_never_loads() {
        let net = build_unet(4, 0.2, [1, 16, 16], 9).unwrap();
        let bytes = write_checkpoint(&net);
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut meta: serde_json::Value =
            serde_json::from_slice(&bytes[12..12 + meta_len]).unwrap();
        meta["param_counts"][0] = serde_json::json!(net.layers()[0].param_count() + 1);
        let new_meta = serde_json::to_vec(&meta).unwrap();
        let mut forged = MAGIC.to_vec();
        forged.extend_from_slice(&(new_meta.len() as u32).to_le_bytes());
        forged.extend_from_slice(&new_meta);
        forged.extend_from_slice(&bytes[12 + meta_len..]);
        assert!(matches!(
            read_checkpoint(&forged),
            Err(CheckpointError::TruncatedPayload { .. } | CheckpointError::MetaParseError(_))
        ));
    }

    #[test]
    fn garbage_metadata_is_a_parse_error() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(b"{x}");
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::MetaParseError(_))
        ));
    }
}
