//! Heatmaps, overlays and panel tiling. All images are planar tensors with
//! values in `[0,1]`: `[1,H,W]` grayscale, `[3,H,W]` RGB.

use thiserror::Error;

use super::colormap::Colormap;
use super::pnm::quantize;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("value out of range: {0}")]
    RangeError(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

fn spatial(t: &Tensor) -> Result<(usize, usize), RenderError> {
    match *t.shape() {
        [1, h, w] | [h, w] => Ok((h, w)),
        _ => Err(RenderError::ShapeMismatch(format!(
            "expected a single-channel map, got {:?}",
            t.shape()
        ))),
    }
}

fn check_unit(t: &Tensor, what: &str) -> Result<(), RenderError> {
    match t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(RenderError::RangeError(format!(
            "{what} contains {v}, outside [0,1]"
        ))),
        None => Ok(()),
    }
}

/// Maps each value through the 256-entry table at index `round(255 v)`.
pub fn render_heatmap(map: &Tensor, colormap: Colormap) -> Result<Tensor, RenderError> {
    let (h, w) = spatial(map)?;
    check_unit(map, "map")?;
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, &v) in map.data().iter().enumerate() {
        let rgb = colormap.lookup(quantize(v));
        for c in 0..3 {
            data[c * plane + i] = f64::from(rgb[c]) / 255.0;
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

/// Grayscale image replicated to three channels.
pub fn gray_to_rgb(base: &Tensor) -> Result<Tensor, RenderError> {
    let (h, w) = spatial(base)?;
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(base.data());
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

/// Per pixel: `(1 - alpha*m) * base + alpha*m * heat(m)`.
pub fn render_overlay(
    base: &Tensor,
    map: &Tensor,
    alpha: f64,
    colormap: Colormap,
) -> Result<Tensor, RenderError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RenderError::RangeError(format!(
            "alpha {alpha} outside [0,1]"
        )));
    }
    let dims = spatial(base)?;
    if dims != spatial(map)? {
        return Err(RenderError::ShapeMismatch(format!(
            "base {:?} vs map {:?}",
            base.shape(),
            map.shape()
        )));
    }
    check_unit(base, "base")?;
    let heat = render_heatmap(map, colormap)?;
    let plane = dims.0 * dims.1;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        let weight = alpha * map.data()[i];
        for c in 0..3 {
            data[c * plane + i] =
                (1.0 - weight) * base.data()[i] + weight * heat.data()[c * plane + i];
        }
    }
    Ok(Tensor::from_parts(vec![3, dims.0, dims.1], data))
}

/// Places equally tall RGB tiles left to right with white separators.
pub fn tile_row(tiles: &[Tensor], separator: usize) -> Result<Tensor, RenderError> {
    let first = tiles
        .first()
        .ok_or_else(|| RenderError::ShapeMismatch("no tiles".into()))?;
    let height = match *first.shape() {
        [3, h, _] => h,
        _ => {
            return Err(RenderError::ShapeMismatch(format!(
                "tile shape {:?}",
                first.shape()
            )))
        }
    };
    let mut widths = Vec::with_capacity(tiles.len());
    for t in tiles {
        match *t.shape() {
            [3, h, w] if h == height => widths.push(w),
            _ => {
                return Err(RenderError::ShapeMismatch(format!(
                    "tile shape {:?}",
                    t.shape()
                )))
            }
        }
    }
    let total_w = widths.iter().sum::<usize>() + separator * (tiles.len() - 1);
    let mut data = vec![1.0; 3 * height * total_w];
    let mut x0 = 0;
    for (t, &w) in tiles.iter().zip(&widths) {
        for c in 0..3 {
            for y in 0..height {
                let src = &t.data()[(c * height + y) * w..(c * height + y + 1) * w];
                let dst = (c * height + y) * total_w + x0;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
        x0 += w + separator;
    }
    Ok(Tensor::from_parts(vec![3, height, total_w], data))
}
