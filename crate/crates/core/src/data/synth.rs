//! Procedural stand-ins for retinal vessel and chest X-ray data.
//!
//! Each sample draws from its own substream of the dataset seed, so sample `i`
//! does not depend on how many other samples are generated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::training::{Example, Target};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("image size {size} invalid: must be at least 32 and divisible by {divisor}")]
    BadSize { size: usize, divisor: usize },
    #[error("generator could not satisfy its constraints for sample {index}")]
    Exhausted { index: usize },
}

/// Additive pixel noise for vessel images.
pub const VESSEL_NOISE_STD: f64 = 0.05;
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.30;
/// Vessels at most this wide count as thin.
pub const THIN_MAX_WIDTH: u8 = 2;
pub const THICK_MIN_WIDTH: u8 = 3;
const MAX_ATTEMPTS: usize = 10_000;

/// Darkening of a vessel of width `w` px; thin vessels are fainter.
pub fn vessel_contrast(width: u8) -> f64 {
    0.2 + 0.05 * f64::from(width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselMeta {
    pub seed: u64,
    pub index: usize,
    pub n_strokes: usize,
    pub stroke_widths: Vec<u8>,
    pub foreground_fraction: f64,
    pub thin_pixels: usize,
    pub thick_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VesselSample {
    /// `[1,H,W]`, values in `[0,1]`.
    pub image: Tensor,
    /// `[1,H,W]`, values in `{0,1}`.
    pub mask: Tensor,
    /// Per pixel, the widest stroke covering it (0 on background).
    pub width_map: Vec<u8>,
    pub meta: VesselMeta,
}

impl VesselSample {
    pub fn example(&self) -> Example {
        Example {
            input: self.image.clone(),
            target: Target::Mask(self.mask.clone()),
        }
    }

    /// Pixels belonging to vessels no wider than [`THIN_MAX_WIDTH`].
    pub fn thin_mask(&self) -> Vec<bool> {
        self.width_map
            .iter()
            .map(|&w| w > 0 && w <= THIN_MAX_WIDTH)
            .collect()
    }

    /// Pixels belonging to vessels at least [`THICK_MIN_WIDTH`] wide.
    pub fn thick_mask(&self) -> Vec<bool> {
        self.width_map
            .iter()
            .map(|&w| w >= THICK_MIN_WIDTH)
            .collect()
    }
}

fn check_size(size: usize, divisor: usize) -> Result<(), SynthError> {
    if size < 32 || !size.is_multiple_of(divisor) {
        return Err(SynthError::BadSize { size, divisor });
    }
    Ok(())
}

/// Generates `n` vessel images of `size`x`size`.
pub fn gen_vessels(n: usize, size: usize, seed: u64) -> Result<Vec<VesselSample>, SynthError> {
    check_size(size, 4)?;
    (0..n).map(|i| gen_vessel(size, seed, i)).collect()
}

fn gen_vessel(size: usize, seed: u64, index: usize) -> Result<VesselSample, SynthError> {
    let mut rng = RngStream::substream(seed, index as u64);
    let plane = size * size;
    for _ in 0..MAX_ATTEMPTS {
        let n_strokes = rng.int_inclusive(3, 6);
        let mut widths = Vec::with_capacity(n_strokes);
        let mut width_map = vec![0u8; plane];
        for s in 0..n_strokes {
            let w = match s {
                0 => rng.int_inclusive(1, THIN_MAX_WIDTH as usize),
                1 => rng.int_inclusive(THICK_MIN_WIDTH as usize, 4),
                _ => rng.int_inclusive(1, 4),
            } as u8;
            widths.push(w);
            draw_stroke(&mut rng, &mut width_map, size, w);
        }
        let fg = width_map.iter().filter(|&&w| w > 0).count();
        let thin = width_map
            .iter()
            .filter(|&&w| w > 0 && w <= THIN_MAX_WIDTH)
            .count();
        let thick = width_map.iter().filter(|&&w| w >= THICK_MIN_WIDTH).count();
        let fraction = fg as f64 / plane as f64;
        if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fraction)
            || thin < size / 2
            || thick < size / 2
        {
            continue;
        }

        let gx = rng.uniform_range(-1.0, 1.0);
        let gy = rng.uniform_range(-1.0, 1.0);
        let mut image = Vec::with_capacity(plane);
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 / size as f64 - 0.5;
                let v = y as f64 / size as f64 - 0.5;
                let mut value = 0.6 + 0.15 * (gx * u + gy * v);
                let w = width_map[y * size + x];
                if w > 0 {
                    value -= vessel_contrast(w);
                }
                value += VESSEL_NOISE_STD * rng.normal();
                image.push(value.clamp(0.0, 1.0));
            }
        }
        let mask = width_map
            .iter()
            .map(|&w| if w > 0 { 1.0 } else { 0.0 })
            .collect();
        return Ok(VesselSample {
            image: Tensor::from_parts(vec![1, size, size], image),
            mask: Tensor::from_parts(vec![1, size, size], mask),
            width_map,
            meta: VesselMeta {
                seed,
                index,
                n_strokes,
                stroke_widths: widths,
                foreground_fraction: fraction,
                thin_pixels: thin,
                thick_pixels: thick,
            },
        });
    }
    Err(SynthError::Exhausted { index })
}

/// A smooth random walk stamping `width`x`width` squares.
fn draw_stroke(rng: &mut RngStream, width_map: &mut [u8], size: usize, width: u8) {
    let s = size as f64;
    let mut x = rng.uniform_range(0.1 * s, 0.9 * s);
    let mut y = rng.uniform_range(0.1 * s, 0.9 * s);
    let mut heading = rng.uniform_range(0.0, std::f64::consts::TAU);
    let mut turn = 0.0;
    let steps = (rng.uniform_range(0.6, 1.4) * s) as usize;
    let w = width as isize;
    let offset = (w - 1) / 2;
    for _ in 0..steps {
        let cx = x.round() as isize - offset;
        let cy = y.round() as isize - offset;
        for dy in 0..w {
            for dx in 0..w {
                let (px, py) = (cx + dx, cy + dy);
                if px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size {
                    let cell = &mut width_map[py as usize * size + px as usize];
                    *cell = (*cell).max(width);
                }
            }
        }
        turn = 0.9 * turn + 0.03 * rng.normal();
        heading += turn;
        x += heading.cos();
        y += heading.sin();
        if x < -1.0 || y < -1.0 || x > s || y > s {
            break;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LesionMode {
    /// Label 1 iff a lesion is present.
    #[default]
    Binary,
    /// Every image has a lesion; the label is its quadrant.
    Quadrant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub center_x: f64,
    pub center_y: f64,
    pub sigma: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMeta {
    pub seed: u64,
    pub index: usize,
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub quadrant: Option<u8>,
    pub blob: Option<BlobParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionSample {
    pub image: Tensor,
    pub label: usize,
    pub meta: LesionMeta,
}

impl LesionSample {
    pub fn example(&self) -> Example {
        Example {
            input: self.image.clone(),
            target: Target::Class(self.label),
        }
    }
}

/// Quadrant of pixel `(x, y)` in a `size`x`size` image.
pub fn quadrant_of(x: usize, y: usize, size: usize) -> u8 {
    let half = size / 2;
    (u8::from(y >= half) << 1) | u8::from(x >= half)
}

/// Boolean mask of one quadrant, row-major.
pub fn quadrant_mask(quadrant: u8, size: usize) -> Vec<bool> {
    (0..size * size)
        .map(|i| quadrant_of(i % size, i / size, size) == quadrant)
        .collect()
}

/// Generates `n` lesion images of `size`x`size` with exact class balance.
pub fn gen_lesions(
    n: usize,
    size: usize,
    mode: LesionMode,
    seed: u64,
) -> Result<Vec<LesionSample>, SynthError> {
    check_size(size, 8)?;
    let mut labels: Vec<usize> = match mode {
        LesionMode::Binary => (0..n).map(|i| usize::from(i < n / 2)).collect(),
        LesionMode::Quadrant => (0..n).map(|i| i % 4).collect(),
    };
    RngStream::derive(seed, &[0x1AB3]).shuffle(&mut labels);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(index, label)| {
            let mut rng = RngStream::substream(seed, index as u64);
            let quadrant = match (mode, label) {
                (LesionMode::Binary, 0) => None,
                (LesionMode::Binary, _) => Some(rng.int_inclusive(0, 3) as u8),
                (LesionMode::Quadrant, q) => Some(q as u8),
            };
            gen_lesion(&mut rng, size, seed, index, label, quadrant)
        })
        .collect())
}

fn gen_lesion(
    rng: &mut RngStream,
    size: usize,
    seed: u64,
    index: usize,
    label: usize,
    quadrant: Option<u8>,
) -> LesionSample {
    let s = size as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_range(0.02, 0.04),
                rng.uniform_range(1.0, 4.0) * std::f64::consts::TAU / s,
                rng.uniform_range(1.0, 4.0) * std::f64::consts::TAU / s,
                rng.uniform_range(0.0, std::f64::consts::TAU),
            )
        })
        .collect();
    let blob = quadrant.map(|q| {
        let half = s / 2.0;
        let sigma = rng.uniform_range(s / 16.0, s / 10.0);
        let margin = sigma.max(1.0);
        let x0 = if q & 1 == 1 { half } else { 0.0 };
        let y0 = if q & 2 == 2 { half } else { 0.0 };
        BlobParams {
            center_x: x0 + rng.uniform_range(margin, half - margin),
            center_y: y0 + rng.uniform_range(margin, half - margin),
            sigma,
            contrast: rng.uniform_range(0.3, 0.5),
        }
    });
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 0.35;
            for &(amp, kx, ky, phase) in &waves {
                v += amp * (kx * fx + ky * fy + phase).sin();
            }
            if let Some(b) = &blob {
                let r2 = (fx - b.center_x).powi(2) + (fy - b.center_y).powi(2);
                v += b.contrast * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            v += 0.03 * rng.normal();
            data.push(v.clamp(0.0, 1.0));
        }
    }
    LesionSample {
        image: Tensor::from_parts(vec![1, size, size], data),
        label,
        meta: LesionMeta {
            seed,
            index,
            quadrant,
            blob,
        },
    }
}
