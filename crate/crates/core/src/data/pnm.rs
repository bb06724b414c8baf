//! Binary PGM (P5) and PPM (P6) with maxval 255.
//!
//! Writers emit `P5\n<w> <h>\n255\n` followed by raw bytes and never write
//! comments. Readers accept `#` comments and any whitespace between header
//! tokens, and exactly one whitespace byte after the maxval.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("bad magic number: expected {expected}, found {found:?}")]
    BadMagicNumber {
        expected: &'static str,
        found: String,
    },
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    BadMaxval(u32),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    TruncatedPixelData { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("image tensor must be {expected}, got shape {shape:?}")]
    Shape {
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `round(x * 255)` with halves rounded up, clamped to `[0, 255]`.
pub fn quantize(x: f64) -> u8 {
    (x * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn dequantize(byte: u8) -> f64 {
    f64::from(byte) / 255.0
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &'static str) -> Result<Header, PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(PnmError::BadMagicNumber {
            expected: magic,
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::Header(format!(
                "expected a decimal number at byte {start}"
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| PnmError::Header(format!("{e}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PnmError::Header("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PnmError::BadMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(PnmError::Header(format!(
            "zero image dimension {width}x{height}"
        )));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        data_offset: pos,
    })
}

fn pixel_bytes<'a>(
    bytes: &'a [u8],
    header: &Header,
    channels: usize,
) -> Result<&'a [u8], PnmError> {
    let expected = header.width * header.height * channels;
    let found = bytes.len() - header.data_offset;
    if found < expected {
        return Err(PnmError::TruncatedPixelData { expected, found });
    }
    Ok(&bytes[header.data_offset..header.data_offset + expected])
}

/// Decodes a P5 file into a `[1,H,W]` tensor in `[0,1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor, PnmError> {
    let header = parse_header(bytes, "P5")?;
    let pixels = pixel_bytes(bytes, &header, 1)?;
    Ok(Tensor::from_parts(
        vec![1, header.height, header.width],
        pixels.iter().map(|&b| dequantize(b)).collect(),
    ))
}

/// Encodes a `[1,H,W]` or `[H,W]` tensor.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>, PnmError> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => {
            return Err(PnmError::Shape {
                expected: "[1,H,W] or [H,W]",
                shape: image.shape().to_vec(),
            })
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Decodes a P6 file into a planar `[3,H,W]` tensor in `[0,1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, PnmError> {
    let header = parse_header(bytes, "P6")?;
    let pixels = pixel_bytes(bytes, &header, 3)?;
    let plane = header.width * header.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, rgb) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = dequantize(rgb[c]);
        }
    }
    Ok(Tensor::from_parts(
        vec![3, header.height, header.width],
        data,
    ))
}

/// Encodes a planar `[3,H,W]` tensor.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>, PnmError> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(PnmError::Shape {
                expected: "[3,H,W]",
                shape: image.shape().to_vec(),
            })
        }
    };
    let plane = h * w;
    let data = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(data[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor, PnmError> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<(), PnmError> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor, PnmError> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<(), PnmError> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}
