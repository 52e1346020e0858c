//! Flat binary tensor files and 8-bit previews.
//!
//! A tensor file is the magic `SNDFTNSR`, a `u32` version and a `u32` kind
//! (0 sinogram, 1 image), then the row and column counts as `u64` and the
//! row-major values as `f32`, all little-endian.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Image, Sinogram};

pub const MAGIC: &[u8; 8] = b"SNDFTNSR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Sinogram = 0,
    Image = 1,
}

pub fn encode(kind: TensorKind, rows: usize, cols: usize, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Returns `(rows, cols, values)`.
pub fn decode(bytes: &[u8], kind: TensorKind, path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |reason: String| Error::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a tensor file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if word(12) != kind as u32 {
        return Err(bad(format!("expected a {kind:?} tensor, found kind {}", word(12))));
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes")) as usize;
    let (rows, cols) = (dim(16), dim(24));
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.checked_mul(4).map(|b| b + 32) == Some(bytes.len()))
        .ok_or_else(|| bad(format!("{rows}x{cols} does not match {} payload bytes", bytes.len() - 32)))?;
    let values = bytes[32..]
        .chunks_exact(4)
        .take(n)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok((rows, cols, values))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    write(path, &encode(TensorKind::Sinogram, s.n_views(), s.n_detectors(), s.values()))
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (r, c, v) = decode(&bytes, TensorKind::Sinogram, path)?;
    Sinogram::new(r, c, v)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write(path, &encode(TensorKind::Image, img.height(), img.width(), img.pixels()))
}

/// The file does not carry the pixel size.
pub fn read_image(path: &Path, pixel_size: f64) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (r, c, v) = decode(&bytes, TensorKind::Image, path)?;
    Image::new(r, c, v, pixel_size)
}

/// Linear map of `[lo, hi]` onto `0..=255`. `None` uses the data range.
pub fn to_gray(values: &[f64], window: Option<(f64, f64)>) -> Vec<u8> {
    let (lo, hi) = window.unwrap_or_else(|| {
        values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .map(|v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn write_png(path: &Path, rows: usize, cols: usize, values: &[f64], window: Option<(f64, f64)>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(to_io)?;
    w.write_image_data(&to_gray(values, window)).map_err(to_io)?;
    w.finish().map_err(to_io)
}

/// Binary (P5) PGM.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64], window: Option<(f64, f64)>) -> Result<()> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(to_gray(values, window));
    write(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_f32() {
        let s = Sinogram::new(3, 5, (0..15).map(|i| i as f64 * 0.25).collect()).unwrap();
        let bytes = encode(TensorKind::Sinogram, 3, 5, s.values());
        assert_eq!(bytes.len(), 32 + 60);
        let (r, c, v) = decode(&bytes, TensorKind::Sinogram, "m".as_ref()).unwrap();
        assert_eq!((r, c), (3, 5));
        assert_eq!(v, s.values());
        assert!(decode(&bytes, TensorKind::Image, "m".as_ref()).is_err());
        assert!(matches!(decode(&bytes[..40], TensorKind::Sinogram, "m".as_ref()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn gray_window() {
        assert_eq!(to_gray(&[0.0, 0.5, 1.0, 2.0], Some((0.0, 1.0))), vec![0, 128, 255, 255]);
        assert_eq!(to_gray(&[3.0, 3.0], None), vec![0, 0]);
    }
}
