//! Image quality metrics.

use crate::error::{Error, Result};
use crate::geometry::Image;

pub const PSNR_CAP: f64 = 99.0;

fn same_shape(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ok(())
}

fn check_range(op: &'static str, data_range: f64) -> Result<()> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::domain(op, format!("data_range must be positive, got {data_range}")));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape("mse", a, b)?;
    let n = a.pixels().len() as f64;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10 log10(range^2 / mse)`, capped at 99 dB for `mse < 1e-12`.
pub fn psnr(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    check_range("psnr", data_range)?;
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP))
}

/// Max minus min of the reference image.
pub fn data_range(reference: &Image) -> f64 {
    let p = reference.pixels();
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

/// Normalised Gaussian window of odd `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5,
/// K1 0.01, K2 0.03). Images smaller than 11 use the largest odd window
/// that fits.
pub fn ssim(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    same_shape("ssim", a, b)?;
    check_range("ssim", data_range)?;
    let (h, w) = (a.height(), a.width());
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size, 1.5);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let (x, y) = (a.pixels(), b.pixels());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - size {
        for j in 0..=w - size {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..size {
                for v in 0..size {
                    let k = (i + u) * w + j + v;
                    let g = win[u * size + v];
                    mx += g * x[k];
                    my += g * y[k];
                    xx += g * x[k] * x[k];
                    yy += g * y[k] * y[k];
                    xy += g * x[k] * y[k];
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

/// All three metrics of `test` against `reference`, using the reference's
/// dynamic range.
pub fn compare(reference: &Image, test: &Image) -> Result<Quality> {
    let range = data_range(reference);
    let range = if range > 0.0 { range } else { 1.0 };
    Ok(Quality {
        psnr: psnr(reference, test, range)?,
        ssim: ssim(reference, test, range)?,
        mse: mse(reference, test)?,
    })
}
