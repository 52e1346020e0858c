//! Gaussian Fourier-mask split of a sinogram into low and high bands.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::{check_finite, Sinogram};

/// Gains in DFT order (bin 0 is DC).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMask {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub gains: Vec<f64>,
}

impl SpectrumMask {
    pub fn gain(&self, ku: usize, kv: usize) -> f64 {
        self.gains[ku * self.width + kv]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTriple {
    pub low: Sinogram,
    pub high: Sinogram,
    pub full: Sinogram,
}

/// Normalised frequency of DFT bin `k` out of `n`, in `[-0.5, 0.5)`.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    if 2 * k < n {
        k as f64 / n as f64
    } else {
        (k as f64 - n as f64) / n as f64
    }
}

pub fn gaussian_mask(height: usize, width: usize, sigma: f64) -> Result<SpectrumMask> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidSize(format!("mask {height}x{width}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(
            "gaussian_mask",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    let mut gains = Vec::with_capacity(height * width);
    for ku in 0..height {
        let fu = bin_frequency(ku, height);
        for kv in 0..width {
            let fv = bin_frequency(kv, width);
            gains.push((-(fu * fu + fv * fv) / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(SpectrumMask {
        height,
        width,
        sigma,
        gains,
    })
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = data[r * w + c];
        }
        col.process(&mut column);
        for r in 0..h {
            data[r * w + c] = column[r];
        }
    }
}

/// Real part of `IDFT(DFT(x) * mask)`; unnormalised forward, `1/(hw)` inverse.
pub fn apply_mask(values: &[f64], mask: &SpectrumMask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    debug_assert_eq!(values.len(), h * w);
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut buf, h, w, false);
    for (b, g) in buf.iter_mut().zip(&mask.gains) {
        *b *= *g;
    }
    fft2(&mut buf, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    buf.iter().map(|c| c.re * norm).collect()
}

/// `low` is the Gaussian low-pass of `x`, `high = x - low`, `full = x`.
pub fn decompose(x: &Sinogram, sigma: f64) -> Result<FrequencyTriple> {
    check_finite("sinogram", x.values())?;
    let (h, w) = x.shape();
    let mask = gaussian_mask(h, w, sigma)?;
    let low = apply_mask(x.values(), &mask);
    let high: Vec<f64> = x.values().iter().zip(&low).map(|(a, b)| a - b).collect();
    Ok(FrequencyTriple {
        low: Sinogram::from_raw(h, w, low),
        high: Sinogram::from_raw(h, w, high),
        full: x.clone(),
    })
}
