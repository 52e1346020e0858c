use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Image, Sinogram};

/// A 2-D field with row-major values.
pub trait Field {
    fn dims(&self) -> (usize, usize);
    fn values(&self) -> &[f64];
}

impl Field for Sinogram {
    fn dims(&self) -> (usize, usize) {
        self.shape()
    }
    fn values(&self) -> &[f64] {
        Sinogram::values(self)
    }
}

impl Field for Image {
    fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
    fn values(&self) -> &[f64] {
        self.pixels()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvConfig {
    pub enabled: bool,
    /// Length of each normalised descent step.
    pub step: f64,
    pub iterations: usize,
    pub epsilon: f64,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            enabled: true,
            step: 0.003,
            iterations: 1,
            epsilon: 1e-3,
        }
    }
}

impl TvConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return Err(Error::validation(format!("{prefix}.step"), "must be nonnegative"));
        }
        if self.iterations < 1 {
            return Err(Error::validation(format!("{prefix}.iterations"), "must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::validation(format!("{prefix}.epsilon"), "must be positive"));
        }
        Ok(())
    }
}

/// Forward differences with a replicated last row and column.
#[inline]
fn diffs(x: &[f64], h: usize, w: usize, i: usize, j: usize) -> (f64, f64) {
    let v = x[i * w + j];
    let dh = if i + 1 < h { x[(i + 1) * w + j] - v } else { 0.0 };
    let dw = if j + 1 < w { x[i * w + j + 1] - v } else { 0.0 };
    (dh, dw)
}

/// `sum sqrt(dh^2 + dw^2 + eps^2) - eps` over all sites.
pub fn tv_seminorm_raw(x: &[f64], h: usize, w: usize, eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (dh, dw) = diffs(x, h, w, i, j);
            total += (dh * dh + dw * dw + eps * eps).sqrt() - eps;
        }
    }
    total
}

pub fn tv_gradient_raw(x: &[f64], h: usize, w: usize, eps: f64) -> Vec<f64> {
    let mut g = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (dh, dw) = diffs(x, h, w, i, j);
            let phi = (dh * dh + dw * dw + eps * eps).sqrt();
            g[i * w + j] -= (dh + dw) / phi;
            if i + 1 < h {
                g[(i + 1) * w + j] += dh / phi;
            }
            if j + 1 < w {
                g[i * w + j + 1] += dw / phi;
            }
        }
    }
    g
}

pub fn tv_seminorm<F: Field>(x: &F, eps: f64) -> f64 {
    let (h, w) = x.dims();
    tv_seminorm_raw(x.values(), h, w, eps)
}

pub fn tv_gradient(x: &Sinogram, eps: f64) -> Sinogram {
    let (h, w) = x.shape();
    Sinogram::from_raw(h, w, tv_gradient_raw(x.values(), h, w, eps))
}

/// `cfg.iterations` steps of `x <- x - step * g / |g|`.
pub fn tv_step(x: &Sinogram, cfg: &TvConfig) -> Sinogram {
    let (h, w) = x.shape();
    let mut v = x.values().to_vec();
    for _ in 0..cfg.iterations {
        let g = tv_gradient_raw(&v, h, w, cfg.epsilon);
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 && cfg.step > 0.0 {
            let s = cfg.step / norm;
            for (a, b) in v.iter_mut().zip(&g) {
                *a -= s * b;
            }
        }
    }
    Sinogram::from_raw(h, w, v)
}
