use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{FanGeometry, Image, Sinogram};
use crate::error::{Error, Result};

/// Apodisation applied on top of the ramp.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampWindow {
    /// Raised cosine, zero at Nyquist.
    #[default]
    Hann,
    None,
}

/// Frequency response of the band-limited ramp (spatial Ram-Lak kernel of
/// spacing `ds`, transformed), multiplied by the window.
fn ramp_response(n: usize, padded: usize, ds: f64, window: RampWindow) -> Vec<Complex<f64>> {
    let mut kernel = vec![Complex::new(0.0, 0.0); padded];
    kernel[0].re = 1.0 / (4.0 * ds * ds);
    for k in (1..n).step_by(2) {
        let v = -1.0 / (PI * PI * (k * k) as f64 * ds * ds);
        kernel[k].re = v;
        kernel[padded - k].re = v;
    }
    let fft = FftPlanner::new().plan_fft_forward(padded);
    fft.process(&mut kernel);
    for (i, h) in kernel.iter_mut().enumerate() {
        let f = i.min(padded - i) as f64 / padded as f64;
        let w = match window {
            RampWindow::Hann => 0.5 * (1.0 + (2.0 * PI * f).cos()),
            RampWindow::None => 1.0,
        };
        *h = Complex::new(h.re * w, 0.0);
    }
    kernel
}

pub fn fbp(sino: &Sinogram, geom: &FanGeometry) -> Result<Image> {
    fbp_with(sino, geom, RampWindow::Hann)
}

/// Equal-spaced fan-beam FBP for a full rotation: cosine pre-weighting,
/// ramp filtering along the detector, `1/U^2` weighted back-projection.
/// Works in pixel units, so a reconstruction of `forward_project(img)`
/// approximates `img`.
pub fn fbp_with(sino: &Sinogram, geom: &FanGeometry, window: RampWindow) -> Result<Image> {
    geom.validate()?;
    if sino.shape() != (geom.n_views, geom.n_detectors) {
        return Err(Error::shape(
            "fbp",
            format!(
                "sinogram is {:?}, geometry expects ({}, {})",
                sino.shape(),
                geom.n_views,
                geom.n_detectors
            ),
        ));
    }
    let ps = geom.pixel_size();
    let d = geom.source_to_center / ps;
    let mag = geom.source_to_center / geom.source_to_detector();
    let nd = geom.n_detectors;
    let centre = 0.5 * (nd as f64 - 1.0);
    // detector sampling rescaled to the isocentre
    let ds = geom.detector_width / nd as f64 / ps * mag;

    let padded = (2 * nd).next_power_of_two();
    let response = ramp_response(nd, padded, ds, window);
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(padded);
    let inverse = planner.plan_fft_inverse(padded);
    let scale = 0.5 * ds / padded as f64;

    let cos_weight: Vec<f64> = (0..nd)
        .map(|j| {
            let s = (j as f64 - centre) * ds;
            d / (d * d + s * s).sqrt()
        })
        .collect();

    let mut filtered = vec![0.0; geom.n_views * nd];
    let mut buf = vec![Complex::new(0.0, 0.0); padded];
    for v in 0..geom.n_views {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for j in 0..nd {
            buf[j].re = sino.get(v, j) * cos_weight[j];
        }
        forward.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&response) {
            *b *= h.re;
        }
        inverse.process(&mut buf);
        for j in 0..nd {
            filtered[v * nd + j] = buf[j].re * scale;
        }
    }

    let n = geom.image_size;
    let half = 0.5 * n as f64;
    let dbeta = geom.angular_range / geom.n_views as f64;
    let trig: Vec<(f64, f64)> = (0..geom.n_views)
        .map(|v| geom.view_angle(v).sin_cos())
        .collect();
    let mut pixels = vec![0.0; n * n];
    for r in 0..n {
        let y = half - r as f64 - 0.5;
        for c in 0..n {
            let x = c as f64 - half + 0.5;
            let mut acc = 0.0;
            for (v, &(sin_b, cos_b)) in trig.iter().enumerate() {
                let l = d - (x * cos_b + y * sin_b);
                let t = -x * sin_b + y * cos_b;
                let s = t * d / l;
                let pos = s / ds + centre;
                if pos < 0.0 || pos > (nd - 1) as f64 {
                    continue;
                }
                let j0 = (pos.floor() as usize).min(nd - 1);
                let frac = pos - j0 as f64;
                let row = &filtered[v * nd..(v + 1) * nd];
                let q = if j0 + 1 < nd {
                    row[j0] * (1.0 - frac) + row[j0 + 1] * frac
                } else {
                    row[j0]
                };
                let u = l / d;
                acc += q / (u * u);
            }
            pixels[r * n + c] = acc * dbeta;
        }
    }
    Image::new(n, n, pixels, ps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FanGeometry {
        FanGeometry {
            image_size: 16,
            n_views: 24,
            n_detectors: 32,
            ..FanGeometry::desk()
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let g = small();
        let img = fbp(&Sinogram::zeros(24, 32).unwrap(), &g).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let g = small();
        assert!(matches!(
            fbp(&Sinogram::zeros(24, 31).unwrap(), &g),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn unwindowed_ramp_dc_is_zero_and_grows() {
        let h = ramp_response(32, 64, 1.0, RampWindow::None);
        // discrete Ram-Lak has a small positive DC from kernel truncation
        assert!(h[0].re.abs() < 0.02);
        assert!(h[16].re > h[4].re && h[32].re > h[16].re);
        assert!((h[32].re - 0.5).abs() < 0.02);
    }
}
