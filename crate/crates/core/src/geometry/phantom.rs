use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

/// Ellipse on the normalised square `[-1, 1]^2`, `phi` in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    pub phi: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi.to_radians().sin_cos();
        let dx = x - self.x0;
        let dy = y - self.y0;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Modified (high contrast) Shepp-Logan head.
pub fn shepp_logan_ellipses() -> [Ellipse; 10] {
    let e = |intensity, a, b, x0, y0, phi| Ellipse {
        intensity,
        a,
        b,
        x0,
        y0,
        phi,
    };
    [
        e(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        e(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
        e(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
        e(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
        e(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
        e(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
        e(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
        e(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
        e(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
        e(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
    ]
}

fn random_ellipses(seed: u64) -> Vec<Ellipse> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body_a = rng.random_range(0.65..0.85);
    let body_b = rng.random_range(0.65..0.85);
    let mut out = vec![Ellipse {
        intensity: rng.random_range(0.35..0.6),
        a: body_a,
        b: body_b,
        x0: rng.random_range(-0.05..0.05),
        y0: rng.random_range(-0.05..0.05),
        phi: rng.random_range(-30.0..30.0),
    }];
    let n_inner = rng.random_range(4..=8);
    for _ in 0..n_inner {
        let r = rng.random_range(0.0..0.6f64);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let magnitude = rng.random_range(0.05..0.4);
        let sign = if rng.random_bool(0.6) { 1.0 } else { -1.0 };
        out.push(Ellipse {
            intensity: sign * magnitude,
            a: rng.random_range(0.04..0.25),
            b: rng.random_range(0.04..0.25),
            x0: r * body_a * theta.cos(),
            y0: r * body_b * theta.sin(),
            phi: rng.random_range(0.0..180.0),
        });
    }
    out
}

/// Point-sampled `n x n` phantom, clamped to `[0, 1]`. Pixel centres sit at
/// `x = (c + 0.5) * 2/n - 1`, `y = 1 - (r + 0.5) * 2/n`.
pub fn make_phantom(kind: PhantomKind, n: usize, seed: u64) -> Result<Image> {
    if n < 8 {
        return Err(Error::InvalidSize(format!(
            "phantom size must be at least 8, got {n}"
        )));
    }
    let ellipses = match kind {
        PhantomKind::SheppLogan => shepp_logan_ellipses().to_vec(),
        PhantomKind::RandomEllipses => random_ellipses(seed),
    };
    let step = 2.0 / n as f64;
    let mut pixels = Vec::with_capacity(n * n);
    for r in 0..n {
        let y = 1.0 - (r as f64 + 0.5) * step;
        for c in 0..n {
            let x = (c as f64 + 0.5) * step - 1.0;
            let v: f64 = ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.intensity)
                .sum();
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(n, n, pixels, 1.0)
}
