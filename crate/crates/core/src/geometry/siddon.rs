use super::{FanGeometry, Image, Sinogram};
use crate::error::{Error, Result};

/// Position in pixel units with the origin at the image centre, `x` to the
/// right and `y` up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Source point and detector-cell centre for one ray, in pixel units.
pub fn ray_endpoints(geom: &FanGeometry, view: usize, det: usize) -> (Point, Point) {
    let ps = geom.pixel_size();
    let (sin_b, cos_b) = geom.view_angle(view).sin_cos();
    let d_src = geom.source_to_center / ps;
    let d_det = geom.center_to_detector / ps;
    let u = geom.detector_offset(det) / ps;
    let source = Point {
        x: d_src * cos_b,
        y: d_src * sin_b,
    };
    let cell = Point {
        x: -d_det * cos_b - u * sin_b,
        y: -d_det * sin_b + u * cos_b,
    };
    (source, cell)
}

fn plane_crossings(p: f64, d: f64, lo: f64, count: usize, a_min: f64, a_max: f64) -> Vec<f64> {
    if d == 0.0 {
        return Vec::new();
    }
    let mut out: Vec<f64> = (0..=count)
        .map(|i| (lo + i as f64 - p) / d)
        .filter(|&a| a > a_min && a < a_max)
        .collect();
    if d < 0.0 {
        out.reverse();
    }
    out
}

/// Siddon traversal of the segment `p1 -> p2` through a `height x width`
/// grid of unit pixels. Calls `visit(flat_index, length)` for each pixel
/// crossed, in order along the ray.
pub fn siddon_ray(height: usize, width: usize, p1: Point, p2: Point, mut visit: impl FnMut(usize, f64)) {
    let dx = p2.x - p1.x;
    let dy = p2.y - p1.y;
    let length = dx.hypot(dy);
    let x_lo = -0.5 * width as f64;
    let y_lo = -0.5 * height as f64;
    let y_hi = -y_lo;

    let mut a_min = 0.0f64;
    let mut a_max = 1.0f64;
    for (p, d, lo) in [(p1.x, dx, x_lo), (p1.y, dy, y_lo)] {
        let hi = -lo;
        if d != 0.0 {
            let a0 = (lo - p) / d;
            let a1 = (hi - p) / d;
            a_min = a_min.max(a0.min(a1));
            a_max = a_max.min(a0.max(a1));
        } else if p <= lo || p >= hi {
            return;
        }
    }
    if a_max <= a_min {
        return;
    }

    let ax = plane_crossings(p1.x, dx, x_lo, width, a_min, a_max);
    let ay = plane_crossings(p1.y, dy, y_lo, height, a_min, a_max);
    let mut alphas = Vec::with_capacity(ax.len() + ay.len() + 2);
    alphas.push(a_min);
    let (mut i, mut j) = (0, 0);
    while i < ax.len() || j < ay.len() {
        if j == ay.len() || (i < ax.len() && ax[i] <= ay[j]) {
            alphas.push(ax[i]);
            i += 1;
        } else {
            alphas.push(ay[j]);
            j += 1;
        }
    }
    alphas.push(a_max);

    for pair in alphas.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let x = p1.x + mid * dx;
        let y = p1.y + mid * dy;
        let col = ((x - x_lo).floor() as isize).clamp(0, width as isize - 1) as usize;
        let row = ((y_hi - y).floor() as isize).clamp(0, height as isize - 1) as usize;
        visit(row * width + col, (b - a) * length);
    }
}

/// Ray-driven projection, one ray per detector cell.
pub fn forward_project(img: &Image, geom: &FanGeometry) -> Result<Sinogram> {
    geom.validate()?;
    let n = geom.image_size;
    if img.height() != n || img.width() != n {
        return Err(Error::shape(
            "forward_project",
            format!(
                "image is {}x{}, geometry expects {n}x{n}",
                img.height(),
                img.width()
            ),
        ));
    }
    let pixels = img.pixels();
    let mut values = Vec::with_capacity(geom.n_views * geom.n_detectors);
    for view in 0..geom.n_views {
        for det in 0..geom.n_detectors {
            let (src, cell) = ray_endpoints(geom, view, det);
            let mut acc = 0.0;
            siddon_ray(n, n, src, cell, |idx, len| acc += len * pixels[idx]);
            values.push(acc);
        }
    }
    Ok(Sinogram::from_raw(geom.n_views, geom.n_detectors, values))
}
