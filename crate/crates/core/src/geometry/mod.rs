//! Fan-beam acquisition: phantoms, the Siddon projector, FBP and dose noise.

mod dose;
mod fbp;
mod phantom;
mod siddon;

pub use dose::{simulate_low_dose, DoseModel};
pub use fbp::{fbp, fbp_with, RampWindow};
pub use phantom::{make_phantom, shepp_logan_ellipses, Ellipse, PhantomKind};
pub use siddon::{forward_project, ray_endpoints, siddon_ray, Point};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attenuation grid, row 0 at the top. Values are attenuation per unit
/// pixel length; `pixel_size` records the physical edge length.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixel_size: f64,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, pixel_size: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidSize(format!("image {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::shape(
                "Image::new",
                format!("{} values for {height}x{width}", pixels.len()),
            ));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::validation("pixel_size", format!("{pixel_size}")));
        }
        check_finite("image", &pixels)?;
        Ok(Image {
            height,
            width,
            pixel_size,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, pixel_size: f64) -> Result<Self> {
        Image::new(height, width, vec![0.0; height * width], pixel_size)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn scaled(&self, a: f64) -> Image {
        Image {
            pixels: self.pixels.iter().map(|v| v * a).collect(),
            ..self.clone()
        }
    }
}

/// Line integrals indexed `[view, detector]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    n_views: usize,
    n_detectors: usize,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_views: usize, n_detectors: usize, values: Vec<f64>) -> Result<Self> {
        if n_views == 0 || n_detectors == 0 {
            return Err(Error::InvalidSize(format!(
                "sinogram {n_views}x{n_detectors}"
            )));
        }
        if values.len() != n_views * n_detectors {
            return Err(Error::shape(
                "Sinogram::new",
                format!("{} values for {n_views}x{n_detectors}", values.len()),
            ));
        }
        check_finite("sinogram", &values)?;
        Ok(Sinogram {
            n_views,
            n_detectors,
            values,
        })
    }

    pub fn zeros(n_views: usize, n_detectors: usize) -> Result<Self> {
        Sinogram::new(n_views, n_detectors, vec![0.0; n_views * n_detectors])
    }

    /// Skips the finiteness scan; used for intermediate results that are
    /// checked by the caller.
    pub(crate) fn from_raw(n_views: usize, n_detectors: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n_views * n_detectors);
        Sinogram {
            n_views,
            n_detectors,
            values,
        }
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_views, self.n_detectors)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, view: usize, det: usize) -> f64 {
        self.values[view * self.n_detectors + det]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn scaled(&self, a: f64) -> Sinogram {
        self.map(|v| v * a)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Sinogram {
        Sinogram::from_raw(
            self.n_views,
            self.n_detectors,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Element-wise `f(self, other)`.
    pub fn zip_with(&self, other: &Sinogram, f: impl Fn(f64, f64) -> f64) -> Result<Sinogram> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "sinogram",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Sinogram::from_raw(
            self.n_views,
            self.n_detectors,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Sinogram) -> Result<Sinogram> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Sinogram) -> Result<Sinogram> {
        self.zip_with(other, |a, b| a - b)
    }
}

pub(crate) fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::validation(
            what,
            format!("non-finite value {} at index {i}", values[i]),
        )),
    }
}

/// Flat-detector fan-beam geometry. Lengths share one unit (cm by
/// convention). The square image is inscribed in the field-of-view circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanGeometry {
    pub image_size: usize,
    pub source_to_center: f64,
    pub center_to_detector: f64,
    pub detector_width: f64,
    pub n_detectors: usize,
    pub n_views: usize,
    pub angular_range: f64,
}

impl Default for FanGeometry {
    fn default() -> Self {
        FanGeometry::desk()
    }
}

impl FanGeometry {
    /// 720 detectors over 41.3 cm, 360 views, source and detector 40 cm
    /// from the rotation centre.
    pub fn full_scale() -> Self {
        FanGeometry {
            image_size: 512,
            source_to_center: 40.0,
            center_to_detector: 40.0,
            detector_width: 41.3,
            n_detectors: 720,
            n_views: 360,
            angular_range: std::f64::consts::TAU,
        }
    }

    /// Same distances with 64x64 pixels, 180 views and 128 detectors.
    pub fn desk() -> Self {
        FanGeometry {
            image_size: 64,
            n_detectors: 128,
            n_views: 180,
            ..FanGeometry::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(
                    format!("geometry.{field}"),
                    format!("must be positive and finite, got {v}"),
                ))
            }
        };
        positive("source_to_center", self.source_to_center)?;
        positive("detector_width", self.detector_width)?;
        positive("angular_range", self.angular_range)?;
        if !(self.center_to_detector >= 0.0 && self.center_to_detector.is_finite()) {
            return Err(Error::validation(
                "geometry.center_to_detector",
                format!("must be nonnegative, got {}", self.center_to_detector),
            ));
        }
        for (field, v) in [
            ("image_size", self.image_size),
            ("n_detectors", self.n_detectors),
            ("n_views", self.n_views),
        ] {
            if v == 0 {
                return Err(Error::validation(
                    format!("geometry.{field}"),
                    "must be at least 1",
                ));
            }
        }
        Ok(())
    }

    pub fn source_to_detector(&self) -> f64 {
        self.source_to_center + self.center_to_detector
    }

    /// Radius of the circle covered by every view.
    pub fn fov_radius(&self) -> f64 {
        let half_fan = (0.5 * self.detector_width / self.source_to_detector()).atan();
        self.source_to_center * half_fan.sin()
    }

    pub fn pixel_size(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.fov_radius() / self.image_size as f64
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        view as f64 * self.angular_range / self.n_views as f64
    }

    /// Detector-cell centre offset from the central ray, physical units.
    pub fn detector_offset(&self, det: usize) -> f64 {
        let du = self.detector_width / self.n_detectors as f64;
        (det as f64 - 0.5 * (self.n_detectors as f64 - 1.0)) * du
    }

    pub fn empty_image(&self) -> Image {
        let n = self.image_size;
        Image {
            height: n,
            width: n,
            pixel_size: self.pixel_size(),
            pixels: vec![0.0; n * n],
        }
    }
}
