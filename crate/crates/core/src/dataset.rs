//! Simulated paired clean/low-dose sinograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    fbp, forward_project, make_phantom, simulate_low_dose, DoseModel, FanGeometry, Image,
    PhantomKind, Sinogram,
};
use crate::seeds::derive_seed;

/// Index of the first held-out phantom; training pairs use `0..n_pairs`.
pub const HELDOUT_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    /// Attenuation (1/cm) of a phantom value of 1.
    pub mu_per_cm: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            kind: PhantomKind::RandomEllipses,
            mu_per_cm: 0.4,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_per_cm > 0.0 && self.mu_per_cm.is_finite()) {
            return Err(Error::validation("phantom.mu_per_cm", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Attenuation per pixel length.
    pub phantom: Image,
    pub clean: Sinogram,
    pub noisy: Sinogram,
}

impl TrainingPair {
    /// FBP of the clean sinogram, the reference for image metrics.
    pub fn reference(&self, geom: &FanGeometry) -> Result<Image> {
        fbp(&self.clean, geom)
    }
}

/// Phantom `index` scaled to attenuation per pixel.
pub fn phantom_image(
    geom: &FanGeometry,
    phantom: &PhantomConfig,
    seed: u64,
    index: u64,
) -> Result<Image> {
    let img = make_phantom(
        phantom.kind,
        geom.image_size,
        derive_seed(seed, "phantom", index),
    )?;
    let scale = phantom.mu_per_cm * geom.pixel_size();
    Image::new(
        img.height(),
        img.width(),
        img.pixels().iter().map(|v| v * scale).collect(),
        geom.pixel_size(),
    )
}

/// Pair `index` of the stream keyed on `seed`. The photon noise uses its own
/// derived seed; `photon_count` overrides the dose model's count.
pub fn make_pair(
    geom: &FanGeometry,
    phantom: &PhantomConfig,
    photon_count: f64,
    electronic_sigma: f64,
    seed: u64,
    index: u64,
) -> Result<TrainingPair> {
    let img = phantom_image(geom, phantom, seed, index)?;
    let clean = forward_project(&img, geom)?;
    let dose = DoseModel {
        photon_count,
        electronic_sigma,
        seed: derive_seed(seed, "dose", index),
    };
    let noisy = simulate_low_dose(&clean, &dose)?;
    Ok(TrainingPair {
        phantom: img,
        clean,
        noisy,
    })
}

pub fn make_pairs(
    geom: &FanGeometry,
    phantom: &PhantomConfig,
    photon_count: f64,
    electronic_sigma: f64,
    seed: u64,
    range: std::ops::Range<u64>,
) -> Result<Vec<TrainingPair>> {
    range
        .map(|i| make_pair(geom, phantom, photon_count, electronic_sigma, seed, i))
        .collect()
}
