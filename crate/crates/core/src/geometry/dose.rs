use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::Sinogram;
use crate::error::{Error, Result};

/// Incident photon count per ray and optional Gaussian read noise.
/// An infinite `photon_count` disables noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseModel {
    pub photon_count: f64,
    #[serde(default)]
    pub electronic_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DoseModel {
    fn default() -> Self {
        DoseModel {
            photon_count: 1e5,
            electronic_sigma: 0.0,
            seed: 0,
        }
    }
}

impl DoseModel {
    pub fn new(photon_count: f64, seed: u64) -> Self {
        DoseModel {
            photon_count,
            electronic_sigma: 0.0,
            seed,
        }
    }

    pub fn noiseless() -> Self {
        DoseModel::new(f64::INFINITY, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.photon_count > 0.0) {
            return Err(Error::validation(
                "dose.photon_count",
                format!("must be positive, got {}", self.photon_count),
            ));
        }
        if !(self.electronic_sigma >= 0.0 && self.electronic_sigma.is_finite()) {
            return Err(Error::validation(
                "dose.electronic_sigma",
                format!("must be nonnegative, got {}", self.electronic_sigma),
            ));
        }
        Ok(())
    }
}

/// Log-transformed Poisson (plus Gaussian) measurement of each line
/// integral. Entries are drawn in row-major order from one ChaCha8 stream.
pub fn simulate_low_dose(sino: &Sinogram, dose: &DoseModel) -> Result<Sinogram> {
    dose.validate()?;
    let i0 = dose.photon_count;
    if i0.is_infinite() {
        return Ok(sino.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dose.seed);
    let read_noise = if dose.electronic_sigma > 0.0 {
        Some(Normal::new(0.0, dose.electronic_sigma).expect("validated sigma"))
    } else {
        None
    };
    let values = sino
        .values()
        .iter()
        .map(|&x| {
            let lambda = i0 * (-x).exp();
            let mut counts = if lambda > 0.0 && lambda.is_finite() {
                Poisson::new(lambda).expect("positive rate").sample(&mut rng)
            } else {
                0.0
            };
            if let Some(n) = &read_noise {
                counts += n.sample(&mut rng);
            }
            -(counts.max(1.0) / i0).ln()
        })
        .collect();
    Sinogram::new(sino.n_views(), sino.n_detectors(), values)
}
