use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Sinogram;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PwlsMode {
    /// `x + (W (y - x) - mu g) / (W + mu)`
    #[default]
    Corrected,
    /// `(W (y - x) + mu g) / (W + mu)`
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PwlsConfig {
    pub enabled: bool,
    pub eta: f64,
    pub mu: f64,
    pub mode: PwlsMode,
    /// Scale of the TV subgradient used as the prior gradient; 0 drops it.
    pub prior_weight: f64,
    /// Compute the weights once from the measured data instead of from each
    /// network estimate.
    pub freeze_weights: bool,
}

impl Default for PwlsConfig {
    fn default() -> Self {
        PwlsConfig {
            enabled: true,
            eta: 22000.0,
            mu: 1e5,
            mode: PwlsMode::Corrected,
            prior_weight: 0.0,
            freeze_weights: false,
        }
    }
}

impl PwlsConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::validation(format!("{prefix}.eta"), "must be positive"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::validation(format!("{prefix}.mu"), "must be nonnegative"));
        }
        if !(self.prior_weight >= 0.0 && self.prior_weight.is_finite()) {
            return Err(Error::validation(
                format!("{prefix}.prior_weight"),
                "must be nonnegative",
            ));
        }
        Ok(())
    }
}

/// Inverse-variance weights `I0 * exp(-x / eta)`.
pub fn pwls_weights(x: &Sinogram, i0: f64, eta: f64) -> Sinogram {
    x.map(|v| i0 * (-v / eta).exp())
}

/// One data-consistency update of `x_tilde` toward `y`. `prior` is the
/// prior gradient `g`; `None` means zero.
pub fn pwls_update(
    x_tilde: &Sinogram,
    y: &Sinogram,
    weights: &Sinogram,
    mu: f64,
    prior: Option<&Sinogram>,
    mode: PwlsMode,
) -> Result<Sinogram> {
    let shape = x_tilde.shape();
    for (name, s) in [("y", y), ("weights", weights)] {
        if s.shape() != shape {
            return Err(Error::shape(
                "pwls_update",
                format!("{name} is {:?}, estimate is {shape:?}", s.shape()),
            ));
        }
    }
    if let Some(p) = prior {
        if p.shape() != shape {
            return Err(Error::shape(
                "pwls_update",
                format!("prior gradient is {:?}, estimate is {shape:?}", p.shape()),
            ));
        }
    }
    let n = x_tilde.values().len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = x_tilde.values()[i];
        let w = weights.values()[i];
        let g = prior.map_or(0.0, |p| p.values()[i]);
        let r = w * (y.values()[i] - x);
        out.push(match mode {
            PwlsMode::Corrected => x + (r - mu * g) / (w + mu),
            PwlsMode::Literal => (r + mu * g) / (w + mu),
        });
    }
    Ok(Sinogram::from_raw(shape.0, shape.1, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[f64]) -> Sinogram {
        Sinogram::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn weights_at_zero_and_large_eta() {
        let w = pwls_weights(&s(&[0.0, 1.0, 3.0]), 1e5, 22000.0);
        assert_eq!(w.values()[0], 1e5);
        assert!(w.values().windows(2).all(|p| p[1] <= p[0]));
        let flat = pwls_weights(&s(&[0.5, 2.0, 4.0]), 1e5, 1e12);
        assert!(flat.values().iter().all(|v| ((v - 1e5) / 1e5).abs() < 1e-6));
    }

    #[test]
    fn corrected_mode_limits() {
        let x = s(&[0.3, 1.1, 2.0]);
        let y = s(&[0.5, 0.9, 2.4]);
        let w = pwls_weights(&x, 1e4, 22000.0);
        let out = pwls_update(&x, &y, &w, 0.0, None, PwlsMode::Corrected).unwrap();
        for (a, b) in out.values().iter().zip(y.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        let same = pwls_update(&x, &x, &w, 5e3, None, PwlsMode::Corrected).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn literal_mode_fixture() {
        let out = pwls_update(&s(&[0.5]), &s(&[1.0]), &s(&[2.0]), 1.0, Some(&s(&[0.2])), PwlsMode::Literal).unwrap();
        assert!((out.values()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let r = pwls_update(&s(&[0.0; 3]), &s(&[0.0; 2]), &s(&[1.0; 3]), 1.0, None, PwlsMode::Corrected);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
