//! Reverse diffusion with data-consistency and TV correction, then FBP.

mod pipeline;
mod pwls;
mod tv;

pub use pipeline::{
    reconstruct, reverse_diffusion, ReconInput, ReconReport, StepDiagnostic,
};
pub use pwls::{pwls_update, pwls_weights, PwlsConfig, PwlsMode};
pub use tv::{
    tv_gradient, tv_gradient_raw, tv_seminorm, tv_seminorm_raw, tv_step, Field, TvConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub pwls: PwlsConfig,
    pub tv: TvConfig,
    /// Re-perturb each estimate toward the measurement at level `t - 1`.
    pub renoise: bool,
    /// Reverse steps to run, starting from `steps` down to 1. Defaults to the
    /// schedule length; 0 gives plain FBP.
    pub steps: Option<usize>,
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        self.pwls.validate("recon.pwls")?;
        self.tv.validate("recon.tv")
    }
}
