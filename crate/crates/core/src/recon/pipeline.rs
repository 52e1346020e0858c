use sinodiff_autograd::ParamStore;

use super::{pwls_update, pwls_weights, tv_gradient, tv_seminorm, tv_step, ReconConfig};
use crate::config::RunConfig;
use crate::denoiser::denoise;
use crate::diffusion::{make_schedule, perturb, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::geometry::{check_finite, fbp, forward_project, Image, Sinogram};
use crate::metrics::{compare, Quality};

#[derive(Debug, Clone)]
pub enum ReconInput {
    /// A low-dose image; it is forward projected first.
    Image(Image),
    Sinogram(Sinogram),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostic {
    pub t: usize,
    /// RMS of `x_{t-1} - y`.
    pub fidelity_residual: f64,
    pub tv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconReport {
    /// Against the reference image, when one was given.
    pub quality: Option<Quality>,
    pub steps: Vec<StepDiagnostic>,
}

fn numeric(t: usize, what: &str, s: &Sinogram) -> Result<()> {
    if let Some(i) = s.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            step: t,
            detail: format!("{what} has non-finite value at index {i}"),
        });
    }
    Ok(())
}

/// Runs `t = steps ..= 1` of the correction loop on the measurement `y` and
/// returns `x_0`. `denoise(x_t, t)` is the restoration operator.
pub fn reverse_diffusion(
    y: &Sinogram,
    steps: usize,
    schedule: &DiffusionSchedule,
    photon_count: f64,
    cfg: &ReconConfig,
    mut denoise: impl FnMut(&Sinogram, usize) -> Result<Sinogram>,
) -> Result<(Sinogram, Vec<StepDiagnostic>)> {
    if steps > schedule.steps() {
        return Err(Error::validation(
            "recon.steps",
            format!("{steps} exceeds the schedule length {}", schedule.steps()),
        ));
    }
    let n = y.values().len() as f64;
    let frozen = pwls_weights(y, photon_count, cfg.pwls.eta);
    let mut x = y.clone();
    let mut diagnostics = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let est = denoise(&x, t)?;
        numeric(t, "network estimate", &est)?;
        x = if cfg.pwls.enabled {
            let computed;
            let w = if cfg.pwls.freeze_weights {
                &frozen
            } else {
                computed = pwls_weights(&est, photon_count, cfg.pwls.eta);
                &computed
            };
            let prior = (cfg.pwls.prior_weight > 0.0)
                .then(|| tv_gradient(&est, cfg.tv.epsilon).scaled(cfg.pwls.prior_weight));
            pwls_update(&est, y, w, cfg.pwls.mu, prior.as_ref(), cfg.pwls.mode)?
        } else {
            est
        };
        if cfg.tv.enabled {
            x = tv_step(&x, &cfg.tv);
        }
        if cfg.renoise && t > 1 {
            x = perturb(&x, y, t - 1, schedule)?;
        }
        numeric(t, "corrected estimate", &x)?;
        let r = x.values().iter().zip(y.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        diagnostics.push(StepDiagnostic {
            t,
            fidelity_residual: (r / n).sqrt(),
            tv: tv_seminorm(&x, cfg.tv.epsilon),
        });
    }
    Ok((x, diagnostics))
}

/// Full reconstruction with the trained network in `params`. `photon_count`
/// sets the fidelity weights; `reference` enables the quality report.
pub fn reconstruct(
    input: &ReconInput,
    params: &ParamStore,
    run: &RunConfig,
    photon_count: f64,
    reference: Option<&Image>,
) -> Result<(Image, ReconReport)> {
    let geom = &run.geometry;
    let y = match input {
        ReconInput::Image(img) => {
            check_finite("input", img.pixels())?;
            forward_project(img, geom)?
        }
        ReconInput::Sinogram(s) => {
            check_finite("input", s.values())?;
            s.clone()
        }
    };
    let schedule = make_schedule(run.schedule.steps, run.schedule.kind)?;
    let steps = run.recon.steps.unwrap_or(schedule.steps());
    let (x0, diagnostics) = reverse_diffusion(&y, steps, &schedule, photon_count, &run.recon, |x, t| {
        denoise(x, t, params, &run.denoiser)
    })?;
    let image = fbp(&x0, geom)?;
    let quality = reference.map(|r| compare(r, &image)).transpose()?;
    Ok((
        image,
        ReconReport {
            quality,
            steps: diagnostics,
        },
    ))
}
