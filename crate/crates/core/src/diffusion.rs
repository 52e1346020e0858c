//! Forward degradation that interpolates from clean toward low-dose data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Sinogram;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// `alphas[t]` for `t = 0..=T`, from 1 down to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    alphas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps < 1 {
        return Err(Error::domain("make_schedule", "T must be at least 1"));
    }
    let alphas = match kind {
        ScheduleKind::Linear => (0..=steps)
            .map(|t| 1.0 - t as f64 / steps as f64)
            .collect(),
    };
    Ok(DiffusionSchedule { steps, alphas })
}

/// `alpha_t * x0 + (1 - alpha_t) * xT`.
pub fn perturb(x0: &Sinogram, x_t: &Sinogram, t: usize, sched: &DiffusionSchedule) -> Result<Sinogram> {
    if t > sched.steps {
        return Err(Error::domain(
            "perturb",
            format!("step {t} outside 0..={}", sched.steps),
        ));
    }
    let a = sched.alpha(t);
    let b = 1.0 - a;
    x0.zip_with(x_t, |c, n| a * c + b * n)
}

/// Uniform step in `1..=T`.
pub fn sample_step<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.random_range(1..=steps)
}
