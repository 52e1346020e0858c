//! Component ablations: branch toggles, attention type and fusion mode.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{make_pairs, TrainingPair, HELDOUT_OFFSET};
use crate::denoiser::{AttentionKind, Branches, Fusion};
use crate::error::Result;
use crate::geometry::fbp;
use crate::metrics::{compare, Quality};
use crate::recon::{reconstruct, ReconInput};
use crate::training::{train, Trainer};
use sinodiff_autograd::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// FFD, FFD+FLD, FFD+FLD+FHD.
    Modules,
    /// Global attention everywhere versus the mixed layout.
    Attention,
    /// Learned fusion versus the plain low+high sum.
    Fusion,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Modules, Axis::Attention, Axis::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Modules => "modules",
            Axis::Attention => "attention",
            Axis::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named configurations along one axis, derived from `base`.
pub fn variants(axis: Axis, base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let branches = |fhd, fld| Branches { fhd, fld, ffd: true };
    match axis {
        Axis::Modules => vec![
            ("FFD", with(&|c| c.denoiser.branches = branches(false, false))),
            ("FFD+FLD", with(&|c| c.denoiser.branches = branches(false, true))),
            ("FFD+FLD+FHD", with(&|c| c.denoiser.branches = branches(true, true))),
        ],
        Axis::Attention => vec![
            (
                "GA",
                with(&|c| c.denoiser.fhd.module_layout.iter_mut().for_each(|k| *k = AttentionKind::Mhsa)),
            ),
            ("SSLA-GA", base.clone()),
        ],
        Axis::Fusion => vec![
            ("LDF", with(&|c| c.denoiser.fusion = Fusion::Ldf)),
            ("L+H", with(&|c| c.denoiser.fusion = Fusion::Sum)),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub name: String,
    pub quality: Quality,
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,config,psnr,ssim,mse\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:e}\n",
            r.axis, r.name, r.quality.psnr, r.quality.ssim, r.quality.mse
        ));
    }
    s
}

/// Mean metrics of full reconstructions against the FBP of the clean data.
pub fn evaluate(params: &ParamStore, run: &RunConfig, pairs: &[TrainingPair], photon_count: f64) -> Result<Quality> {
    let mut acc = Quality {
        psnr: 0.0,
        ssim: 0.0,
        mse: 0.0,
    };
    for p in pairs {
        let reference = p.reference(&run.geometry)?;
        let input = ReconInput::Sinogram(p.noisy.clone());
        let (_, report) = reconstruct(&input, params, run, photon_count, Some(&reference))?;
        let q = report.quality.expect("reference given");
        acc.psnr += q.psnr;
        acc.ssim += q.ssim;
        acc.mse += q.mse;
    }
    let n = pairs.len() as f64;
    Ok(Quality {
        psnr: acc.psnr / n,
        ssim: acc.ssim / n,
        mse: acc.mse / n,
    })
}

/// Mean metrics of plain FBP of the noisy data.
pub fn evaluate_fbp(run: &RunConfig, pairs: &[TrainingPair]) -> Result<Quality> {
    let mut acc = [0.0; 3];
    for p in pairs {
        let q = compare(&p.reference(&run.geometry)?, &fbp(&p.noisy, &run.geometry)?)?;
        acc[0] += q.psnr;
        acc[1] += q.ssim;
        acc[2] += q.mse;
    }
    let n = pairs.len() as f64;
    Ok(Quality {
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        mse: acc[2] / n,
    })
}

/// Training pairs and held-out pairs for `run`.
pub fn datasets(run: &RunConfig) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>)> {
    let d = &run.dose;
    let train_set = make_pairs(
        &run.geometry,
        &run.phantom,
        d.photon_count,
        d.electronic_sigma,
        run.seed,
        0..run.training.n_pairs as u64,
    )?;
    let held_out = make_pairs(
        &run.geometry,
        &run.phantom,
        d.photon_count,
        d.electronic_sigma,
        run.seed,
        HELDOUT_OFFSET..HELDOUT_OFFSET + run.training.n_validation.max(1) as u64,
    )?;
    Ok((train_set, held_out))
}

/// Trains every variant of `axis` from scratch for
/// `run.training.iterations` and scores it on `held_out`.
pub fn run_axis(
    axis: Axis,
    base: &RunConfig,
    train_set: &[TrainingPair],
    held_out: &[TrainingPair],
    mut done: impl FnMut(&AblationRow, &Checkpoint) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in variants(axis, base) {
        let mut trainer = Trainer::new(&cfg)?;
        train(&mut trainer, train_set, &cfg, cfg.training.iterations, |_, _| Ok(()))?;
        let quality = evaluate(&trainer.params, &cfg, held_out, cfg.dose.photon_count)?;
        let row = AblationRow {
            axis: axis.name().into(),
            name: name.into(),
            quality,
        };
        done(&row, &Checkpoint::from_trainer(&cfg, &trainer))?;
        rows.push(row);
    }
    Ok(rows)
}
