#![allow(dead_code)]

use sinodiff::config::RunConfig;
use sinodiff::dataset::{make_pairs, TrainingPair};
use sinodiff::geometry::FanGeometry;

/// 16x16 sinograms and a narrow network so optimiser tests stay quick.
pub fn small_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.geometry = FanGeometry {
        image_size: 16,
        n_views: 16,
        n_detectors: 16,
        ..run.geometry
    };
    run.schedule.steps = 4;
    run.denoiser.fhd.embed_dim = 24;
    run.denoiser.unet.base_channels = 4;
    run.denoiser.ldf.hidden_channels = 8;
    run.training.iterations = 6;
    run.training.n_pairs = 4;
    run
}

pub fn pairs(run: &RunConfig, n: u64) -> Vec<TrainingPair> {
    make_pairs(&run.geometry, &run.phantom, run.dose.photon_count, 0.0, run.seed, 0..n).unwrap()
}
