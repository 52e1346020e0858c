//! Optimisation of the restoration network on simulated pairs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sinodiff_autograd::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};

use crate::config::RunConfig;
use crate::dataset::TrainingPair;
use crate::denoiser::{denoise, forward, init_params, sino_input};
use crate::diffusion::{make_schedule, perturb, sample_step, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::geometry::Sinogram;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    L1,
    /// Mean squared error.
    #[default]
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Iterations of linear learning-rate ramp from zero.
    pub warmup: u64,
    pub iterations: u64,
    /// Pairs per optimiser step; their gradients are averaged.
    pub batch_size: usize,
    pub loss: LossNorm,
    /// Write a checkpoint every this many iterations; 0 only at the end.
    pub checkpoint_interval: u64,
    pub n_pairs: usize,
    pub n_validation: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            warmup: 100,
            iterations: 2000,
            batch_size: 1,
            loss: LossNorm::L2,
            checkpoint_interval: 500,
            n_pairs: 32,
            n_validation: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("training.learning_rate", "must be positive"));
        }
        if self.iterations < 1 {
            return Err(Error::validation("training.iterations", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("training.batch_size", "must be at least 1"));
        }
        if self.n_pairs < 1 {
            return Err(Error::validation("training.n_pairs", "must be at least 1"));
        }
        Ok(())
    }
}

pub fn restoration_loss(pred: &Sinogram, target: &Sinogram, norm: LossNorm) -> Result<f64> {
    let d = pred.sub(target)?;
    let n = d.values().len() as f64;
    Ok(match norm {
        LossNorm::L2 => d.values().iter().map(|v| v * v).sum::<f64>() / n,
        LossNorm::L1 => d.values().iter().map(|v| v.abs()).sum::<f64>() / n,
    })
}

/// Graph form of [`restoration_loss`].
pub fn restoration_loss_graph(g: &mut Graph, pred: Var, target: Var, norm: LossNorm) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let e = match norm {
        LossNorm::L2 => g.mul(d, d)?,
        LossNorm::L1 => g.abs(d)?,
    };
    Ok(g.mean(e)?)
}

/// Loss and parameter gradients for one pair at step `t`.
pub fn loss_and_gradients(
    params: &ParamStore,
    pair: &TrainingPair,
    t: usize,
    schedule: &DiffusionSchedule,
    run: &RunConfig,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let x_t = perturb(&pair.clean, &pair.noisy, t, schedule)?;
    let mut g = Graph::new();
    let pred = forward(&mut g, params, &x_t, t, &run.denoiser)?;
    let target = sino_input(&mut g, &pair.clean)?;
    let loss = restoration_loss_graph(&mut g, pred, target, run.training.loss)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric {
            step: t,
            detail: format!("training loss is {value}"),
        });
    }
    let grads = g.backward(loss)?.for_params(&g, params);
    Ok((value, grads))
}

/// One optimiser update on the given `(pair, t)` samples. Returns the mean
/// loss before the update.
pub fn train_step(
    params: &mut ParamStore,
    optimizer: &mut Adam,
    samples: &[(&TrainingPair, usize)],
    schedule: &DiffusionSchedule,
    run: &RunConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut acc: Option<BTreeMap<String, Tensor>> = None;
    for &(pair, t) in samples {
        let (loss, grads) = loss_and_gradients(params, pair, t, schedule, run)?;
        total += loss;
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => {
                for (name, g) in grads {
                    let dst = a.get_mut(&name).expect("same parameter set");
                    for (x, y) in dst.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut grads = acc.ok_or_else(|| Error::validation("training.batch_size", "empty batch"))?;
    let k = samples.len() as f64;
    if samples.len() > 1 {
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v /= k);
        }
    }
    optimizer.step(params, &grads)?;
    Ok(total / k)
}

/// Serialisable position of the timestep generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Parameters, optimiser and sampling state of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ParamStore,
    pub optimizer: Adam,
    pub iteration: u64,
    rng: ChaCha8Rng,
}

/// Learning rate for the update that follows `iteration` completed ones.
pub fn learning_rate_at(cfg: &TrainConfig, iteration: u64) -> f64 {
    if iteration >= cfg.warmup {
        cfg.learning_rate
    } else {
        cfg.learning_rate * (iteration + 1) as f64 / cfg.warmup as f64
    }
}

pub fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    }
}

impl Trainer {
    /// Fresh parameters and state, all keyed on `run.seed`.
    pub fn new(run: &RunConfig) -> Result<Trainer> {
        Ok(Trainer {
            params: init_params(&run.denoiser, derive_seed(run.seed, "init", 0))?,
            optimizer: Adam::new(adam_config(&run.training)),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(run.seed, "timestep", 0)),
        })
    }

    pub fn from_parts(params: ParamStore, optimizer: Adam, iteration: u64, rng: RngState) -> Trainer {
        Trainer {
            params,
            optimizer,
            iteration,
            rng: rng.restore(),
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// One iteration: the next `batch_size` pairs of the shuffled stream,
    /// each at a uniformly drawn step.
    pub fn step(&mut self, pairs: &[TrainingPair], run: &RunConfig) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::validation("training.n_pairs", "dataset is empty"));
        }
        let schedule = make_schedule(run.schedule.steps, run.schedule.kind)?;
        let b = run.training.batch_size as u64;
        let n = pairs.len() as u64;
        let mut samples = Vec::with_capacity(b as usize);
        for j in 0..b {
            let k = self.iteration * b + j;
            let order = epoch_order(run.seed, k / n, pairs.len());
            let t = sample_step(&mut self.rng, schedule.steps());
            samples.push((&pairs[order[(k % n) as usize]], t));
        }
        self.optimizer.config.lr = learning_rate_at(&run.training, self.iteration);
        let loss = train_step(&mut self.params, &mut self.optimizer, &samples, &schedule, run)?;
        self.iteration += 1;
        Ok(loss)
    }
}

/// Visit order of the pairs in one pass over the dataset.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch", epoch)));
    order
}

/// Runs until `trainer.iteration == until`. `after_step` sees the trainer
/// and the loss of each iteration. Returns `(iteration, loss)` records,
/// numbered from 1.
pub fn train(
    trainer: &mut Trainer,
    pairs: &[TrainingPair],
    run: &RunConfig,
    until: u64,
    mut after_step: impl FnMut(&Trainer, f64) -> Result<()>,
) -> Result<Vec<(u64, f64)>> {
    if pairs.is_empty() {
        return Err(Error::validation("training.n_pairs", "dataset is empty"));
    }
    let mut curve = Vec::new();
    while trainer.iteration < until {
        let loss = trainer.step(pairs, run)?;
        curve.push((trainer.iteration, loss));
        after_step(trainer, loss)?;
    }
    Ok(curve)
}

pub fn loss_curve_csv(curve: &[(u64, f64)]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in curve {
        s.push_str(&format!("{i},{l:e}\n"));
    }
    s
}

/// Mean loss of the network's estimate at step `t`.
pub fn validation_loss(params: &ParamStore, pairs: &[TrainingPair], t: usize, run: &RunConfig) -> Result<f64> {
    let schedule = make_schedule(run.schedule.steps, run.schedule.kind)?;
    let mut total = 0.0;
    for p in pairs {
        let x_t = perturb(&p.clean, &p.noisy, t, &schedule)?;
        let pred = denoise(&x_t, t, params, &run.denoiser)?;
        total += restoration_loss(&pred, &p.clean, run.training.loss)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean loss of returning `x_t` unchanged.
pub fn identity_loss(pairs: &[TrainingPair], t: usize, run: &RunConfig) -> Result<f64> {
    let schedule = make_schedule(run.schedule.steps, run.schedule.kind)?;
    let mut total = 0.0;
    for p in pairs {
        let x_t = perturb(&p.clean, &p.noisy, t, &schedule)?;
        total += restoration_loss(&x_t, &p.clean, run.training.loss)?;
    }
    Ok(total / pairs.len() as f64)
}
