//! Denoiser pretraining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::ToyDataset;
use crate::denoiser::{diffusion_loss_rows, LossWeighting, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::mlp_denoiser::{DenoiserArch, MlpDenoiser};
use crate::optim::Adam;
use crate::sample::Condition;
use crate::schedule::NoiseSchedule;

/// Probability of replacing an example's condition with [`Condition::NULL`] during training.
pub const COND_DROP_PROB: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Denoiser pretraining defaults. Shorter runs leave errors in the conditional-minus-unconditional
/// difference that guidance at scale 100 amplifies into a steady drift.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Classifier reward defaults.
    pub fn classifier() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            learning_rate: 1e-2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Trained model together with its per-step loss history.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub losses: Vec<f64>,
}

/// Trains a denoiser with the default architecture for `data`.
pub fn train_denoiser(
    data: &ToyDataset,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<Trained<MlpDenoiser>> {
    let arch = DenoiserArch::new(data.shape(), data.num_classes()).with_schedule(sched);
    train_denoiser_with(arch, data, cfg)
}

pub fn train_denoiser_with(
    arch: DenoiserArch,
    data: &ToyDataset,
    cfg: &TrainConfig,
) -> Result<Trained<MlpDenoiser>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if arch.data_shape != data.shape() {
        return Err(Error::ShapeMismatch {
            expected: arch.data_shape.len(),
            actual: data.shape().len(),
        });
    }
    let mut model = MlpDenoiser::init(arch, cfg.seed)?;
    let mut opt = Adam::new(model.params().len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = data.shape().len();
    let num_t = model.arch().num_timesteps;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut x0s = Vec::with_capacity(cfg.batch_size * dim);
    let mut conds = Vec::with_capacity(cfg.batch_size);
    let mut ts = Vec::with_capacity(cfg.batch_size);
    let mut eps = Vec::with_capacity(cfg.batch_size * dim);
    for step in 0..cfg.steps {
        x0s.clear();
        conds.clear();
        ts.clear();
        eps.clear();
        for _ in 0..cfg.batch_size {
            let (x, c) = &data.samples[rng.random_range(0..data.len())];
            x0s.extend_from_slice(x.data());
            let drop = rng.random::<f64>() < COND_DROP_PROB;
            conds.push(if drop { Condition::NULL } else { *c });
            ts.push(rng.random_range(1..=num_t));
            eps.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        let (loss, grad) =
            diffusion_loss_rows(&model, &x0s, &conds, &ts, &eps, LossWeighting::Constant);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        opt.step(model.params_mut(), &grad);
        losses.push(loss);
    }
    Ok(Trained { model, losses })
}
