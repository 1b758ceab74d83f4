use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grads::{
    dds_grad, reward_dds_grad, reward_sds_grad, reward_vsd_grad, sds_grad, vsd_grad, EditSource,
    GradientEstimate, ParticleSet, Setting,
};
use super::{draw_noise, draw_timestep, DistillConfig, Method};
use crate::adapter::{adapter_update, AdapterDenoiser};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::render::Renderer;
use crate::rewards::RewardModel;
use crate::sample::{Condition, Sample};

/// What is being distilled: the generator, the frozen prior, the target condition, and the
/// method-specific extras.
#[derive(Clone)]
pub struct Problem<'a> {
    pub renderer: &'a dyn Renderer,
    pub denoiser: Arc<dyn Denoiser>,
    pub condition: Condition,
    /// Required by reward methods with `K > 0`.
    pub reward: Option<&'a dyn RewardModel>,
    /// Required by DDS methods.
    pub source: Option<EditSource>,
}

/// One optimizer update of one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particle: Option<usize>,
    pub t: usize,
    pub reward_step: bool,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub grad_norm: f64,
    pub elapsed_ms: f64,
    /// VSD only: the adapter loss of this step, on the step's last record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    /// Final parameters; one entry per VSD particle, otherwise a single entry.
    pub thetas: Vec<Vec<f64>>,
    pub trajectory: Vec<StepRecord>,
}

impl DistillOutcome {
    pub fn adapter_losses(&self) -> Vec<f64> {
        self.trajectory.iter().filter_map(|r| r.adapter_loss).collect()
    }
}

/// `init_scale · N(0, I)` draws from a stream separate from the optimization stream.
pub fn initial_parameters(cfg: &DistillConfig, count: usize, len: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    (0..count)
        .map(|_| {
            (0..len)
                .map(|_| cfg.init_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Runs `cfg.total_steps` Adam updates; the first `cfg.reward_steps` use the reward-weighted
/// gradient when `method` is a reward method.
///
/// Randomness comes from one stream seeded by `cfg.seed`, consumed per update in the order
/// view, timestep, candidate noises, then any weighting draw; VSD adds the adapter update's
/// draws at the end of each step. A reward step with one candidate therefore consumes exactly
/// what a plain step does.
pub fn optimize(
    problem: &Problem,
    init: Option<Vec<Vec<f64>>>,
    cfg: &DistillConfig,
    method: Method,
) -> Result<DistillOutcome> {
    let d = problem.denoiser.as_ref();
    cfg.validate(method, d.schedule().num_timesteps())?;
    let rend = problem.renderer;
    if rend.output_shape() != d.data_shape() {
        return Err(Error::ShapeMismatch {
            expected: d.data_shape().len(),
            actual: rend.output_shape().len(),
        });
    }
    let reward = match (method.is_reward() && cfg.reward_steps > 0, problem.reward) {
        (true, None) => {
            return Err(Error::InvalidArgument(format!("{method} needs a reward model")));
        }
        (_, r) => r,
    };
    let source = match (method.is_dds(), &problem.source) {
        (true, None) => {
            return Err(Error::InvalidArgument(format!("{method} needs an edit source")));
        }
        (_, s) => s.as_ref(),
    };
    let count = if method.is_vsd() { cfg.particles } else { 1 };
    let thetas = match init {
        Some(t) => t,
        None => match source {
            Some(src) if src.sample.len() == rend.param_len() => vec![src.sample.data().to_vec()],
            _ => initial_parameters(cfg, count, rend.param_len()),
        },
    };
    if thetas.len() != count || thetas.iter().any(|t| t.len() != rend.param_len()) {
        return Err(Error::InvalidArgument(format!(
            "{method} expects {count} parameter vector(s) of length {}",
            rend.param_len()
        )));
    }
    let mut particles = ParticleSet {
        particles: thetas,
        adapter: AdapterDenoiser::standard(problem.denoiser.clone(), cfg.seed),
    };
    let mut opts: Vec<Adam> = (0..count)
        .map(|_| Adam::new(rend.param_len(), cfg.learning_rate))
        .collect();
    let setting = Setting {
        renderer: rend,
        denoiser: d,
        condition: problem.condition,
        cfg,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trajectory = Vec::with_capacity(cfg.total_steps * count);
    for step in 0..cfg.total_steps {
        let reward_step = method.is_reward() && step < cfg.reward_steps;
        let mut renders: Vec<Sample> = Vec::new();
        for i in 0..count {
            let start = Instant::now();
            let view = rend.sample_view(&mut rng);
            let theta = &particles.particles[i];
            let est: GradientEstimate = match (method.base(), reward_step) {
                (Method::Sds, false) => {
                    let t = draw_timestep(cfg, &mut rng);
                    let eps = draw_noise(rend.output_shape(), &mut rng);
                    sds_grad(&setting, theta, &view, t, &eps)?
                }
                (Method::Sds, true) => {
                    reward_sds_grad(&setting, reward.unwrap(), theta, &view, &mut rng)?
                }
                (Method::Vsd, false) => {
                    let t = draw_timestep(cfg, &mut rng);
                    let eps = draw_noise(rend.output_shape(), &mut rng);
                    vsd_grad(&setting, &particles, i, &view, t, &eps)?
                }
                (Method::Vsd, true) => {
                    reward_vsd_grad(&setting, reward.unwrap(), &particles, i, &view, &mut rng)?
                }
                (Method::Dds, false) => {
                    let t = draw_timestep(cfg, &mut rng);
                    let eps = draw_noise(rend.output_shape(), &mut rng);
                    dds_grad(&setting, source.unwrap(), theta, &view, t, &eps)?
                }
                (Method::Dds, true) => {
                    reward_dds_grad(&setting, reward.unwrap(), source.unwrap(), theta, &view, &mut rng)?
                }
                _ => unreachable!("base() maps onto plain methods"),
            };
            if method.is_vsd() {
                renders.push(rend.render(theta, &view)?);
            }
            let theta = &mut particles.particles[i];
            opts[i].step(theta, &est.gradient);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteParameters { step });
            }
            trajectory.push(StepRecord {
                step,
                particle: method.is_vsd().then_some(i),
                t: est.t,
                reward_step,
                grad_norm: est.norm(),
                scores: est.scores,
                weights: est.weights,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
                adapter_loss: None,
            });
        }
        if method.is_vsd() {
            let start = Instant::now();
            let loss = adapter_update(
                &mut particles.adapter,
                &renders,
                problem.condition,
                cfg.adapter_learning_rate,
                &mut rng,
            )?;
            let last = trajectory.last_mut().expect("at least one particle");
            last.adapter_loss = Some(loss);
            last.elapsed_ms += start.elapsed().as_secs_f64() * 1e3;
        }
    }
    Ok(DistillOutcome {
        thetas: particles.particles,
        trajectory,
    })
}
