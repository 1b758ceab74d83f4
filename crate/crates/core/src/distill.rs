//! Score distillation: SDS, VSD and DDS, their reward-weighted variants and the outer loop.

mod candidates;
mod grads;
mod optimize;
mod weights;

use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use candidates::{score_candidates, CandidateSet};
pub use grads::{
    dds_grad, reward_dds_grad, reward_sds_grad, reward_vsd_grad, sds_grad, vsd_grad, EditSource,
    GradientEstimate, ParticleSet, Setting,
};
pub use optimize::{initial_parameters, optimize, DistillOutcome, Problem, StepRecord};
pub use weights::{weights_from_scores, WeightScheme};

use crate::denoiser::{GuidanceConfig, LossWeighting};
use crate::error::{Error, Result};
use crate::sample::{Sample, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sds,
    Vsd,
    Dds,
    RewardSds,
    RewardVsd,
    RewardDds,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Sds,
        Method::Vsd,
        Method::Dds,
        Method::RewardSds,
        Method::RewardVsd,
        Method::RewardDds,
    ];

    pub fn is_reward(&self) -> bool {
        matches!(self, Method::RewardSds | Method::RewardVsd | Method::RewardDds)
    }

    pub fn is_vsd(&self) -> bool {
        matches!(self, Method::Vsd | Method::RewardVsd)
    }

    pub fn is_dds(&self) -> bool {
        matches!(self, Method::Dds | Method::RewardDds)
    }

    /// The plain method this one falls back to after the reward steps.
    pub fn base(&self) -> Method {
        match self {
            Method::RewardSds => Method::Sds,
            Method::RewardVsd => Method::Vsd,
            Method::RewardDds => Method::Dds,
            m => *m,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Sds => "sds",
            Method::Vsd => "vsd",
            Method::Dds => "dds",
            Method::RewardSds => "reward-sds",
            Method::RewardVsd => "reward-vsd",
            Method::RewardDds => "reward-dds",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == norm || m.to_string().replace('-', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Every knob of a distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub total_steps: usize,
    /// `K`: the first `K` steps use the reward-weighted gradient.
    pub reward_steps: usize,
    /// `N`: candidate noises per reward step.
    pub candidates: usize,
    /// `S`: guided denoising steps used to build each candidate's preview.
    pub denoise_steps: usize,
    pub scheme: WeightScheme,
    /// Guidance for the distillation residual.
    pub guidance: GuidanceConfig,
    /// Guidance for candidate previews; `None` reuses `guidance`. Defaults to the ordinary
    /// sampling scale 7.5: previews extrapolated at 100 leave the data range entirely.
    pub preview_guidance: Option<GuidanceConfig>,
    pub learning_rate: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub loss_weighting: LossWeighting,
    pub seed: u64,
    /// VSD particle count.
    pub particles: usize,
    pub adapter_learning_rate: f64,
    /// θ is initialised as `init_scale · N(0, I)`.
    pub init_scale: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            reward_steps: 1000,
            candidates: 10,
            denoise_steps: 15,
            scheme: WeightScheme::Top2MinusBottom2,
            guidance: GuidanceConfig { cfg_scale: 100.0 },
            preview_guidance: Some(GuidanceConfig { cfg_scale: 7.5 }),
            learning_rate: 0.01,
            t_min: 20,
            t_max: 980,
            loss_weighting: LossWeighting::Constant,
            seed: 0,
            particles: 4,
            adapter_learning_rate: 1e-3,
            init_scale: 0.1,
        }
    }
}

impl DistillConfig {
    /// Defaults per method family: guidance 7.5 for VSD, and the short N=5, K=200, S=1 schedule
    /// for editing.
    pub fn for_method(method: Method) -> Self {
        let mut cfg = Self::default();
        if method.is_vsd() {
            cfg.guidance = GuidanceConfig { cfg_scale: 7.5 };
        }
        if method.is_dds() {
            cfg.total_steps = 200;
            cfg.reward_steps = 200;
            cfg.candidates = 5;
            cfg.denoise_steps = 1;
        }
        cfg
    }

    /// Timestep range `[0.02·T, 0.98·T]`.
    pub fn with_timesteps(mut self, num_timesteps: usize) -> Self {
        self.t_min = ((num_timesteps as f64) * 0.02).round() as usize;
        self.t_max = ((num_timesteps as f64) * 0.98).round() as usize;
        self
    }

    pub fn preview_guidance(&self) -> GuidanceConfig {
        self.preview_guidance.unwrap_or(self.guidance)
    }

    pub fn validate(&self, method: Method, num_timesteps: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.reward_steps > self.total_steps {
            return bad(format!(
                "reward_steps {} exceeds total_steps {}",
                self.reward_steps, self.total_steps
            ));
        }
        if self.candidates == 0 {
            return bad("candidates must be at least 1".into());
        }
        if !(self.t_min < self.t_max && self.t_max <= num_timesteps) {
            return bad(format!(
                "timestep range [{}, {}] invalid for T = {num_timesteps}",
                self.t_min, self.t_max
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        GuidanceConfig::new(self.guidance.cfg_scale)?;
        GuidanceConfig::new(self.preview_guidance().cfg_scale)?;
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be nonnegative".into());
        }
        if method.is_vsd() {
            if self.particles == 0 {
                return bad("VSD needs at least one particle".into());
            }
            if !(self.adapter_learning_rate >= 0.0 && self.adapter_learning_rate.is_finite()) {
                return bad("adapter_learning_rate must be nonnegative".into());
            }
        }
        if method.is_reward() && self.reward_steps > 0 {
            self.scheme.validate(self.candidates)?;
        }
        Ok(())
    }
}

pub(crate) fn draw_timestep(cfg: &DistillConfig, rng: &mut dyn RngCore) -> usize {
    rng.random_range(cfg.t_min..=cfg.t_max)
}

pub(crate) fn draw_noise(shape: Shape, rng: &mut dyn RngCore) -> Sample {
    let data = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
    Sample::new(data, shape).expect("gaussian draws are finite")
}
