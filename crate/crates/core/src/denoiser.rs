//! Noise-prediction interface, classifier-free guidance, preview denoising and the
//! diffusion training objective.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{Condition, Sample, Shape};
use crate::schedule::NoiseSchedule;

/// A conditional noise predictor `ε(x_t, y, t)`.
///
/// Evaluation must be deterministic and row-independent: a row's prediction may not depend on
/// which other rows share the call.
pub trait Denoiser: Send + Sync {
    fn data_shape(&self) -> Shape;

    fn schedule(&self) -> &NoiseSchedule;

    /// Number of classes the condition may name (the null condition excluded).
    fn num_classes(&self) -> usize;

    /// Predicts noise for `conds.len()` rows of `xs` (row-major, one sample per row).
    fn predict_rows(&self, xs: &[f64], conds: &[Condition], ts: &[usize]) -> Vec<f64>;

    fn predict(&self, x: &Sample, cond: Condition, t: usize) -> Result<Sample> {
        if x.shape() != self.data_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.data_shape().len(),
                actual: x.len(),
            });
        }
        self.schedule().check(t)?;
        let out = self.predict_rows(x.data(), &[cond], &[t]);
        Sample::new(out, x.shape())
    }
}

/// A denoiser whose parameters can be trained by gradient descent.
pub trait TrainableDenoiser: Denoiser {
    type Trace;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn forward_traced(&self, xs: &[f64], conds: &[Condition], ts: &[usize]) -> (Vec<f64>, Self::Trace);

    /// Returns `(parameter gradient, gradient with respect to xs)` for the upstream gradient
    /// `grad_out` on the predictions.
    fn backward(&self, trace: &Self::Trace, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub cfg_scale: f64,
}

impl GuidanceConfig {
    pub fn new(cfg_scale: f64) -> Result<Self> {
        if !(cfg_scale >= 0.0 && cfg_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cfg scale must be finite and nonnegative, got {cfg_scale}"
            )));
        }
        Ok(Self { cfg_scale })
    }
}

/// `ε_uncond + s·(ε_cond − ε_uncond)`.
pub fn guided_epsilon(
    d: &dyn Denoiser,
    x_t: &Sample,
    y: Condition,
    t: usize,
    g: &GuidanceConfig,
) -> Result<Sample> {
    if x_t.shape() != d.data_shape() {
        return Err(Error::ShapeMismatch {
            expected: d.data_shape().len(),
            actual: x_t.len(),
        });
    }
    d.schedule().check(t)?;
    let out = guided_rows(d, x_t.data(), 1, y, t, g.cfg_scale);
    Sample::new(out, x_t.shape()).map_err(|_| Error::NonFinite("guided noise prediction".into()))
}

/// Guided prediction for `rows` samples that share a condition and timestep.
///
/// Scales of exactly 0 and 1 (and the null condition) skip the redundant forward pass, so the
/// result is then the unconditional or conditional prediction bit for bit.
pub(crate) fn guided_rows(
    d: &dyn Denoiser,
    xs: &[f64],
    rows: usize,
    y: Condition,
    t: usize,
    cfg_scale: f64,
) -> Vec<f64> {
    if y.is_null() || cfg_scale == 0.0 {
        return d.predict_rows(xs, &vec![Condition::NULL; rows], &vec![t; rows]);
    }
    if cfg_scale == 1.0 {
        return d.predict_rows(xs, &vec![y; rows], &vec![t; rows]);
    }
    let mut doubled = Vec::with_capacity(2 * xs.len());
    doubled.extend_from_slice(xs);
    doubled.extend_from_slice(xs);
    let mut conds = vec![y; rows];
    conds.extend(std::iter::repeat_n(Condition::NULL, rows));
    let both = d.predict_rows(&doubled, &conds, &vec![t; 2 * rows]);
    let (cond, uncond) = both.split_at(xs.len());
    cond.iter()
        .zip(uncond)
        .map(|(&c, &u)| u + cfg_scale * (c - u))
        .collect()
}

/// Evenly spaced integer timesteps from `t` down to 0, endpoint-inclusive (`steps + 1` entries).
pub fn timestep_ladder(t: usize, steps: usize) -> Vec<usize> {
    (0..=steps)
        .map(|k| ((t * (steps - k)) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Deterministic clean estimate of `x_t` after `steps` guided prediction steps.
pub fn denoise_steps(
    d: &dyn Denoiser,
    x_t: &Sample,
    y: Condition,
    t: usize,
    steps: usize,
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<Sample> {
    sched.check(t)?;
    if x_t.shape() != d.data_shape() {
        return Err(Error::ShapeMismatch {
            expected: d.data_shape().len(),
            actual: x_t.len(),
        });
    }
    let out = denoise_rows(d, x_t.data(), 1, y, t, steps, g.cfg_scale, sched)?;
    Sample::new(out, x_t.shape()).map_err(|_| Error::NonFinite("denoised preview".into()))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn denoise_rows(
    d: &dyn Denoiser,
    xs: &[f64],
    rows: usize,
    y: Condition,
    t: usize,
    steps: usize,
    cfg_scale: f64,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check(t)?;
    let mut x = xs.to_vec();
    if steps == 0 {
        return Ok(x);
    }
    let ladder = timestep_ladder(t, steps);
    for pair in ladder.windows(2) {
        let (cur, next) = (pair[0], pair[1]);
        let (a, s) = (sched.alpha(cur), sched.sigma(cur));
        if a == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "clean estimate undefined at timestep {cur} (alpha = 0)"
            )));
        }
        let eps = guided_rows(d, &x, rows, y, cur, cfg_scale);
        let (a_next, s_next) = (sched.alpha(next), sched.sigma(next));
        for (xv, &e) in x.iter_mut().zip(&eps) {
            let x0 = (*xv - s * e) / a;
            *xv = if next == 0 { x0 } else { a_next * x0 + s_next * e };
        }
    }
    Ok(x)
}

/// The per-timestep weight `w(t)` in diffusion and distillation losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeighting {
    #[default]
    Constant,
    SigmaSquared,
}

impl LossWeighting {
    pub fn weight(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self {
            LossWeighting::Constant => 1.0,
            LossWeighting::SigmaSquared => sched.sigma(t).powi(2),
        }
    }
}

impl FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant" => Ok(LossWeighting::Constant),
            "sigma-squared" | "sigma_squared" | "sigma2" => Ok(LossWeighting::SigmaSquared),
            other => Err(Error::Config(format!("unknown loss weighting `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossWeighting::Constant => "constant",
            LossWeighting::SigmaSquared => "sigma-squared",
        })
    }
}

/// Mean of `w(t_b)·‖ε(x_t_b) − ε_b‖²` over rows with explicit `t` and noise, plus its exact
/// parameter gradient.
pub fn diffusion_loss_rows<D: TrainableDenoiser>(
    d: &D,
    x0s: &[f64],
    conds: &[Condition],
    ts: &[usize],
    eps: &[f64],
    weighting: LossWeighting,
) -> (f64, Vec<f64>) {
    let rows = conds.len();
    let dim = d.data_shape().len();
    let sched = d.schedule();
    let mut xt = vec![0.0; x0s.len()];
    for r in 0..rows {
        let t = ts[r];
        crate::schedule::noise_into(
            &x0s[r * dim..(r + 1) * dim],
            &eps[r * dim..(r + 1) * dim],
            sched.alpha(t),
            sched.sigma(t),
            &mut xt[r * dim..(r + 1) * dim],
        );
    }
    let (pred, trace) = d.forward_traced(&xt, conds, ts);
    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut upstream = vec![0.0; pred.len()];
    for r in 0..rows {
        let w = weighting.weight(sched, ts[r]);
        for j in r * dim..(r + 1) * dim {
            let diff = pred[j] - eps[j];
            loss += w * diff * diff * scale;
            upstream[j] = 2.0 * w * diff * scale;
        }
    }
    let (grad, _) = d.backward(&trace, &upstream);
    (loss, grad)
}

/// Draws `t ~ U{1..=T}` and `ε ~ N(0, I)` per sample and evaluates the diffusion objective.
pub fn diffusion_loss_and_grad<D: TrainableDenoiser, R: Rng + ?Sized>(
    d: &D,
    x0s: &[Sample],
    y: Condition,
    rng: &mut R,
    weighting: LossWeighting,
) -> Result<(f64, Vec<f64>)> {
    if x0s.is_empty() {
        return Err(Error::InvalidArgument("diffusion loss needs at least one sample".into()));
    }
    let dim = d.data_shape().len();
    let num_t = d.schedule().num_timesteps();
    let mut flat = Vec::with_capacity(x0s.len() * dim);
    let mut ts = Vec::with_capacity(x0s.len());
    let mut eps = Vec::with_capacity(x0s.len() * dim);
    for x in x0s {
        if x.shape() != d.data_shape() {
            return Err(Error::ShapeMismatch {
                expected: dim,
                actual: x.len(),
            });
        }
        flat.extend_from_slice(x.data());
        ts.push(rng.random_range(1..=num_t));
        eps.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    let conds = vec![y; x0s.len()];
    Ok(diffusion_loss_rows(d, &flat, &conds, &ts, &eps, weighting))
}
