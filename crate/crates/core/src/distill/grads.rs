//! Single-draw gradient estimates for every method.
//!
//! Reward-weighted estimates compute one parameter gradient per candidate and combine them as
//! `(1/N)·Σ wᵢ·gᵢ`, summing in candidate order from the first nonzero weight and dividing last.
//! The combination therefore reproduces, bit for bit, the same expression evaluated over
//! independent single-candidate calls.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::candidates::score_candidates;
use super::{draw_timestep, weights_from_scores, DistillConfig};
use crate::adapter::AdapterDenoiser;
use crate::denoiser::{guided_rows, Denoiser};
use crate::error::{Error, Result};
use crate::render::{Renderer, View};
use crate::rewards::RewardModel;
use crate::sample::{Condition, Sample};
use crate::schedule::noise_into;

/// Shared context of a gradient evaluation: generator, frozen denoiser, target condition and
/// the run configuration.
#[derive(Clone, Copy)]
pub struct Setting<'a> {
    pub renderer: &'a dyn Renderer,
    pub denoiser: &'a dyn Denoiser,
    pub condition: Condition,
    pub cfg: &'a DistillConfig,
}

/// The fixed input of an edit and the condition it was made under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSource {
    pub sample: Sample,
    pub condition: Condition,
}

/// VSD particles sharing one adapter.
#[derive(Clone)]
pub struct ParticleSet {
    pub particles: Vec<Vec<f64>>,
    pub adapter: AdapterDenoiser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    pub t: usize,
    pub noises: Vec<Sample>,
    /// Candidate scores; empty for plain methods.
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn noisy_rows(x0: &Sample, t: usize, noises: &[Sample], d: &dyn Denoiser) -> Vec<f64> {
    let sched = d.schedule();
    let dim = x0.len();
    let mut flat = vec![0.0; noises.len() * dim];
    for (row, eps) in flat.chunks_mut(dim).zip(noises) {
        noise_into(x0.data(), eps.data(), sched.alpha(t), sched.sigma(t), row);
    }
    flat
}

fn check_inputs(s: &Setting, x0: &Sample, t: usize, noises: &[Sample]) -> Result<()> {
    s.denoiser.schedule().check(t)?;
    if x0.shape() != s.denoiser.data_shape() {
        return Err(Error::ShapeMismatch {
            expected: s.denoiser.data_shape().len(),
            actual: x0.len(),
        });
    }
    for eps in noises {
        x0.check_same_shape(eps)?;
    }
    Ok(())
}

fn finite(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(v)
}

/// `w(t)·(ε̂_guided(x_t) − ε)` for each noise.
fn sds_residuals(s: &Setting, x0: &Sample, t: usize, noises: &[Sample]) -> Result<Vec<Vec<f64>>> {
    check_inputs(s, x0, t, noises)?;
    let flat = noisy_rows(x0, t, noises, s.denoiser);
    let eps_hat = guided_rows(s.denoiser, &flat, noises.len(), s.condition, t, s.cfg.guidance.cfg_scale);
    let eps_hat = finite(eps_hat, "denoiser output")?;
    let w = s.cfg.loss_weighting.weight(s.denoiser.schedule(), t);
    Ok(eps_hat
        .chunks(x0.len())
        .zip(noises)
        .map(|(e, n)| e.iter().zip(n.data()).map(|(a, b)| w * (a - b)).collect())
        .collect())
}

/// `w(t)·(ε̂_pretrained,guided(x_t) − ε̂_adapter(x_t))` for each noise; the adapter is unguided.
fn vsd_residuals(
    s: &Setting,
    adapter: &AdapterDenoiser,
    x0: &Sample,
    t: usize,
    noises: &[Sample],
) -> Result<Vec<Vec<f64>>> {
    check_inputs(s, x0, t, noises)?;
    let n = noises.len();
    let flat = noisy_rows(x0, t, noises, s.denoiser);
    let pre = finite(
        guided_rows(s.denoiser, &flat, n, s.condition, t, s.cfg.guidance.cfg_scale),
        "denoiser output",
    )?;
    let ada = finite(
        adapter.predict_rows(&flat, &vec![s.condition; n], &vec![t; n]),
        "adapter output",
    )?;
    let w = s.cfg.loss_weighting.weight(s.denoiser.schedule(), t);
    Ok(pre
        .chunks(x0.len())
        .zip(ada.chunks(x0.len()))
        .map(|(p, a)| p.iter().zip(a).map(|(u, v)| w * (u - v)).collect())
        .collect())
}

/// Target-branch SDS residual minus source-branch SDS residual, sharing each noise.
fn dds_residuals(
    s: &Setting,
    edit: &EditSource,
    x0: &Sample,
    t: usize,
    noises: &[Sample],
) -> Result<Vec<Vec<f64>>> {
    x0.check_same_shape(&edit.sample)?;
    let target = sds_residuals(s, x0, t, noises)?;
    let src_setting = Setting {
        condition: edit.condition,
        ..*s
    };
    let source = sds_residuals(&src_setting, &edit.sample, t, noises)?;
    Ok(target
        .into_iter()
        .zip(source)
        .map(|(a, b)| a.iter().zip(&b).map(|(u, v)| u - v).collect())
        .collect())
}

fn pull_back(s: &Setting, theta: &[f64], view: &View, residual: Vec<f64>) -> Result<Vec<f64>> {
    let upstream = Sample::new(residual, s.renderer.output_shape())?;
    finite(s.renderer.vjp(theta, view, &upstream)?, "parameter gradient")
}

/// `(1/N)·Σ wᵢ·vjp(residualᵢ)` over candidates with nonzero weight.
fn combine(
    s: &Setting,
    theta: &[f64],
    view: &View,
    residuals: Vec<Vec<f64>>,
    weights: &[f64],
) -> Result<Vec<f64>> {
    let n = residuals.len() as f64;
    let mut acc: Option<Vec<f64>> = None;
    for (res, &w) in residuals.into_iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let g = pull_back(s, theta, view, res)?;
        match acc.as_mut() {
            None => acc = Some(g.iter().map(|v| w * v).collect()),
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, v)| *a += w * v),
        }
    }
    let mut out = acc.unwrap_or_else(|| vec![0.0; theta.len()]);
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

fn single(s: &Setting, theta: &[f64], view: &View, t: usize, eps: &Sample, residual: Vec<f64>) -> Result<GradientEstimate> {
    Ok(GradientEstimate {
        gradient: pull_back(s, theta, view, residual)?,
        t,
        noises: vec![eps.clone()],
        scores: Vec::new(),
        weights: vec![1.0],
    })
}

pub fn sds_grad(s: &Setting, theta: &[f64], view: &View, t: usize, eps: &Sample) -> Result<GradientEstimate> {
    let x0 = s.renderer.render(theta, view)?;
    let residual = sds_residuals(s, &x0, t, std::slice::from_ref(eps))?.remove(0);
    single(s, theta, view, t, eps, residual)
}

pub fn vsd_grad(
    s: &Setting,
    p: &ParticleSet,
    i: usize,
    view: &View,
    t: usize,
    eps: &Sample,
) -> Result<GradientEstimate> {
    let theta = particle(p, i)?;
    let x0 = s.renderer.render(theta, view)?;
    let residual = vsd_residuals(s, &p.adapter, &x0, t, std::slice::from_ref(eps))?.remove(0);
    single(s, theta, view, t, eps, residual)
}

/// DDS: `s.condition` is the target condition.
pub fn dds_grad(
    s: &Setting,
    edit: &EditSource,
    theta: &[f64],
    view: &View,
    t: usize,
    eps: &Sample,
) -> Result<GradientEstimate> {
    let x0 = s.renderer.render(theta, view)?;
    let residual = dds_residuals(s, edit, &x0, t, std::slice::from_ref(eps))?.remove(0);
    single(s, theta, view, t, eps, residual)
}

fn particle(p: &ParticleSet, i: usize) -> Result<&[f64]> {
    p.particles
        .get(i)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::InvalidArgument(format!("particle {i} out of range")))
}

/// Draws `t`, scores `N` candidates around `x0` and returns `(t, noises, scores, weights)`.
fn candidates_and_weights(
    s: &Setting,
    r: &dyn RewardModel,
    x0: &Sample,
    rng: &mut dyn RngCore,
) -> Result<(usize, Vec<Sample>, Vec<f64>, Vec<f64>)> {
    let t = draw_timestep(s.cfg, rng);
    let set = score_candidates(
        x0,
        t,
        s.cfg.candidates,
        s.cfg.denoise_steps,
        s.denoiser,
        r,
        s.condition,
        rng,
        &s.cfg.preview_guidance(),
    )?;
    let weights = weights_from_scores(&set.scores, &s.cfg.scheme, rng)?;
    Ok((t, set.noises, set.scores, weights))
}

pub fn reward_sds_grad(
    s: &Setting,
    r: &dyn RewardModel,
    theta: &[f64],
    view: &View,
    rng: &mut dyn RngCore,
) -> Result<GradientEstimate> {
    let x0 = s.renderer.render(theta, view)?;
    let (t, noises, scores, weights) = candidates_and_weights(s, r, &x0, rng)?;
    let residuals = sds_residuals(s, &x0, t, &noises)?;
    Ok(GradientEstimate {
        gradient: combine(s, theta, view, residuals, &weights)?,
        t,
        noises,
        scores,
        weights,
    })
}

pub fn reward_vsd_grad(
    s: &Setting,
    r: &dyn RewardModel,
    p: &ParticleSet,
    i: usize,
    view: &View,
    rng: &mut dyn RngCore,
) -> Result<GradientEstimate> {
    let theta = particle(p, i)?;
    let x0 = s.renderer.render(theta, view)?;
    let (t, noises, scores, weights) = candidates_and_weights(s, r, &x0, rng)?;
    let residuals = vsd_residuals(s, &p.adapter, &x0, t, &noises)?;
    Ok(GradientEstimate {
        gradient: combine(s, theta, view, residuals, &weights)?,
        t,
        noises,
        scores,
        weights,
    })
}

/// RewardDDS: candidates are scored on the target branch under `s.condition`; their noises are
/// reused by the source branch.
pub fn reward_dds_grad(
    s: &Setting,
    r: &dyn RewardModel,
    edit: &EditSource,
    theta: &[f64],
    view: &View,
    rng: &mut dyn RngCore,
) -> Result<GradientEstimate> {
    let x0 = s.renderer.render(theta, view)?;
    let (t, noises, scores, weights) = candidates_and_weights(s, r, &x0, rng)?;
    let residuals = dds_residuals(s, edit, &x0, t, &noises)?;
    Ok(GradientEstimate {
        gradient: combine(s, theta, view, residuals, &weights)?,
        t,
        noises,
        scores,
        weights,
    })
}
