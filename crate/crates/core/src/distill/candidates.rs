use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::draw_noise;
use crate::denoiser::{denoise_rows, Denoiser, GuidanceConfig};
use crate::error::{Error, Result};
use crate::rewards::RewardModel;
use crate::sample::{Condition, Sample};
use crate::schedule::noise_into;

/// `N` noise candidates at one timestep with their previews and reward scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub t: usize,
    pub noises: Vec<Sample>,
    pub noisy: Vec<Sample>,
    pub previews: Vec<Sample>,
    pub scores: Vec<f64>,
    /// Filled in once a weighting scheme has been applied.
    pub weights: Option<Vec<f64>>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.noises.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noises.is_empty()
    }
}

/// Draws `n` noises, noises `x0` with each, denoises every candidate `s` steps and scores the
/// previews with `r`.
#[allow(clippy::too_many_arguments)]
pub fn score_candidates(
    x0: &Sample,
    t: usize,
    n: usize,
    s: usize,
    d: &dyn Denoiser,
    r: &dyn RewardModel,
    y: Condition,
    rng: &mut dyn RngCore,
    g: &GuidanceConfig,
) -> Result<CandidateSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one candidate".into()));
    }
    let noises: Vec<Sample> = (0..n).map(|_| draw_noise(x0.shape(), rng)).collect();
    score_noises(x0, t, noises, s, d, r, y, g)
}

/// [`score_candidates`] with the noises supplied by the caller.
#[allow(clippy::too_many_arguments)]
pub(crate) fn score_noises(
    x0: &Sample,
    t: usize,
    noises: Vec<Sample>,
    s: usize,
    d: &dyn Denoiser,
    r: &dyn RewardModel,
    y: Condition,
    g: &GuidanceConfig,
) -> Result<CandidateSet> {
    let sched = d.schedule();
    sched.check(t)?;
    if x0.shape() != d.data_shape() {
        return Err(Error::ShapeMismatch {
            expected: d.data_shape().len(),
            actual: x0.len(),
        });
    }
    let dim = x0.len();
    let n = noises.len();
    let mut flat = vec![0.0; n * dim];
    for (row, eps) in flat.chunks_mut(dim).zip(&noises) {
        noise_into(x0.data(), eps.data(), sched.alpha(t), sched.sigma(t), row);
    }
    let previews = denoise_rows(d, &flat, n, y, t, s, g.cfg_scale, sched)?;
    let scores = r.score_rows(&previews, x0.shape(), Some(y))?;
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("candidate scores".into()));
    }
    let split = |v: &[f64]| -> Result<Vec<Sample>> {
        v.chunks(dim)
            .map(|c| Sample::new(c.to_vec(), x0.shape()))
            .collect::<Result<_>>()
            .map_err(|_| Error::NonFinite("candidate previews".into()))
    };
    Ok(CandidateSet {
        t,
        noisy: split(&flat)?,
        previews: split(&previews)?,
        noises,
        scores,
        weights: None,
    })
}
