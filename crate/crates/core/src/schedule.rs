//! Variance-preserving noise schedules and the forward noising process.

use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::Sample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleFamily {
    /// `α_t = cos(π/2 · t/T)`, `σ_t = sin(π/2 · t/T)`.
    #[default]
    Cosine,
    /// `σ_t = t/T`, `α_t = sqrt(1 - σ_t²)`.
    LinearSigma,
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cosine" => Ok(ScheduleFamily::Cosine),
            "linear-sigma" | "linear_sigma" => Ok(ScheduleFamily::LinearSigma),
            other => Err(Error::Config(format!("unknown schedule family `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleFamily::Cosine => "cosine",
            ScheduleFamily::LinearSigma => "linear-sigma",
        })
    }
}

/// Per-timestep coefficients `(α_t, σ_t)` for `t = 0..=T`, with `α_t² + σ_t² = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    family: ScheduleFamily,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn make_schedule(num_timesteps: usize, family: ScheduleFamily) -> Result<NoiseSchedule> {
    if num_timesteps < 2 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs at least 2 timesteps, got {num_timesteps}"
        )));
    }
    let n = num_timesteps as f64;
    let (alphas, sigmas) = (0..=num_timesteps)
        .map(|t| {
            if t == num_timesteps {
                return (0.0, 1.0);
            }
            match family {
                ScheduleFamily::Cosine => {
                    let phase = FRAC_PI_2 * t as f64 / n;
                    (phase.cos(), phase.sin())
                }
                ScheduleFamily::LinearSigma => {
                    let sigma = t as f64 / n;
                    ((1.0 - sigma * sigma).sqrt(), sigma)
                }
            }
        })
        .unzip();
    Ok(NoiseSchedule {
        family,
        alphas,
        sigmas,
    })
}

impl NoiseSchedule {
    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    /// `T`; valid timesteps are `0..=T`.
    pub fn num_timesteps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.num_timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.num_timesteps(),
            });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }
}

/// `x_t = α_t·x0 + σ_t·eps`, elementwise.
pub fn add_noise(x0: &Sample, eps: &Sample, t: usize, sched: &NoiseSchedule) -> Result<Sample> {
    x0.check_same_shape(eps)?;
    sched.check(t)?;
    let mut out = vec![0.0; x0.len()];
    noise_into(x0.data(), eps.data(), sched.alpha(t), sched.sigma(t), &mut out);
    Sample::new(out, x0.shape())
}

pub(crate) fn noise_into(x0: &[f64], eps: &[f64], alpha: f64, sigma: f64, out: &mut [f64]) {
    for ((o, &x), &e) in out.iter_mut().zip(x0).zip(eps) {
        *o = alpha * x + sigma * e;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Shape;
    use proptest::prelude::*;

    #[test]
    fn rejects_tiny_t() {
        assert!(make_schedule(1, ScheduleFamily::Cosine).is_err());
        assert!(make_schedule(0, ScheduleFamily::LinearSigma).is_err());
        assert!(make_schedule(2, ScheduleFamily::LinearSigma).is_ok());
    }

    #[test]
    fn cosine_boundaries_and_identity() {
        let s = make_schedule(1000, ScheduleFamily::Cosine).unwrap();
        assert_eq!(s.sigma(0), 0.0);
        assert_eq!(s.alpha(0), 1.0);
        assert!((s.sigma(1000) - 1.0).abs() < 1e-6);
        for t in 0..=1000 {
            let id = s.sigma(t).powi(2) + s.alpha(t).powi(2);
            assert!((id - 1.0).abs() < 1e-12, "t={t}");
            if t > 0 {
                assert!(s.sigma(t) > s.sigma(t - 1));
            }
        }
    }

    #[test]
    fn linear_sigma_values() {
        let s = make_schedule(10, ScheduleFamily::LinearSigma).unwrap();
        let expected = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        for (t, &e) in expected.iter().enumerate() {
            assert_eq!(s.sigma(t), e);
            assert_eq!(s.alpha(t), (1.0 - e * e).sqrt());
        }
    }

    #[test]
    fn add_noise_boundaries() {
        let s = make_schedule(1000, ScheduleFamily::Cosine).unwrap();
        let x0 = Sample::new(vec![0.3, -1.2], Shape::points(2)).unwrap();
        let eps = Sample::new(vec![1.5, 0.25], Shape::points(2)).unwrap();
        assert_eq!(add_noise(&x0, &eps, 0, &s).unwrap(), x0);
        let end = add_noise(&x0, &eps, 1000, &s).unwrap();
        for (a, b) in end.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(matches!(
            add_noise(&x0, &eps, 1001, &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
        let wrong = Sample::new(vec![0.0; 3], Shape::points(3)).unwrap();
        assert!(matches!(
            add_noise(&x0, &wrong, 3, &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn add_noise_arithmetic() {
        let mut out = [0.0; 2];
        noise_into(&[1.0, 0.0], &[0.0, 1.0], 0.6, 0.8, &mut out);
        assert_eq!(out, [0.6, 0.8]);
    }

    proptest! {
        #[test]
        fn noising_is_linear(
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            e in proptest::collection::vec(-5.0f64..5.0, 4),
            t in 0usize..=100,
            k in -8i32..8,
            a in -3.0f64..3.0,
        ) {
            let s = make_schedule(100, ScheduleFamily::Cosine).unwrap();
            let shape = Shape::points(4);
            let base = add_noise(
                &Sample::new(x.clone(), shape).unwrap(),
                &Sample::new(e.clone(), shape).unwrap(), t, &s).unwrap();
            // power-of-two scaling commutes with rounding, so equality is exact
            let p = 2f64.powi(k);
            let scaled = add_noise(
                &Sample::new(x.iter().map(|v| v * p).collect(), shape).unwrap(),
                &Sample::new(e.iter().map(|v| v * p).collect(), shape).unwrap(), t, &s).unwrap();
            for (u, v) in scaled.data().iter().zip(base.data()) {
                prop_assert_eq!(*u, v * p);
            }
            let scaled = add_noise(
                &Sample::new(x.iter().map(|v| v * a).collect(), shape).unwrap(),
                &Sample::new(e.iter().map(|v| v * a).collect(), shape).unwrap(), t, &s).unwrap();
            for (u, v) in scaled.data().iter().zip(base.data()) {
                prop_assert!((u - v * a).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }
}
