//! Synthetic conditional datasets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{Condition, Sample, Shape};

/// One Gaussian mode with diagonal covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub weight: f64,
}

impl GaussianComponent {
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Self {
        let variances = vec![variance; mean.len()];
        Self {
            mean,
            variances,
            weight: 1.0,
        }
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &m), &v) in x.iter().zip(&self.mean).zip(&self.variances) {
            let d = xi - m;
            acc -= 0.5 * (d * d / v + (2.0 * PI * v).ln());
        }
        acc
    }
}

/// Generator description for a [`ToyDataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Each class is a Gaussian mixture over `R^dim`.
    Mixture {
        dim: usize,
        classes: Vec<Vec<GaussianComponent>>,
    },
    /// `size × size` single-channel grids of soft-edged shapes (disk, ring, cross, square)
    /// with random rotation, scale and position jitter, values roughly in `[-1, 1]`.
    Shapes { size: usize, pixel_noise: f64 },
}

pub const SHAPE_CLASSES: [&str; 4] = ["disk", "ring", "cross", "square"];

impl DatasetSpec {
    /// `num_classes` isotropic modes evenly spaced on a circle in 2D.
    pub fn circle_mixture(num_classes: usize, radius: f64, variance: f64) -> Self {
        let classes = (0..num_classes)
            .map(|k| {
                let angle = 2.0 * PI * k as f64 / num_classes as f64;
                vec![GaussianComponent::isotropic(
                    vec![radius * angle.cos(), radius * angle.sin()],
                    variance,
                )]
            })
            .collect();
        DatasetSpec::Mixture { dim: 2, classes }
    }

    /// The 4-class mixture used throughout the experiments.
    pub fn standard_mixture() -> Self {
        Self::circle_mixture(4, 3.0, 0.15)
    }

    pub fn standard_shapes() -> Self {
        DatasetSpec::Shapes {
            size: 8,
            pixel_noise: 0.05,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Mixture { classes, .. } => classes.len(),
            DatasetSpec::Shapes { .. } => SHAPE_CLASSES.len(),
        }
    }

    pub fn shape(&self) -> Shape {
        match *self {
            DatasetSpec::Mixture { dim, .. } => Shape::points(dim),
            DatasetSpec::Shapes { size, .. } => Shape::grid(size, size, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Mixture { dim, classes } => {
                if *dim == 0 || classes.is_empty() {
                    return Err(Error::InvalidSpec("mixture needs dim ≥ 1 and ≥ 1 class".into()));
                }
                for (c, comps) in classes.iter().enumerate() {
                    if comps.is_empty() {
                        return Err(Error::InvalidSpec(format!("class {c} has no components")));
                    }
                    for comp in comps {
                        if comp.mean.len() != *dim || comp.variances.len() != *dim {
                            return Err(Error::InvalidSpec(format!(
                                "class {c}: component dimension does not match {dim}"
                            )));
                        }
                        if comp.variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                            return Err(Error::InvalidSpec(format!(
                                "class {c}: variances must be finite and nonnegative"
                            )));
                        }
                        if !(comp.weight.is_finite() && comp.weight > 0.0) {
                            return Err(Error::InvalidSpec(format!(
                                "class {c}: component weights must be positive"
                            )));
                        }
                        if comp.mean.iter().any(|m| !m.is_finite()) {
                            return Err(Error::InvalidSpec(format!("class {c}: non-finite mean")));
                        }
                    }
                }
                Ok(())
            }
            DatasetSpec::Shapes { size, pixel_noise } => {
                if *size < 4 {
                    return Err(Error::InvalidSpec("shape grids must be at least 4x4".into()));
                }
                if !(pixel_noise.is_finite() && *pixel_noise >= 0.0) {
                    return Err(Error::InvalidSpec("pixel noise must be nonnegative".into()));
                }
                Ok(())
            }
        }
    }

    /// Exact log-density of `x` under the mixture of class `class`.
    ///
    /// Only defined for mixture specs whose variances are all positive.
    pub fn log_density(&self, x: &[f64], class: usize) -> Result<f64> {
        let DatasetSpec::Mixture { dim, classes } = self else {
            return Err(Error::InvalidSpec("shape grids have no analytic density".into()));
        };
        if x.len() != *dim {
            return Err(Error::ShapeMismatch {
                expected: *dim,
                actual: x.len(),
            });
        }
        let comps = classes
            .get(class)
            .ok_or_else(|| Error::InvalidArgument(format!("class {class} out of range")))?;
        if comps.iter().any(|c| c.variances.iter().any(|&v| v <= 0.0)) {
            return Err(Error::InvalidSpec("density needs strictly positive variances".into()));
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        let logs: Vec<f64> = comps
            .iter()
            .map(|c| (c.weight / total).ln() + c.log_density(x))
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln())
    }
}

impl DatasetSpec {
    /// Broad "none of the classes" samples used as an extra classifier class: an isotropic
    /// Gaussian reaching well past every mode for mixtures, i.i.d. pixel noise for grids.
    pub fn background(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let shape = self.shape();
        let std = match self {
            DatasetSpec::Mixture { classes, .. } => {
                let reach = classes
                    .iter()
                    .flatten()
                    .map(|c| {
                        let r = c.mean.iter().map(|m| m * m).sum::<f64>().sqrt();
                        let v = c.variances.iter().copied().fold(0.0, f64::max);
                        r + 3.0 * v.sqrt()
                    })
                    .fold(0.0, f64::max);
                1.5 * reach.max(1.0)
            }
            DatasetSpec::Shapes { .. } => 0.6,
        };
        (0..n)
            .map(|_| {
                let data = (0..shape.len())
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Sample::new(data, shape)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub spec: DatasetSpec,
    pub samples: Vec<(Sample, Condition)>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn shape(&self) -> Shape {
        self.spec.shape()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for (_, c) in &self.samples {
            if let Some(l) = c.label() {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Deterministic split into `(train, held_out)` with `held_out_fraction` of samples held out.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (ToyDataset, ToyDataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n_held = ((self.len() as f64) * held_out_fraction).round() as usize;
        let pick = |ids: &[usize]| ToyDataset {
            spec: self.spec.clone(),
            samples: ids.iter().map(|&i| self.samples[i].clone()).collect(),
        };
        (pick(&idx[n_held..]), pick(&idx[..n_held]))
    }
}

/// Draws `n` class-balanced samples; sample `i` belongs to class `i mod C`.
pub fn generate_dataset(spec: &DatasetSpec, n: usize, seed: u64) -> Result<ToyDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = spec.num_classes();
    let shape = spec.shape();
    let samples = (0..n)
        .map(|i| {
            let class = i % num_classes;
            let data = match spec {
                DatasetSpec::Mixture { classes, .. } => sample_mixture(&classes[class], &mut rng),
                DatasetSpec::Shapes { size, pixel_noise } => {
                    sample_shape(class, *size, *pixel_noise, &mut rng)
                }
            };
            Sample::new(data, shape).map(|s| (s, Condition::class(class)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyDataset {
        spec: spec.clone(),
        samples,
    })
}

fn sample_mixture<R: Rng + ?Sized>(comps: &[GaussianComponent], rng: &mut R) -> Vec<f64> {
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    let comp = if comps.len() == 1 {
        &comps[0]
    } else {
        let mut u = rng.random::<f64>() * total;
        comps
            .iter()
            .find(|c| {
                u -= c.weight;
                u < 0.0
            })
            .unwrap_or(comps.last().unwrap())
    };
    comp.mean
        .iter()
        .zip(&comp.variances)
        .map(|(&m, &v)| {
            let z: f64 = rng.sample(StandardNormal);
            m + v.sqrt() * z
        })
        .collect()
}

fn box_sdf(px: f64, py: f64, hx: f64, hy: f64) -> f64 {
    let qx = px.abs() - hx;
    let qy = py.abs() - hy;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

/// Signed distance (pixels, negative inside) of shape `class` at point `(px, py)` in the
/// shape's own frame, scaled by `s`.
pub(crate) fn shape_sdf(class: usize, px: f64, py: f64, s: f64) -> f64 {
    let r = (px * px + py * py).sqrt();
    match class {
        0 => r - 2.2 * s,
        1 => (r - 2.6 * s).abs() - 0.6,
        2 => box_sdf(px, py, 3.2 * s, 0.7).min(box_sdf(px, py, 0.7, 3.2 * s)),
        _ => box_sdf(px, py, 2.0 * s, 2.0 * s),
    }
}

fn sample_shape<R: Rng + ?Sized>(class: usize, size: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    let angle = rng.random::<f64>() * 2.0 * PI;
    let scale = 0.85 + 0.3 * rng.random::<f64>();
    let cx = (size as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0);
    let cy = (size as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dx, dy) = (j as f64 - cx, i as f64 - cy);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let sd = shape_sdf(class, u, v, scale);
            // soft edge: +1 inside, -1 outside
            let val = (-sd / 0.35 * 0.5).tanh();
            let z: f64 = rng.sample(StandardNormal);
            out.push(val + noise * z);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = DatasetSpec::circle_mixture(2, 3.0, 0.15);
        let a = generate_dataset(&spec, 1000, 7).unwrap();
        let b = generate_dataset(&spec, 1000, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 1000, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_variance_collapses_to_mean() {
        let spec = DatasetSpec::Mixture {
            dim: 3,
            classes: vec![vec![GaussianComponent::isotropic(vec![1.0, -2.0, 0.5], 0.0)]],
        };
        let ds = generate_dataset(&spec, 50, 1).unwrap();
        assert!(ds.samples.iter().all(|(s, _)| s.data() == [1.0, -2.0, 0.5]));
    }

    #[test]
    fn class_balanced_within_one() {
        for n in [1, 2, 3, 999, 1000, 1001] {
            let ds = generate_dataset(&DatasetSpec::standard_mixture(), n, 3).unwrap();
            let counts = ds.class_counts();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "n={n}: {counts:?}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let neg = DatasetSpec::Mixture {
            dim: 2,
            classes: vec![vec![GaussianComponent::isotropic(vec![0.0, 0.0], -0.1)]],
        };
        assert!(matches!(generate_dataset(&neg, 10, 0), Err(Error::InvalidSpec(_))));
        let wrong_dim = DatasetSpec::Mixture {
            dim: 3,
            classes: vec![vec![GaussianComponent::isotropic(vec![0.0, 0.0], 0.1)]],
        };
        assert!(wrong_dim.validate().is_err());
        assert!(generate_dataset(&DatasetSpec::standard_mixture(), 0, 0).is_err());
    }

    #[test]
    fn log_density_is_finite_and_peaks_at_mean() {
        let spec = DatasetSpec::standard_mixture();
        let ds = generate_dataset(&spec, 400, 11).unwrap();
        for (s, c) in &ds.samples {
            assert!(spec.log_density(s.data(), c.label().unwrap()).unwrap().is_finite());
        }
        let at_mean = spec.log_density(&[3.0, 0.0], 0).unwrap();
        let expected = -(2.0 * PI * 0.15).ln();
        assert!((at_mean - expected).abs() < 1e-12);
        let off = spec.log_density(&[3.0 + 3.0 * 0.15f64.sqrt(), 0.0], 0).unwrap();
        assert!(at_mean > off);
    }

    #[test]
    fn shapes_are_bounded_and_distinct() {
        let spec = DatasetSpec::Shapes {
            size: 8,
            pixel_noise: 0.0,
        };
        let ds = generate_dataset(&spec, 8, 5).unwrap();
        for (s, _) in &ds.samples {
            assert_eq!(s.len(), 64);
            assert!(s.data().iter().all(|v| v.abs() <= 1.0));
        }
        // disks are filled at the center, rings are hollow
        let center = |k: usize| {
            let d = ds.samples[k].0.data();
            (d[27] + d[28] + d[35] + d[36]) / 4.0
        };
        assert!(center(0) > 0.0);
        assert!(center(1) < 0.0);
    }

    #[test]
    fn split_partitions_the_data() {
        let ds = generate_dataset(&DatasetSpec::standard_mixture(), 100, 2).unwrap();
        let (train, held) = ds.split(0.2, 9);
        assert_eq!(train.len(), 80);
        assert_eq!(held.len(), 20);
        assert_eq!(ds.split(0.2, 9), (train, held));
    }
}
