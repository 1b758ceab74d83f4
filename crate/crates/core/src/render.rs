//! Differentiable generators `x = g(θ, view)` with exact vector-Jacobian products.

use std::f64::consts::TAU;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{Sample, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum View {
    Identity,
    /// Rotated, scaled crop. `offset = (row, col)` of the crop's top-left corner before rotation
    /// and scaling about the crop centre.
    Patch {
        angle: f64,
        offset: (f64, f64),
        scale: f64,
    },
}

pub trait Renderer: Send + Sync {
    fn param_len(&self) -> usize;

    fn output_shape(&self) -> Shape;

    fn validate_view(&self, view: &View) -> Result<()>;

    fn render(&self, theta: &[f64], view: &View) -> Result<Sample>;

    /// `Jᵀ·upstream`, where `J` is the Jacobian of [`Renderer::render`] at `θ`.
    fn vjp(&self, theta: &[f64], view: &View, upstream: &Sample) -> Result<Vec<f64>>;

    fn sample_view(&self, rng: &mut dyn RngCore) -> View;
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { expected, actual });
    }
    Ok(())
}

/// `g(θ) = θ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentityRenderer {
    shape: Shape,
}

impl IdentityRenderer {
    pub fn new(shape: Shape) -> Self {
        Self { shape }
    }
}

impl Renderer for IdentityRenderer {
    fn param_len(&self) -> usize {
        self.shape.len()
    }

    fn output_shape(&self) -> Shape {
        self.shape
    }

    fn validate_view(&self, view: &View) -> Result<()> {
        match view {
            View::Identity => Ok(()),
            other => Err(Error::InvalidView(format!("{other:?} on the identity renderer"))),
        }
    }

    fn render(&self, theta: &[f64], view: &View) -> Result<Sample> {
        self.validate_view(view)?;
        check_len(self.param_len(), theta.len())?;
        Sample::new(theta.to_vec(), self.shape)
    }

    fn vjp(&self, theta: &[f64], view: &View, upstream: &Sample) -> Result<Vec<f64>> {
        self.validate_view(view)?;
        check_len(self.param_len(), theta.len())?;
        check_len(self.shape.len(), upstream.len())?;
        Ok(upstream.data().to_vec())
    }

    fn sample_view(&self, _rng: &mut dyn RngCore) -> View {
        View::Identity
    }
}

/// Bilinear resampling of a single-channel `scene_h × scene_w` grid into a `patch × patch` crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRenderer {
    scene_h: usize,
    scene_w: usize,
    patch: usize,
}

/// One output pixel's four source indices and bilinear fractions.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    fy: f64,
    fx: f64,
}

fn axis(coord: f64, len: usize) -> (usize, usize, f64) {
    let c0 = coord.floor() as usize;
    if c0 + 1 >= len {
        (len - 1, len - 1, 0.0)
    } else {
        (c0, c0 + 1, coord - c0 as f64)
    }
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a + f * (b - a)
}

const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
const BOUNDS_SLACK: f64 = 1e-9;

impl PatchRenderer {
    pub fn new(scene_h: usize, scene_w: usize, patch: usize) -> Result<Self> {
        if patch < 2 || scene_h < patch || scene_w < patch {
            return Err(Error::InvalidArgument(format!(
                "scene {scene_h}x{scene_w} cannot hold a {patch}x{patch} patch"
            )));
        }
        Ok(Self {
            scene_h,
            scene_w,
            patch,
        })
    }

    /// 13×13 scene viewed through 8×8 patches: the smallest scene that fits every rotation at
    /// the largest view scale, so each view keeps the scene centre in frame.
    pub fn standard() -> Self {
        Self {
            scene_h: 13,
            scene_w: 13,
            patch: 8,
        }
    }

    pub fn scene_shape(&self) -> Shape {
        Shape::grid(self.scene_h, self.scene_w, 1)
    }

    fn half(&self) -> f64 {
        (self.patch as f64 - 1.0) / 2.0
    }

    /// Largest distance of a sample point from the crop centre along each axis.
    fn reach(&self, angle: f64, scale: f64) -> f64 {
        let (s, c) = angle.sin_cos();
        scale * self.half() * (s.abs() + c.abs())
    }

    /// Source coordinates `(row, col)` of output pixel `(i, j)`.
    fn source(&self, view: &View, i: usize, j: usize) -> (f64, f64) {
        let View::Patch {
            angle,
            offset,
            scale,
        } = *view
        else {
            unreachable!("validated before use")
        };
        let h = self.half();
        let (u, v) = (j as f64 - h, i as f64 - h);
        let (s, c) = angle.sin_cos();
        let col = scale * (c * u - s * v) + offset.1 + h;
        let row = scale * (s * u + c * v) + offset.0 + h;
        (row, col)
    }

    fn taps(&self, view: &View) -> Vec<Tap> {
        let mut taps = Vec::with_capacity(self.patch * self.patch);
        for i in 0..self.patch {
            for j in 0..self.patch {
                let (row, col) = self.source(view, i, j);
                let (i0, i1, fy) = axis(row.clamp(0.0, (self.scene_h - 1) as f64), self.scene_h);
                let (j0, j1, fx) = axis(col.clamp(0.0, (self.scene_w - 1) as f64), self.scene_w);
                taps.push(Tap {
                    i0,
                    i1,
                    j0,
                    j1,
                    fy,
                    fx,
                });
            }
        }
        taps
    }
}

impl Renderer for PatchRenderer {
    fn param_len(&self) -> usize {
        self.scene_h * self.scene_w
    }

    fn output_shape(&self) -> Shape {
        Shape::grid(self.patch, self.patch, 1)
    }

    fn validate_view(&self, view: &View) -> Result<()> {
        let View::Patch {
            angle,
            offset,
            scale,
        } = *view
        else {
            return Err(Error::InvalidView("patch renderer needs a patch view".into()));
        };
        if !(angle.is_finite() && offset.0.is_finite() && offset.1.is_finite()) {
            return Err(Error::InvalidView("non-finite view".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidView(format!("scale must be positive, got {scale}")));
        }
        let r = self.reach(angle, scale);
        let h = self.half();
        let (cy, cx) = (offset.0 + h, offset.1 + h);
        let inside = |c: f64, len: usize| {
            c - r >= -BOUNDS_SLACK && c + r <= (len - 1) as f64 + BOUNDS_SLACK
        };
        if !(inside(cy, self.scene_h) && inside(cx, self.scene_w)) {
            return Err(Error::InvalidView(format!("crop leaves the scene: {view:?}")));
        }
        Ok(())
    }

    fn render(&self, theta: &[f64], view: &View) -> Result<Sample> {
        self.validate_view(view)?;
        check_len(self.param_len(), theta.len())?;
        let w = self.scene_w;
        let out = self
            .taps(view)
            .iter()
            .map(|t| {
                let top = lerp(theta[t.i0 * w + t.j0], theta[t.i0 * w + t.j1], t.fx);
                let bottom = lerp(theta[t.i1 * w + t.j0], theta[t.i1 * w + t.j1], t.fx);
                lerp(top, bottom, t.fy)
            })
            .collect();
        Sample::new(out, self.output_shape())
    }

    fn vjp(&self, theta: &[f64], view: &View, upstream: &Sample) -> Result<Vec<f64>> {
        self.validate_view(view)?;
        check_len(self.param_len(), theta.len())?;
        check_len(self.output_shape().len(), upstream.len())?;
        let w = self.scene_w;
        let mut grad = vec![0.0; theta.len()];
        for (t, &u) in self.taps(view).iter().zip(upstream.data()) {
            grad[t.i0 * w + t.j0] += u * (1.0 - t.fy) * (1.0 - t.fx);
            grad[t.i0 * w + t.j1] += u * (1.0 - t.fy) * t.fx;
            grad[t.i1 * w + t.j0] += u * t.fy * (1.0 - t.fx);
            grad[t.i1 * w + t.j1] += u * t.fy * t.fx;
        }
        Ok(grad)
    }

    /// Angle uniform on `[0, 2π)`, scale uniform on `[0.8, 1.2]`, then the crop centre uniform over
    /// the positions that keep the rotated crop inside the scene.
    fn sample_view(&self, rng: &mut dyn RngCore) -> View {
        let angle = rng.random::<f64>() * TAU;
        let scale = SCALE_RANGE.0 + (SCALE_RANGE.1 - SCALE_RANGE.0) * rng.random::<f64>();
        let r = self.reach(angle, scale);
        let h = self.half();
        let mut centre = |len: usize| {
            let (lo, hi) = (r, (len - 1) as f64 - r);
            lo + (hi - lo) * rng.random::<f64>()
        };
        let cy = centre(self.scene_h);
        let cx = centre(self.scene_w);
        View::Patch {
            angle,
            offset: (cy - h, cx - h),
            scale,
        }
    }
}
