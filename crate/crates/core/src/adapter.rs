//! Frozen base denoiser plus a small trainable residual, fine-tuned online during VSD.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{diffusion_loss_and_grad, Denoiser, LossWeighting, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::mlp_denoiser::time_embedding_table;
use crate::nn::{MlpLayout, Trace};
use crate::optim::Adam;
use crate::sample::{Condition, Sample, Shape};
use crate::schedule::NoiseSchedule;

const ADAPTER_TIME_DIM: usize = 16;

/// `ε_adapter(x, y, t) = ε_base(x, y, t) + r(x, t, onehot(y))`.
///
/// The residual's output layer starts at zero, so a fresh adapter reproduces the base exactly.
#[derive(Clone)]
pub struct AdapterDenoiser {
    base: Arc<dyn Denoiser>,
    num_classes: usize,
    layout: MlpLayout,
    params: Vec<f64>,
    temb: Vec<f64>,
    optimizer: Adam,
}

pub struct AdapterTrace {
    net: Trace,
}

impl AdapterDenoiser {
    pub fn new(base: Arc<dyn Denoiser>, hidden: &[usize], seed: u64) -> Self {
        let num_classes = base.num_classes();
        let d = base.data_shape().len();
        let mut sizes = vec![d + ADAPTER_TIME_DIM + num_classes];
        sizes.extend(hidden);
        sizes.push(d);
        let layout = MlpLayout::new(sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let params = layout.init(&mut rng, 0.0);
        let temb = time_embedding_table(base.schedule().num_timesteps(), ADAPTER_TIME_DIM);
        let optimizer = Adam::new(params.len(), 1e-3);
        Self {
            base,
            num_classes,
            layout,
            params,
            temb,
            optimizer,
        }
    }

    /// Two hidden layers of width 32.
    pub fn standard(base: Arc<dyn Denoiser>, seed: u64) -> Self {
        Self::new(base, &[32, 32], seed)
    }

    pub fn base(&self) -> &Arc<dyn Denoiser> {
        &self.base
    }

    pub fn residual_params(&self) -> &[f64] {
        &self.params
    }

    fn features(&self, xs: &[f64], conds: &[Condition], ts: &[usize]) -> Vec<f64> {
        let d = self.base.data_shape().len();
        let mut feats = Vec::with_capacity(conds.len() * self.layout.input_dim());
        for (r, (&c, &t)) in conds.iter().zip(ts).enumerate() {
            feats.extend_from_slice(&xs[r * d..(r + 1) * d]);
            feats.extend_from_slice(&self.temb[t * ADAPTER_TIME_DIM..(t + 1) * ADAPTER_TIME_DIM]);
            let start = feats.len();
            feats.resize(start + self.num_classes, 0.0);
            if let Some(l) = c.label() {
                feats[start + l] = 1.0;
            }
        }
        feats
    }
}

impl Denoiser for AdapterDenoiser {
    fn data_shape(&self) -> Shape {
        self.base.data_shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.base.schedule()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict_rows(&self, xs: &[f64], conds: &[Condition], ts: &[usize]) -> Vec<f64> {
        let mut out = self.base.predict_rows(xs, conds, ts);
        let feats = self.features(xs, conds, ts);
        let res = self.layout.forward(&self.params, &feats, conds.len());
        for (o, r) in out.iter_mut().zip(res) {
            *o += r;
        }
        out
    }
}

impl TrainableDenoiser for AdapterDenoiser {
    type Trace = AdapterTrace;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_traced(&self, xs: &[f64], conds: &[Condition], ts: &[usize]) -> (Vec<f64>, AdapterTrace) {
        let mut out = self.base.predict_rows(xs, conds, ts);
        let feats = self.features(xs, conds, ts);
        let net = self.layout.forward_traced(&self.params, &feats, conds.len());
        for (o, r) in out.iter_mut().zip(net.output()) {
            *o += r;
        }
        (out, AdapterTrace { net })
    }

    /// Gradient with respect to the residual weights only. The input gradient covers the residual
    /// branch alone, since the base is treated as a black box.
    fn backward(&self, trace: &AdapterTrace, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let g_in = self.layout.backward(&self.params, &trace.net, grad_out, &mut grad);
        let d = self.base.data_shape().len();
        let f = self.layout.input_dim();
        let gx = g_in.chunks(f).flat_map(|row| row[..d].to_vec()).collect();
        (grad, gx)
    }
}

/// One Adam step of the diffusion objective on `renders`, applied to the residual only.
/// Returns the loss before the step.
pub fn adapter_update<R: Rng + ?Sized>(
    a: &mut AdapterDenoiser,
    renders: &[Sample],
    y: Condition,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    if renders.is_empty() {
        return Err(Error::InvalidArgument("adapter update needs at least one render".into()));
    }
    let (loss, grad) = diffusion_loss_and_grad(&*a, renders, y, rng, LossWeighting::Constant)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adapter gradient".into()));
    }
    a.optimizer.learning_rate = lr;
    a.optimizer.step(&mut a.params, &grad);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp_denoiser::{DenoiserArch, MlpDenoiser};

    fn base() -> Arc<MlpDenoiser> {
        let arch = DenoiserArch {
            hidden: vec![16, 16],
            time_embed_dim: 8,
            cond_dim: 4,
            num_timesteps: 100,
            ..DenoiserArch::new(Shape::points(2), 3)
        };
        Arc::new(MlpDenoiser::init(arch, 1).unwrap())
    }

    #[test]
    fn zero_residual_matches_base_exactly() {
        let b = base();
        let a = AdapterDenoiser::standard(b.clone(), 0);
        let xs = [0.5, -1.5, 2.0, 0.25];
        let conds = [Condition::class(2), Condition::NULL];
        let ts = [7, 93];
        assert_eq!(a.predict_rows(&xs, &conds, &ts), b.predict_rows(&xs, &conds, &ts));
    }

    #[test]
    fn updates_leave_base_untouched() {
        let b = base();
        let before = b.params().to_vec();
        let mut a = AdapterDenoiser::standard(b.clone(), 0);
        let renders = vec![Sample::new(vec![1.0, 1.0], Shape::points(2)).unwrap(); 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = a.residual_params().to_vec();
        for _ in 0..5 {
            adapter_update(&mut a, &renders, Condition::class(0), 1e-3, &mut rng).unwrap();
        }
        assert_eq!(b.params(), before.as_slice());
        assert_ne!(a.residual_params(), first.as_slice());
    }

    #[test]
    fn zero_learning_rate_keeps_residual() {
        let mut a = AdapterDenoiser::standard(base(), 0);
        let first = a.residual_params().to_vec();
        let renders = vec![Sample::new(vec![1.0, 1.0], Shape::points(2)).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        adapter_update(&mut a, &renders, Condition::class(0), 0.0, &mut rng).unwrap();
        assert_eq!(a.residual_params(), first.as_slice());
        assert!(adapter_update(&mut a, &[], Condition::class(0), 0.1, &mut rng).is_err());
    }
}
