//! MLP noise predictor with sinusoidal time features and learned class embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::nn::{MlpLayout, Trace};
use crate::sample::{Condition, ConditionTable, Shape};
use crate::schedule::{make_schedule, NoiseSchedule, ScheduleFamily};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub data_shape: Shape,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
    pub num_classes: usize,
    pub num_timesteps: usize,
    pub schedule_family: ScheduleFamily,
}

impl DenoiserArch {
    pub fn new(data_shape: Shape, num_classes: usize) -> Self {
        Self {
            data_shape,
            hidden: vec![128; 4],
            time_embed_dim: 32,
            cond_dim: 16,
            num_classes,
            num_timesteps: 1000,
            schedule_family: ScheduleFamily::Cosine,
        }
    }

    pub fn with_schedule(mut self, sched: &NoiseSchedule) -> Self {
        self.num_timesteps = sched.num_timesteps();
        self.schedule_family = sched.family();
        self
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let d = self.data_shape.len();
        let mut sizes = vec![d + self.time_embed_dim + self.cond_dim];
        sizes.extend(&self.hidden);
        sizes.push(d);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_shape.is_empty() || self.num_classes == 0 {
            return Err(Error::InvalidArgument(
                "denoiser needs a nonempty data shape and at least one class".into(),
            ));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("time embedding dimension must be even".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden layers must be nonempty".into()));
        }
        Ok(())
    }
}

/// `[sin(t·f_k)..., cos(t·f_k)...]` with geometrically spaced frequencies, for every `t` in `0..=T`.
pub(crate) fn time_embedding_table(num_timesteps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut table = Vec::with_capacity((num_timesteps + 1) * dim);
    for t in 0..=num_timesteps {
        // rescale so the frequency range does not depend on T
        let tt = t as f64 * 1000.0 / num_timesteps as f64;
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((tt * f).sin(), (tt * f).cos())).unzip();
        table.extend(s);
        table.extend(c);
    }
    table
}

/// Parameters are the MLP weights followed by the condition table; the table's last row belongs
/// to [`Condition::NULL`], stays zero and never receives gradient.
#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    arch: DenoiserArch,
    layout: MlpLayout,
    params: Vec<f64>,
    schedule: NoiseSchedule,
    temb: Vec<f64>,
}

pub struct MlpTrace {
    net: Trace,
    conds: Vec<Condition>,
}

impl MlpDenoiser {
    pub fn init(arch: DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = MlpLayout::new(arch.layer_sizes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut params = layout.init(&mut rng, 1.0);
        let table_len = (arch.num_classes + 1) * arch.cond_dim;
        let mut table = vec![0.0; table_len];
        for v in &mut table[..arch.num_classes * arch.cond_dim] {
            *v = rng.random_range(-1.0..1.0);
        }
        params.extend(table);
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: DenoiserArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = MlpLayout::new(arch.layer_sizes());
        let expected = layout.num_params() + (arch.num_classes + 1) * arch.cond_dim;
        if params.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser parameters".into()));
        }
        let schedule = make_schedule(arch.num_timesteps, arch.schedule_family)?;
        let temb = time_embedding_table(arch.num_timesteps, arch.time_embed_dim);
        Ok(Self {
            arch,
            layout,
            params,
            schedule,
            temb,
        })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    fn net_params(&self) -> &[f64] {
        &self.params[..self.layout.num_params()]
    }

    pub fn condition_table(&self) -> ConditionTable<'_> {
        ConditionTable::new(
            &self.params[self.layout.num_params()..],
            self.arch.num_classes,
            self.arch.cond_dim,
        )
    }

    fn features(&self, xs: &[f64], conds: &[Condition], ts: &[usize]) -> Vec<f64> {
        let d = self.arch.data_shape.len();
        let e = self.arch.time_embed_dim;
        let table = self.condition_table();
        let mut feats = Vec::with_capacity(conds.len() * self.layout.input_dim());
        for (r, (&c, &t)) in conds.iter().zip(ts).enumerate() {
            feats.extend_from_slice(&xs[r * d..(r + 1) * d]);
            feats.extend_from_slice(&self.temb[t * e..(t + 1) * e]);
            feats.extend_from_slice(table.embed(c));
        }
        feats
    }
}

impl Denoiser for MlpDenoiser {
    fn data_shape(&self) -> Shape {
        self.arch.data_shape
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn predict_rows(&self, xs: &[f64], conds: &[Condition], ts: &[usize]) -> Vec<f64> {
        let feats = self.features(xs, conds, ts);
        self.layout.forward(self.net_params(), &feats, conds.len())
    }
}

impl TrainableDenoiser for MlpDenoiser {
    type Trace = MlpTrace;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_traced(&self, xs: &[f64], conds: &[Condition], ts: &[usize]) -> (Vec<f64>, MlpTrace) {
        let feats = self.features(xs, conds, ts);
        let net = self.layout.forward_traced(self.net_params(), &feats, conds.len());
        let out = net.output().to_vec();
        (
            out,
            MlpTrace {
                net,
                conds: conds.to_vec(),
            },
        )
    }

    fn backward(&self, trace: &MlpTrace, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n_net = self.layout.num_params();
        let mut grad = vec![0.0; self.params.len()];
        let g_in = self
            .layout
            .backward(self.net_params(), &trace.net, grad_out, &mut grad[..n_net]);
        let d = self.arch.data_shape.len();
        let e = self.arch.time_embed_dim;
        let k = self.arch.cond_dim;
        let f = self.layout.input_dim();
        let table = self.condition_table();
        let mut gx = Vec::with_capacity(trace.conds.len() * d);
        for (r, &c) in trace.conds.iter().enumerate() {
            let row = &g_in[r * f..(r + 1) * f];
            gx.extend_from_slice(&row[..d]);
            if c.is_null() {
                continue;
            }
            let off = n_net + table.row_index(c) * k;
            for (g, &v) in grad[off..off + k].iter_mut().zip(&row[d + e..]) {
                *g += v;
            }
        }
        (grad, gx)
    }
}
