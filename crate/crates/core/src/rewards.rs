//! Black-box reward models and the analytic evaluation metric.

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSpec, ToyDataset};
use crate::error::{Error, Result};
use crate::nn::MlpLayout;
use crate::optim::Adam;
use crate::sample::{Condition, Sample, Shape};
use crate::train::{TrainConfig, Trained};

/// Scores a sample; higher is better. Scores are consumed as plain numbers, never differentiated.
pub trait RewardModel: Send + Sync {
    fn name(&self) -> &str;

    fn needs_condition(&self) -> bool;

    fn score(&self, x: &Sample, y: Option<Condition>) -> Result<f64>;

    /// Scores `xs.len() / shape.len()` row-major samples. Must agree with [`score`] row by row.
    ///
    /// [`score`]: RewardModel::score
    fn score_rows(&self, xs: &[f64], shape: Shape, y: Option<Condition>) -> Result<Vec<f64>> {
        xs.chunks(shape.len())
            .map(|row| self.score(&Sample::new(row.to_vec(), shape)?, y))
            .collect()
    }
}

fn required_class(name: &str, y: Option<Condition>) -> Result<usize> {
    y.and_then(|c| c.label())
        .ok_or_else(|| Error::MissingCondition(name.to_string()))
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits[k] - lse
}

/// Log-probability of the requested class under a small MLP classifier.
///
/// The network has one logit per class plus a final "background" logit trained on broad
/// off-data samples, so the score falls away from every class instead of saturating as a
/// sample is pushed further along its class direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReward {
    data_shape: Shape,
    layout: MlpLayout,
    params: Vec<f64>,
}

impl ClassifierReward {
    pub fn layer_sizes(data_shape: Shape, num_classes: usize) -> Vec<usize> {
        vec![data_shape.len(), 64, 64, num_classes + 1]
    }

    /// Fresh classifier with a zero output layer (uniform class probabilities).
    pub fn init(data_shape: Shape, num_classes: usize, seed: u64) -> Self {
        let layout = MlpLayout::new(Self::layer_sizes(data_shape, num_classes));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let params = layout.init(&mut rng, 0.0);
        Self {
            data_shape,
            layout,
            params,
        }
    }

    pub fn from_params(data_shape: Shape, layer_sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if layer_sizes.first() != Some(&data_shape.len())
            || layer_sizes.len() < 2
            || layer_sizes.last() < Some(&2)
        {
            return Err(Error::InvalidArgument(
                "classifier input size must match the data shape".into(),
            ));
        }
        let layout = MlpLayout::new(layer_sizes);
        if params.len() != layout.num_params() {
            return Err(Error::ShapeMismatch {
                expected: layout.num_params(),
                actual: params.len(),
            });
        }
        Ok(Self {
            data_shape,
            layout,
            params,
        })
    }

    pub fn data_shape(&self) -> Shape {
        self.data_shape
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.layout.output_dim() - 1
    }

    pub fn logits(&self, xs: &[f64]) -> Vec<f64> {
        let rows = xs.len() / self.data_shape.len();
        self.layout.forward(&self.params, xs, rows)
    }

    /// Arg-max over all logits; `num_classes()` means background.
    pub fn predict_class(&self, x: &Sample) -> usize {
        let logits = self.logits(x.data());
        // first maximum wins
        let mut best = 0;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, data: &ToyDataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = data
            .samples
            .iter()
            .filter(|(x, c)| Some(self.predict_class(x)) == c.label())
            .count();
        correct as f64 / data.len() as f64
    }
}

impl RewardModel for ClassifierReward {
    fn name(&self) -> &str {
        "classifier"
    }

    fn needs_condition(&self) -> bool {
        true
    }

    fn score(&self, x: &Sample, y: Option<Condition>) -> Result<f64> {
        Ok(self.score_rows(x.data(), x.shape(), y)?[0])
    }

    fn score_rows(&self, xs: &[f64], shape: Shape, y: Option<Condition>) -> Result<Vec<f64>> {
        let k = required_class(self.name(), y)?;
        if shape != self.data_shape {
            return Err(Error::ShapeMismatch {
                expected: self.data_shape.len(),
                actual: shape.len(),
            });
        }
        if k >= self.num_classes() {
            return Err(Error::InvalidArgument(format!("class {k} out of range")));
        }
        let c = self.num_classes() + 1;
        Ok(self.logits(xs).chunks(c).map(|l| log_softmax_at(l, k)).collect())
    }
}

/// Classifier plus its accuracy on the held-out split.
#[derive(Clone, Debug)]
pub struct ClassifierReport {
    pub trained: Trained<ClassifierReward>,
    pub held_out_accuracy: f64,
}

pub const CLASSIFIER_HELD_OUT: f64 = 0.2;

/// Minibatch cross-entropy training on 80% of `data`; accuracy is measured on the other 20%.
/// Each batch also carries `batch_size / C` background samples labelled with the extra class.
pub fn train_classifier_reward(data: &ToyDataset, cfg: &TrainConfig) -> Result<ClassifierReport> {
    cfg.validate()?;
    let present = data.class_counts().iter().filter(|&&n| n > 0).count();
    if present < 2 {
        return Err(Error::InvalidArgument(
            "classifier training needs at least two classes".into(),
        ));
    }
    let (train, held) = data.split(CLASSIFIER_HELD_OUT, cfg.seed);
    let num_classes = data.num_classes();
    let outputs = num_classes + 1;
    let background = data
        .spec
        .background((train.len() / num_classes).max(1), cfg.seed)?;
    let extra = (cfg.batch_size / num_classes).max(1);
    let mut model = ClassifierReward::init(data.shape(), num_classes, cfg.seed);
    let mut opt = Adam::new(model.params.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = data.shape().len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut xs = Vec::with_capacity(cfg.batch_size * dim);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (x, c) = &train.samples[rng.random_range(0..train.len())];
            xs.extend_from_slice(x.data());
            labels.push(c.label().expect("dataset samples carry a class"));
        }
        for _ in 0..extra {
            xs.extend_from_slice(background[rng.random_range(0..background.len())].data());
            labels.push(num_classes);
        }
        let trace = model.layout.forward_traced(&model.params, &xs, labels.len());
        let scale = 1.0 / labels.len() as f64;
        let mut loss = 0.0;
        let mut upstream = Vec::with_capacity(labels.len() * outputs);
        for (logits, &k) in trace.output().chunks(outputs).zip(&labels) {
            loss -= log_softmax_at(logits, k) * scale;
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                let p = (l - m).exp() / z;
                upstream.push((p - if j == k { 1.0 } else { 0.0 }) * scale);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut grad = vec![0.0; model.params.len()];
        model.layout.backward(&model.params, &trace, &upstream, &mut grad);
        opt.step(&mut model.params, &grad);
        losses.push(loss);
    }
    let held_out_accuracy = model.accuracy(&held);
    Ok(ClassifierReport {
        trained: Trained { model, losses },
        held_out_accuracy,
    })
}

/// `−λ·Σ (neighbour differences)²` on grids, `−λ·(‖x‖ − 1)²` on points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReward {
    pub lambda: f64,
}

impl SmoothnessReward {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument("smoothness weight must be nonnegative".into()));
        }
        Ok(Self { lambda })
    }

    fn penalty(x: &[f64], shape: Shape) -> f64 {
        match shape {
            Shape::Points { .. } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                (r - 1.0).powi(2)
            }
            Shape::Grid {
                height,
                width,
                channels,
            } => {
                let at = |i: usize, j: usize, c: usize| x[(i * width + j) * channels + c];
                let mut acc = 0.0;
                for i in 0..height {
                    for j in 0..width {
                        for c in 0..channels {
                            if j + 1 < width {
                                acc += (at(i, j + 1, c) - at(i, j, c)).powi(2);
                            }
                            if i + 1 < height {
                                acc += (at(i + 1, j, c) - at(i, j, c)).powi(2);
                            }
                        }
                    }
                }
                acc
            }
        }
    }
}

impl Default for SmoothnessReward {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl RewardModel for SmoothnessReward {
    fn name(&self) -> &str {
        "smoothness"
    }

    fn needs_condition(&self) -> bool {
        false
    }

    fn score(&self, x: &Sample, _y: Option<Condition>) -> Result<f64> {
        // written as a product with the negated weight so λ = 0 gives +0 rather than −0
        Ok((-self.lambda) * Self::penalty(x.data(), x.shape()) + 0.0)
    }
}

/// Weighted sum of component rewards with weights summing to 1.
#[derive(Clone)]
pub struct CompositeReward {
    components: Vec<(Arc<dyn RewardModel>, f64)>,
}

impl CompositeReward {
    pub fn new(components: Vec<(Arc<dyn RewardModel>, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("composite reward needs components".into()));
        }
        let total: f64 = components.iter().map(|(_, w)| w).sum();
        if components.iter().any(|(_, w)| !w.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "composite weights must sum to 1, got {total}"
            )));
        }
        Ok(Self { components })
    }

    /// 0.7 classifier + 0.3 smoothness.
    pub fn standard(classifier: Arc<ClassifierReward>, smoothness: SmoothnessReward) -> Self {
        Self {
            components: vec![(classifier, 0.7), (Arc::new(smoothness), 0.3)],
        }
    }
}

impl RewardModel for CompositeReward {
    fn name(&self) -> &str {
        "composite"
    }

    fn needs_condition(&self) -> bool {
        self.components.iter().any(|(r, _)| r.needs_condition())
    }

    fn score(&self, x: &Sample, y: Option<Condition>) -> Result<f64> {
        Ok(self.score_rows(x.data(), x.shape(), y)?[0])
    }

    fn score_rows(&self, xs: &[f64], shape: Shape, y: Option<Condition>) -> Result<Vec<f64>> {
        let mut total = vec![0.0; xs.len() / shape.len()];
        for (r, w) in &self.components {
            for (t, s) in total.iter_mut().zip(r.score_rows(xs, shape, y)?) {
                *t += w * s;
            }
        }
        Ok(total)
    }
}

/// Exact class-conditional log-density of the generating mixture. Evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleLikelihoodMetric {
    spec: DatasetSpec,
}

impl OracleLikelihoodMetric {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        if !matches!(spec, DatasetSpec::Mixture { .. }) {
            return Err(Error::InvalidSpec("oracle likelihood needs a mixture dataset".into()));
        }
        Ok(Self { spec })
    }
}

impl RewardModel for OracleLikelihoodMetric {
    fn name(&self) -> &str {
        "oracle-likelihood"
    }

    fn needs_condition(&self) -> bool {
        true
    }

    fn score(&self, x: &Sample, y: Option<Condition>) -> Result<f64> {
        let k = required_class(self.name(), y)?;
        self.spec.log_density(x.data(), k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Classifier,
    Smoothness,
    Composite,
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "classifier" => Ok(RewardKind::Classifier),
            "smoothness" => Ok(RewardKind::Smoothness),
            "composite" => Ok(RewardKind::Composite),
            other => Err(Error::Config(format!("unknown reward `{other}`"))),
        }
    }
}

impl std::fmt::Display for RewardKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardKind::Classifier => "classifier",
            RewardKind::Smoothness => "smoothness",
            RewardKind::Composite => "composite",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-metric mean and standard deviation of scores over `xs`.
pub fn evaluate(
    metrics: &[&dyn RewardModel],
    xs: &[Sample],
    y: Condition,
) -> Result<Vec<MetricSummary>> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    metrics
        .iter()
        .map(|m| {
            let scores = xs
                .iter()
                .map(|x| m.score(x, Some(y)))
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&scores);
            Ok(MetricSummary {
                name: m.name().to_string(),
                mean,
                std,
            })
        })
        .collect()
}
