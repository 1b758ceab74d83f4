//! Experiment orchestration: run configurations, seeded repetitions, sweeps and reports.

mod report;
mod run;
mod sweep;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use report::{report, write_report, Report, ReportKind};
pub use run::{
    fingerprint, record_dir, run, MetricStats, ResultRecord, RunOptions, RunOutcome, RunStatus,
    SweepPoint,
};
pub use sweep::{sweep, Preset, SweepOutcome, SweepParam, SweepSpec, TrendPoint, TrendSummary};

use crate::config::{distill_config, ConfigFile, DatasetConfig};
use crate::denoiser::Denoiser;
use crate::distill::{DistillConfig, EditSource, Method};
use crate::error::{Error, Result};
use crate::mlp_denoiser::MlpDenoiser;
use crate::persist;
use crate::render::{IdentityRenderer, PatchRenderer, Renderer};
use crate::rewards::{
    ClassifierReward, CompositeReward, OracleLikelihoodMetric, RewardKind, RewardModel,
    SmoothnessReward,
};
use crate::sample::{Condition, Sample};

/// Something scored on final renders: a reward model or the analytic oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum MetricKind {
    Reward(RewardKind),
    OracleLikelihood,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricKind::Reward(r) => r.fmt(f),
            MetricKind::OracleLikelihood => f.write_str("oracle-likelihood"),
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "oracle-likelihood" | "oracle" => Ok(MetricKind::OracleLikelihood),
            other => other.parse().map(MetricKind::Reward),
        }
    }
}

impl From<MetricKind> for String {
    fn from(m: MetricKind) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for MetricKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RendererKind {
    /// θ is the sample itself.
    #[default]
    Identity,
    /// θ is a 16×16 scene seen through random 8×8 patches.
    Patch,
}

impl FromStr for RendererKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(RendererKind::Identity),
            "patch" => Ok(RendererKind::Patch),
            other => Err(Error::Config(format!("unknown renderer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPaths {
    /// Stem of a saved denoiser (`<stem>.bin` + `<stem>.json`).
    pub denoiser: PathBuf,
    /// Stem of a saved classifier; needed by the classifier and composite rewards and metrics.
    pub classifier: Option<PathBuf>,
}

/// The input of an edit: a saved parameter file and the class it depicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub source: PathBuf,
    pub source_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub models: ModelPaths,
    pub method: Method,
    pub distill: DistillConfig,
    pub reward: RewardKind,
    pub metrics: Vec<MetricKind>,
    pub repetitions: usize,
    pub seed_base: u64,
    pub renderer: RendererKind,
    /// Views averaged per metric evaluation on multi-view renderers.
    pub views: usize,
    pub edit: Option<EditConfig>,
}

impl RunConfig {
    /// Defaults for `method` around the given models: classifier reward, classifier and oracle
    /// metrics, 20 repetitions, identity renderer.
    pub fn new(dataset: DatasetConfig, models: ModelPaths, method: Method) -> Self {
        Self {
            dataset,
            models,
            method,
            distill: DistillConfig::for_method(method),
            reward: RewardKind::Classifier,
            metrics: vec![
                MetricKind::Reward(RewardKind::Classifier),
                MetricKind::OracleLikelihood,
            ],
            repetitions: 20,
            seed_base: 0,
            renderer: RendererKind::Identity,
            views: 10,
            edit: None,
        }
    }

    /// Reads `[run]`, `[models]`, `[dataset]`, `[distill]` and `[edit]`.
    ///
    /// `[run]` keys: `method`, `reward`, `metrics` (comma-separated), `repetitions`, `seed`,
    /// `renderer`, `views`. `[models]` keys: `denoiser`, `classifier`. `[edit]` keys: `source`,
    /// `source_class`.
    pub fn from_config(c: &mut ConfigFile) -> Result<Self> {
        let method: Method = c.require("run", "method")?;
        let dataset = DatasetConfig::from_config(c)?;
        let models = ModelPaths {
            denoiser: c
                .take_path("models", "denoiser")?
                .ok_or_else(|| Error::Config("missing [models] denoiser".into()))?,
            classifier: c.take_path("models", "classifier")?,
        };
        let mut cfg = Self::new(dataset, models, method);
        cfg.distill = distill_config(c, method)?;
        cfg.reward = c.take_or("run", "reward", cfg.reward)?;
        if let Some(m) = c.take_list("run", "metrics")? {
            cfg.metrics = m;
        }
        cfg.repetitions = c.take_or("run", "repetitions", cfg.repetitions)?;
        cfg.seed_base = c.take_or("run", "seed", cfg.seed_base)?;
        cfg.renderer = c.take_or("run", "renderer", cfg.renderer)?;
        cfg.views = c.take_or("run", "views", cfg.views)?;
        if let Some(source) = c.take_path("edit", "source")? {
            cfg.edit = Some(EditConfig {
                source,
                source_class: c.require("edit", "source_class")?,
            });
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Checks that need no files.
    pub fn check(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.views == 0 {
            return Err(Error::Config("views must be at least 1".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("at least one metric is required".into()));
        }
        if self.method.is_dds() && self.edit.is_none() {
            return Err(Error::Config(format!("{} needs an [edit] source", self.method)));
        }
        if self.edit.is_some() && self.renderer != RendererKind::Identity {
            return Err(Error::Config("edits need the identity renderer".into()));
        }
        if let Some(e) = &self.edit {
            if e.source_class >= self.dataset.spec.num_classes() {
                return Err(Error::Config(format!(
                    "source_class {} out of range for {} classes",
                    e.source_class,
                    self.dataset.spec.num_classes()
                )));
            }
        }
        Ok(())
    }

    /// Target condition of replicate `rep`: classes in turn, skipping an edit's source class.
    pub fn condition(&self, rep: usize) -> Condition {
        let c = self.dataset.spec.num_classes();
        match &self.edit {
            Some(e) if c > 1 => Condition::class((e.source_class + 1 + rep % (c - 1)) % c),
            _ => Condition::class(rep % c),
        }
    }

    /// Loads every referenced artifact and validates the distillation settings against them.
    pub fn load(&self) -> Result<Loaded> {
        self.check()?;
        let denoiser = persist::load_denoiser(&self.models.denoiser)?;
        let classifier = match &self.models.classifier {
            Some(p) => Some(Arc::new(persist::load_classifier(p)?)),
            None => None,
        };
        let spec = &self.dataset.spec;
        if denoiser.arch().num_classes != spec.num_classes() {
            return Err(Error::Config(format!(
                "denoiser has {} classes, dataset has {}",
                denoiser.arch().num_classes,
                spec.num_classes()
            )));
        }
        let renderer: Arc<dyn Renderer> = match self.renderer {
            RendererKind::Identity => Arc::new(IdentityRenderer::new(spec.shape())),
            RendererKind::Patch => Arc::new(PatchRenderer::standard()),
        };
        if renderer.output_shape() != denoiser.data_shape() {
            return Err(Error::Config(format!(
                "renderer emits {} but the denoiser expects {}",
                renderer.output_shape(),
                denoiser.data_shape()
            )));
        }
        let need_classifier = |what: &str| -> Result<Arc<ClassifierReward>> {
            let c = classifier
                .clone()
                .ok_or_else(|| Error::Config(format!("{what} needs [models] classifier")))?;
            if c.data_shape() != renderer.output_shape() {
                return Err(Error::Config(format!(
                    "classifier expects {}, renders are {}",
                    c.data_shape(),
                    renderer.output_shape()
                )));
            }
            Ok(c)
        };
        let build = |kind: RewardKind, what: &str| -> Result<Arc<dyn RewardModel>> {
            Ok(match kind {
                RewardKind::Classifier => need_classifier(what)?,
                RewardKind::Smoothness => Arc::new(SmoothnessReward::default()),
                RewardKind::Composite => Arc::new(CompositeReward::standard(
                    need_classifier(what)?,
                    SmoothnessReward::default(),
                )),
            })
        };
        let reward = if self.method.is_reward() {
            Some(build(self.reward, "the reward")?)
        } else {
            None
        };
        let metrics = self
            .metrics
            .iter()
            .map(|m| -> Result<Arc<dyn RewardModel>> {
                match m {
                    MetricKind::Reward(r) => build(*r, "a metric"),
                    MetricKind::OracleLikelihood => {
                        if self.renderer != RendererKind::Identity {
                            return Err(Error::Config(
                                "the oracle metric needs the identity renderer".into(),
                            ));
                        }
                        Ok(Arc::new(OracleLikelihoodMetric::new(spec.clone())?))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let source = match &self.edit {
            Some(e) => {
                let rows = persist::load_thetas(&e.source)?;
                let row = rows
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Config("edit source holds no parameters".into()))?;
                if row.len() != renderer.param_len() {
                    return Err(Error::ShapeMismatch {
                        expected: renderer.param_len(),
                        actual: row.len(),
                    });
                }
                Some(EditSource {
                    sample: Sample::new(row, renderer.output_shape())?,
                    condition: Condition::class(e.source_class),
                })
            }
            None => None,
        };
        self.distill
            .validate(self.method, denoiser.schedule().num_timesteps())?;
        Ok(Loaded {
            denoiser: Arc::new(denoiser),
            renderer,
            reward,
            metrics,
            source,
        })
    }
}

/// Artifacts a [`RunConfig`] refers to, ready to use.
#[derive(Clone)]
pub struct Loaded {
    pub denoiser: Arc<MlpDenoiser>,
    pub renderer: Arc<dyn Renderer>,
    pub reward: Option<Arc<dyn RewardModel>>,
    pub metrics: Vec<Arc<dyn RewardModel>>,
    pub source: Option<EditSource>,
}

/// Digest of a saved artifact's blob as recorded in its sidecar.
pub(crate) fn artifact_digest(stem: &Path) -> Result<String> {
    let (side, _) = persist::load(stem)?;
    Ok(side.blob_sha256().to_string())
}
