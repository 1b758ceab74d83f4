use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::run::{run, ResultRecord, RunOptions, SweepPoint};
use super::RunConfig;
use crate::config::ConfigFile;
use crate::distill::WeightScheme;
use crate::error::{Error, Result};
use crate::persist;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    N,
    K,
    S,
    Scheme,
    Preset,
}

impl SweepParam {
    pub fn is_numeric(&self) -> bool {
        matches!(self, SweepParam::N | SweepParam::K | SweepParam::S)
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::N => "N",
            SweepParam::K => "K",
            SweepParam::S => "S",
            SweepParam::Scheme => "scheme",
            SweepParam::Preset => "preset",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "N" | "n" | "candidates" => Ok(SweepParam::N),
            "K" | "k" | "reward_steps" => Ok(SweepParam::K),
            "S" | "s" | "denoise_steps" => Ok(SweepParam::S),
            "scheme" => Ok(SweepParam::Scheme),
            "preset" => Ok(SweepParam::Preset),
            other => Err(Error::Config(format!("cannot sweep over `{other}`"))),
        }
    }
}

/// Named `(N, K, S)` budgets trading running time for quality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Baseline,
    Small,
    Medium,
    Large,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Baseline, Preset::Small, Preset::Medium, Preset::Large];

    /// `(N, K, S)`.
    pub fn budget(&self) -> (usize, usize, usize) {
        match self {
            Preset::Baseline => (1, 0, 0),
            Preset::Small => (2, 100, 1),
            Preset::Medium => (5, 500, 8),
            Preset::Large => (10, 1000, 15),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Baseline => "baseline",
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Large => "large",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<String>,
    pub base: RunConfig,
}

fn parse<T: FromStr>(param: SweepParam, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad {param} value `{value}`: {e}")))
}

impl SweepSpec {
    /// `[sweep]` with `param` and comma-separated `values`, over the run sections.
    pub fn from_config(c: &mut ConfigFile) -> Result<Self> {
        let param: SweepParam = c.require("sweep", "param")?;
        let values: Vec<String> = c
            .take_list("sweep", "values")?
            .ok_or_else(|| Error::Config("missing [sweep] values".into()))?;
        let base = RunConfig::from_config(c)?;
        let spec = Self {
            param,
            values,
            base,
        };
        spec.points()?;
        Ok(spec)
    }

    /// The base configuration with `value` applied.
    pub fn apply(&self, value: &str) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        let d = &mut cfg.distill;
        match self.param {
            SweepParam::N => d.candidates = parse(self.param, value)?,
            SweepParam::K => d.reward_steps = parse(self.param, value)?,
            SweepParam::S => d.denoise_steps = parse(self.param, value)?,
            SweepParam::Scheme => d.scheme = parse::<WeightScheme>(self.param, value)?,
            SweepParam::Preset => {
                let (n, k, s) = parse::<Preset>(self.param, value)?.budget();
                d.candidates = n;
                d.reward_steps = k;
                d.denoise_steps = s;
            }
        }
        Ok(cfg)
    }

    /// Every point's configuration; fails on an empty or unparsable value list and on values
    /// the distillation settings reject.
    pub fn points(&self) -> Result<Vec<(String, RunConfig)>> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        let num_timesteps = match persist::load(&self.base.models.denoiser) {
            Ok((persist::Sidecar::Denoiser { num_timesteps, .. }, _)) => Some(num_timesteps),
            _ => None,
        };
        self.values
            .iter()
            .map(|v| {
                let cfg = self.apply(v)?;
                cfg.check()?;
                let t = num_timesteps.unwrap_or(cfg.distill.t_max);
                cfg.distill
                    .validate(cfg.method, t)
                    .map_err(|e| Error::Config(format!("{} = {v}: {e}", self.param)))?;
                Ok((v.trim().to_string(), cfg))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub value: String,
    pub mean: Option<f64>,
    pub std_error: Option<f64>,
    pub count: usize,
    pub wall_seconds_mean: f64,
}

impl TrendPoint {
    /// Standard error of the difference of two means: `sqrt(se_a² + se_b²)`.
    pub fn pooled_se(&self, other: &TrendPoint) -> Option<f64> {
        Some((self.std_error?.powi(2) + other.std_error?.powi(2)).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    pub param: SweepParam,
    pub metric: String,
    pub points: Vec<TrendPoint>,
    /// Each point's mean is at least the previous one's minus their pooled standard error.
    pub nondecreasing: bool,
}

impl TrendSummary {
    pub fn from_records(param: SweepParam, records: &[ResultRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("no records to summarize".into()))?;
        let metric = first
            .metrics
            .first()
            .map(|m| m.name.clone())
            .ok_or_else(|| Error::InvalidArgument("records carry no metrics".into()))?;
        let points: Vec<TrendPoint> = records
            .iter()
            .map(|r| {
                let m = r.metric(&metric).ok_or_else(|| {
                    Error::InvalidArgument(format!("record {} lacks {metric}", r.fingerprint))
                })?;
                Ok(TrendPoint {
                    value: r.sweep.as_ref().map(|s| s.value.clone()).unwrap_or_default(),
                    mean: m.mean,
                    std_error: m.std_error(),
                    count: m.count,
                    wall_seconds_mean: r.wall_seconds_mean,
                })
            })
            .collect::<Result<_>>()?;
        let nondecreasing = points.windows(2).all(|w| {
            match (w[0].mean, w[1].mean, w[0].pooled_se(&w[1])) {
                (Some(a), Some(b), Some(se)) => b >= a - se,
                _ => false,
            }
        });
        Ok(Self {
            param,
            metric,
            points,
            nondecreasing,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub records: Vec<ResultRecord>,
    /// Points whose run could not start, with the reason.
    pub errors: Vec<(String, String)>,
    pub summary: Option<TrendSummary>,
}

/// Runs every point of `spec` in order. A point that fails to run is reported in `errors`
/// and the sweep carries on.
pub fn sweep(spec: &SweepSpec, opts: &RunOptions) -> Result<SweepOutcome> {
    let points = spec.points()?;
    let mut records = Vec::with_capacity(points.len());
    let mut errors = Vec::new();
    for (value, cfg) in points {
        let point_opts = RunOptions {
            sweep: Some(SweepPoint {
                param: spec.param.to_string(),
                value: value.clone(),
            }),
            ..opts.clone()
        };
        match run(&cfg, &point_opts) {
            Ok(r) => records.push(r),
            Err(e) => errors.push((value, e.to_string())),
        }
    }
    let summary = if records.is_empty() {
        None
    } else {
        Some(TrendSummary::from_records(spec.param, &records)?)
    };
    Ok(SweepOutcome {
        records,
        errors,
        summary,
    })
}
