use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{artifact_digest, Loaded, RendererKind, RunConfig};
use crate::denoiser::Denoiser;
use crate::distill::{optimize, Problem, StepRecord};
use crate::error::{Error, Result};
use crate::persist;
use crate::render::View;
use crate::rewards::mean_std;
use crate::sample::Condition;

/// Where a record sits in a sweep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: String,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Records land in `<results_dir>/<fingerprint>/`.
    pub results_dir: PathBuf,
    /// Replicates run concurrently on up to this many threads.
    pub workers: usize,
    pub sweep: Option<SweepPoint>,
}

impl RunOptions {
    pub fn new(results_dir: impl Into<PathBuf>) -> Self {
        Self {
            results_dir: results_dir.into(),
            workers: 1,
            sweep: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub replicate: usize,
    pub seed: u64,
    pub class: usize,
    #[serde(flatten)]
    pub status: RunStatus,
    /// One value per configured metric; empty when the run failed.
    pub metrics: Vec<f64>,
    pub wall_seconds: f64,
    /// CPU time of the thread that executed the run.
    pub cpu_seconds: f64,
    /// Stem of the parameter file and the rows of it holding this run's final θ.
    pub theta_path: PathBuf,
    pub theta_rows: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub name: String,
    /// Over successful runs; `None` when every run failed.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
}

impl MetricStats {
    /// Standard error of the mean.
    pub fn std_error(&self) -> Option<f64> {
        match (self.std, self.count) {
            (Some(s), n) if n > 0 => Some(s / (n as f64).sqrt()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub fingerprint: String,
    pub config: RunConfig,
    pub sweep: Option<SweepPoint>,
    pub metrics: Vec<MetricStats>,
    pub wall_seconds_mean: f64,
    pub cpu_seconds_mean: f64,
    pub failures: usize,
    pub runs: Vec<RunOutcome>,
}

impl ResultRecord {
    pub fn metric(&self, name: &str) -> Option<&MetricStats> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// Per-run values of the metric at `index`, successful runs only.
    pub fn metric_values(&self, index: usize) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.status == RunStatus::Ok)
            .map(|r| r.metrics[index])
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// SHA-256 of the resolved configuration. Model and source files enter through their content
/// digests rather than their paths, so the same experiment hashes alike on any machine.
pub fn fingerprint(cfg: &RunConfig) -> Result<String> {
    let mut value = serde_json::to_value(cfg)?;
    let obj = value.as_object_mut().expect("RunConfig serializes to an object");
    let mut models = serde_json::Map::new();
    models.insert(
        "denoiser".into(),
        artifact_digest(&cfg.models.denoiser)?.into(),
    );
    if let Some(c) = &cfg.models.classifier {
        models.insert("classifier".into(), artifact_digest(c)?.into());
    }
    obj.insert("models".into(), models.into());
    if let Some(e) = &cfg.edit {
        obj.insert(
            "edit".into(),
            serde_json::json!({
                "source": artifact_digest(&e.source)?,
                "source_class": e.source_class,
            }),
        );
    }
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
}

pub fn record_dir(results_dir: &Path, fingerprint: &str) -> PathBuf {
    results_dir.join(fingerprint)
}

fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: clock_gettime only writes the timespec we pass.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

struct RepResult {
    class: usize,
    seed: u64,
    outcome: std::result::Result<(Vec<f64>, Vec<Vec<f64>>, Vec<StepRecord>), Error>,
    wall: f64,
    cpu: f64,
}

/// Mean of each metric over every parameter vector and evaluation view.
fn evaluate(
    cfg: &RunConfig,
    loaded: &Loaded,
    thetas: &[Vec<f64>],
    y: Condition,
    seed: u64,
) -> Result<Vec<f64>> {
    let views = match cfg.renderer {
        RendererKind::Identity => vec![View::Identity],
        RendererKind::Patch => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2);
            (0..cfg.views)
                .map(|_| loaded.renderer.sample_view(&mut rng))
                .collect()
        }
    };
    let mut renders = Vec::with_capacity(thetas.len() * views.len());
    for theta in thetas {
        for v in &views {
            renders.push(loaded.renderer.render(theta, v)?);
        }
    }
    loaded
        .metrics
        .iter()
        .map(|m| {
            let mut total = 0.0;
            for x in &renders {
                total += m.score(x, Some(y))?;
            }
            let mean = total / renders.len() as f64;
            if mean.is_finite() {
                Ok(mean)
            } else {
                Err(Error::NonFinite(format!("metric {}", m.name())))
            }
        })
        .collect()
}

fn run_replicate(cfg: &RunConfig, loaded: &Loaded, rep: usize) -> RepResult {
    let seed = cfg.seed_base.wrapping_add(rep as u64);
    let y = cfg.condition(rep);
    let wall = Instant::now();
    let cpu = thread_cpu_seconds();
    let mut dcfg = cfg.distill.clone();
    dcfg.seed = seed;
    let problem = Problem {
        renderer: loaded.renderer.as_ref(),
        denoiser: loaded.denoiser.clone() as Arc<dyn Denoiser>,
        condition: y,
        reward: loaded.reward.as_deref(),
        source: loaded.source.clone(),
    };
    let outcome = optimize(&problem, None, &dcfg, cfg.method).and_then(|out| {
        let values = evaluate(cfg, loaded, &out.thetas, y, seed)?;
        Ok((values, out.thetas, out.trajectory))
    });
    RepResult {
        class: y.label().expect("replicates are class-conditioned"),
        seed,
        outcome,
        wall: wall.elapsed().as_secs_f64(),
        cpu: thread_cpu_seconds() - cpu,
    }
}

fn run_all(cfg: &RunConfig, loaded: &Loaded, workers: usize) -> Vec<RepResult> {
    let n = cfg.repetitions;
    let workers = workers.clamp(1, n);
    if workers == 1 {
        return (0..n).map(|rep| run_replicate(cfg, loaded, rep)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RepResult>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let rep = next.fetch_add(1, Ordering::Relaxed);
                if rep >= n {
                    break;
                }
                let r = run_replicate(cfg, loaded, rep);
                slots.lock().expect("no worker panics while holding the lock")[rep] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers have finished")
        .into_iter()
        .map(|r| r.expect("every replicate ran"))
        .collect()
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    replicate: usize,
    #[serde(flatten)]
    step: &'a StepRecord,
}

/// Runs `cfg.repetitions` seeded replicates (seed = base + replicate index), evaluates every
/// metric on the final renders and writes `record.json`, `trajectory.jsonl` and `theta.{bin,json}`
/// under `<results_dir>/<fingerprint>/`. A failing replicate is recorded with its error.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<ResultRecord> {
    let loaded = cfg.load()?;
    let fp = fingerprint(cfg)?;
    let dir = record_dir(&opts.results_dir, &fp);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let theta_stem = dir.join("theta");
    let results = run_all(cfg, &loaded, opts.workers);

    let traj_path = dir.join("trajectory.jsonl");
    let file = fs::File::create(&traj_path).map_err(|e| Error::io(&traj_path, e))?;
    let mut traj = std::io::BufWriter::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut runs = Vec::with_capacity(results.len());
    for (rep, r) in results.into_iter().enumerate() {
        let (status, metrics, theta_rows) = match r.outcome {
            Ok((values, thetas, trajectory)) => {
                for step in &trajectory {
                    serde_json::to_writer(&mut traj, &TrajectoryLine { replicate: rep, step })?;
                    traj.write_all(b"\n").map_err(|e| Error::io(&traj_path, e))?;
                }
                let span = (rows.len(), thetas.len());
                rows.extend(thetas);
                (RunStatus::Ok, values, span)
            }
            Err(e) => (RunStatus::Failed { error: e.to_string() }, Vec::new(), (rows.len(), 0)),
        };
        runs.push(RunOutcome {
            replicate: rep,
            seed: r.seed,
            class: r.class,
            status,
            metrics,
            wall_seconds: r.wall,
            cpu_seconds: r.cpu,
            theta_path: theta_stem.clone(),
            theta_rows,
        });
    }
    traj.flush().map_err(|e| Error::io(&traj_path, e))?;
    let renderer_name = match cfg.renderer {
        RendererKind::Identity => "identity",
        RendererKind::Patch => "patch",
    };
    persist::save_thetas(&rows, renderer_name, loaded.renderer.output_shape(), &theta_stem)?;

    let ok: Vec<&RunOutcome> = runs.iter().filter(|r| r.status == RunStatus::Ok).collect();
    let metrics = cfg
        .metrics
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let values: Vec<f64> = ok.iter().map(|r| r.metrics[i]).collect();
            let (mean, std) = if values.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&values);
                (Some(m), Some(s))
            };
            MetricStats {
                name: m.to_string(),
                mean,
                std,
                count: values.len(),
            }
        })
        .collect();
    let avg = |f: fn(&RunOutcome) -> f64| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    let record = ResultRecord {
        fingerprint: fp,
        config: cfg.clone(),
        sweep: opts.sweep.clone(),
        metrics,
        wall_seconds_mean: avg(|r| r.wall_seconds),
        cpu_seconds_mean: avg(|r| r.cpu_seconds),
        failures: runs.len() - ok.len(),
        runs,
    };
    let path = dir.join("record.json");
    fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    Ok(record)
}
