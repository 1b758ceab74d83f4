use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use distill_lab::config::{train_config, ConfigFile, DatasetConfig};
use distill_lab::dataset::generate_dataset;
use distill_lab::harness::{
    report, run, sweep, write_report, EditConfig, ReportKind, ResultRecord, RunConfig,
    RunOptions, SweepParam, SweepSpec,
};
use distill_lab::mlp_denoiser::DenoiserArch;
use distill_lab::persist;
use distill_lab::rewards::train_classifier_reward;
use distill_lab::schedule::{make_schedule, ScheduleFamily};
use distill_lab::train::{train_denoiser_with, TrainConfig};

#[derive(Parser)]
#[command(name = "distill-lab", version, about = "Score-distillation experiments on toy diffusion priors")]
#[command(after_help = "Any config value can be overridden from the environment as \
DISTILL_LAB_<SECTION>_<KEY>, e.g. DISTILL_LAB_DISTILL_CANDIDATES=3.")]
struct Cli {
    /// Overrides the seed base (training seed for the train-* commands).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the conditional denoiser: [dataset], [model], [train], [output] denoiser.
    TrainDiffusion { config: PathBuf },
    /// Train the classifier reward: [dataset], [train], [output] classifier.
    TrainReward { config: PathBuf },
    /// Run a distillation experiment: [run], [models], [dataset], [distill].
    Distill {
        config: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Run a DDS-family edit of a saved parameter file.
    Edit {
        config: PathBuf,
        /// Stem of the parameter file to edit (`<stem>.bin` + `<stem>.json`).
        #[arg(long)]
        source: PathBuf,
        /// Class the source depicts; defaults to [edit] source_class.
        #[arg(long)]
        source_class: Option<usize>,
        #[command(flatten)]
        out: Output,
    },
    /// Run one record per value of [sweep] param over [sweep] values, then report.
    Sweep {
        spec: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Build report.csv and report.svg from saved records.
    Report {
        /// record.json files or the directories holding them.
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long, default_value = "table")]
        kind: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct Output {
    /// Records are written to <results>/<fingerprint>/.
    #[arg(long, default_value = "results")]
    results: PathBuf,
    /// Replicates run concurrently on this many threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Output {
    fn options(&self) -> RunOptions {
        RunOptions {
            workers: self.workers,
            ..RunOptions::new(&self.results)
        }
    }
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    Ok(ConfigFile::load(path)
        .with_context(|| format!("reading {}", path.display()))?
        .with_env())
}

fn output_stem(c: &mut ConfigFile, key: &str) -> Result<PathBuf> {
    c.take_path("output", key)?
        .with_context(|| format!("missing [output] {key}"))
}

fn train_diffusion(path: &Path, seed: Option<u64>) -> Result<()> {
    let mut c = load_config(path)?;
    let data = DatasetConfig::from_config(&mut c)?;
    let mut cfg = train_config(&mut c, TrainConfig::default())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut arch = DenoiserArch::new(data.spec.shape(), data.spec.num_classes());
    if let Some(hidden) = c.take_list("model", "hidden")? {
        arch.hidden = hidden;
    }
    arch.time_embed_dim = c.take_or("model", "time_embed_dim", arch.time_embed_dim)?;
    arch.cond_dim = c.take_or("model", "cond_dim", arch.cond_dim)?;
    let family: ScheduleFamily = c.take_or("model", "schedule", arch.schedule_family)?;
    let timesteps = c.take_or("model", "timesteps", arch.num_timesteps)?;
    arch = arch.with_schedule(&make_schedule(timesteps, family)?);
    let stem = output_stem(&mut c, "denoiser")?;
    c.finish()?;
    let dataset = generate_dataset(&data.spec, data.samples, data.seed)?;
    let trained = train_denoiser_with(arch, &dataset, &cfg)?;
    persist::save_denoiser(&trained.model, &stem)?;
    let tail = &trained.losses[trained.losses.len().saturating_sub(100)..];
    let loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "denoiser: {} steps, final loss {loss:.5}, saved to {}",
        cfg.steps,
        persist::blob_path(&stem).display()
    );
    Ok(())
}

fn train_reward(path: &Path, seed: Option<u64>) -> Result<()> {
    let mut c = load_config(path)?;
    let data = DatasetConfig::from_config(&mut c)?;
    let mut cfg = train_config(&mut c, TrainConfig::classifier())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let stem = output_stem(&mut c, "classifier")?;
    c.finish()?;
    let dataset = generate_dataset(&data.spec, data.samples, data.seed)?;
    let report = train_classifier_reward(&dataset, &cfg)?;
    persist::save_classifier(&report.trained.model, &stem)?;
    println!(
        "classifier: held-out accuracy {:.4}, saved to {}",
        report.held_out_accuracy,
        persist::blob_path(&stem).display()
    );
    Ok(())
}

fn run_config(path: &Path, seed: Option<u64>) -> Result<(RunConfig, ConfigFile)> {
    let mut c = load_config(path)?;
    let mut cfg = RunConfig::from_config(&mut c)?;
    if let Some(s) = seed {
        cfg.seed_base = s;
    }
    Ok((cfg, c))
}

fn print_record(r: &ResultRecord, results: &Path) {
    println!("record {}", results.join(&r.fingerprint).join("record.json").display());
    for m in &r.metrics {
        match (m.mean, m.std_error()) {
            (Some(mean), Some(se)) => {
                println!("  {:<20} {mean:>12.5} ± {se:.5}  (n = {})", m.name, m.count)
            }
            _ => println!("  {:<20} no successful runs", m.name),
        }
    }
    println!(
        "  wall {:.3} s, cpu {:.3} s per run; {} failed",
        r.wall_seconds_mean, r.cpu_seconds_mean, r.failures
    );
}

fn distill(path: &Path, seed: Option<u64>, out: &Output) -> Result<()> {
    let (cfg, c) = run_config(path, seed)?;
    c.finish()?;
    if cfg.method.is_dds() {
        bail!("{} edits an input; use the edit command", cfg.method);
    }
    let record = run(&cfg, &out.options())?;
    print_record(&record, &out.results);
    Ok(())
}

fn edit(
    path: &Path,
    source: &Path,
    source_class: Option<usize>,
    seed: Option<u64>,
    out: &Output,
) -> Result<()> {
    let mut c = load_config(path)?;
    let class = match source_class {
        Some(k) => Some(k),
        None => c.take("edit", "source_class")?,
    };
    let class = class.context("the source class is needed (--source-class or [edit] source_class)")?;
    c.set("edit", "source", source.to_string_lossy());
    c.set("edit", "source_class", class.to_string());
    let mut cfg = RunConfig::from_config(&mut c)?;
    // `source` came from the command line, not relative to the config file
    cfg.edit = Some(EditConfig {
        source: source.to_path_buf(),
        source_class: class,
    });
    c.finish()?;
    if let Some(s) = seed {
        cfg.seed_base = s;
    }
    if !cfg.method.is_dds() {
        bail!("edit runs the DDS family, got {}", cfg.method);
    }
    let record = run(&cfg, &out.options())?;
    print_record(&record, &out.results);
    Ok(())
}

fn run_sweep(path: &Path, seed: Option<u64>, out: &Output) -> Result<()> {
    let mut c = load_config(path)?;
    let mut spec = SweepSpec::from_config(&mut c)?;
    c.finish()?;
    if let Some(s) = seed {
        spec.base.seed_base = s;
    }
    let outcome = sweep(&spec, &out.options())?;
    for (value, err) in &outcome.errors {
        eprintln!("{} = {value} failed: {err}", spec.param);
    }
    if let Some(summary) = &outcome.summary {
        println!("{} sweep, {}:", summary.param, summary.metric);
        for p in &summary.points {
            match (p.mean, p.std_error) {
                (Some(m), Some(se)) => println!("  {:>12}  {m:>12.5} ± {se:.5}", p.value),
                _ => println!("  {:>12}  failed", p.value),
            }
        }
        println!(
            "  nondecreasing within one pooled standard error: {}",
            summary.nondecreasing
        );
    }
    if !outcome.records.is_empty() {
        let kind = if spec.param == SweepParam::Preset {
            ReportKind::TimeQualityPlot
        } else {
            ReportKind::TrendPlot
        };
        write_report(&report(&outcome.records, kind)?, &out.results)?;
        println!("report written to {}", out.results.join("report.svg").display());
    }
    if outcome.records.is_empty() {
        bail!("every sweep point failed");
    }
    Ok(())
}

fn make_report(records: &[PathBuf], kind: &str, out: &Path) -> Result<()> {
    let kind: ReportKind = kind.parse()?;
    let records = records
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("record.json") } else { p.clone() };
            ResultRecord::load(&file).with_context(|| format!("reading {}", file.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    write_report(&report(&records, kind)?, out)?;
    println!("report written to {}", out.join("report.svg").display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::TrainDiffusion { config } => train_diffusion(config, cli.seed),
        Command::TrainReward { config } => train_reward(config, cli.seed),
        Command::Distill { config, out } => distill(config, cli.seed, out),
        Command::Edit {
            config,
            source,
            source_class,
            out,
        } => edit(config, source, *source_class, cli.seed, out),
        Command::Sweep { spec, out } => run_sweep(spec, cli.seed, out),
        Command::Report { records, kind, out } => make_report(records, kind, out),
    }
}
