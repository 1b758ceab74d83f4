use std::path::Path;

use proptest::prelude::*;

use distill_lab::config::{ConfigFile, DatasetConfig};
use distill_lab::dataset::{generate_dataset, DatasetSpec};
use distill_lab::distill::{Method, WeightScheme};
use distill_lab::harness::{
    fingerprint, report, run, sweep, MetricKind, MetricStats, ModelPaths, ReportKind, ResultRecord,
    RunConfig, RunOptions, RunStatus, SweepParam, SweepPoint, SweepSpec, TrendSummary,
};
use distill_lab::mlp_denoiser::DenoiserArch;
use distill_lab::persist;
use distill_lab::rewards::{train_classifier_reward, RewardKind};
use distill_lab::train::{train_denoiser_with, TrainConfig};

fn tiny_models(dir: &Path) -> (DatasetConfig, ModelPaths) {
    let data = DatasetConfig {
        spec: DatasetSpec::standard_mixture(),
        samples: 400,
        seed: 1,
    };
    let set = generate_dataset(&data.spec, data.samples, data.seed).unwrap();
    let mut arch = DenoiserArch::new(data.spec.shape(), 4);
    arch.hidden = vec![24, 24];
    arch.num_timesteps = 100;
    let cfg = TrainConfig {
        steps: 150,
        batch_size: 32,
        learning_rate: 3e-3,
        seed: 0,
    };
    let den = train_denoiser_with(arch, &set, &cfg).unwrap().model;
    let clf = train_classifier_reward(&set, &TrainConfig { steps: 100, ..TrainConfig::classifier() })
        .unwrap()
        .trained
        .model;
    let paths = ModelPaths {
        denoiser: dir.join("den"),
        classifier: Some(dir.join("clf")),
    };
    persist::save_denoiser(&den, &paths.denoiser).unwrap();
    persist::save_classifier(&clf, paths.classifier.as_ref().unwrap()).unwrap();
    (data, paths)
}

fn small_config(dir: &Path, method: Method) -> RunConfig {
    let (data, paths) = tiny_models(dir);
    let mut cfg = RunConfig::new(data, paths, method);
    cfg.distill = cfg.distill.with_timesteps(100);
    cfg.distill.total_steps = 30;
    cfg.distill.reward_steps = 20;
    cfg.distill.candidates = 4;
    cfg.distill.denoise_steps = 2;
    cfg.repetitions = 2;
    cfg
}

#[test]
fn single_repetition_has_zero_spread_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), Method::RewardSds);
    cfg.repetitions = 1;
    let results = dir.path().join("results");
    let r = run(&cfg, &RunOptions::new(&results)).unwrap();
    assert_eq!(r.failures, 0);
    for m in &r.metrics {
        assert_eq!(m.std, Some(0.0));
        assert_eq!(m.count, 1);
    }
    let out = results.join(&r.fingerprint);
    for f in ["record.json", "trajectory.jsonl", "theta.bin", "theta.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let lines = std::fs::read_to_string(out.join("trajectory.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), cfg.distill.total_steps);
    assert_eq!(persist::load_thetas(&out.join("theta")).unwrap().len(), 1);
    assert_eq!(ResultRecord::load(&out.join("record.json")).unwrap(), r);
}

#[test]
fn fingerprints_follow_content_not_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), Method::Sds);
    assert_eq!(fingerprint(&cfg).unwrap(), fingerprint(&cfg.clone()).unwrap());

    let moved = dir.path().join("elsewhere");
    std::fs::create_dir_all(&moved).unwrap();
    for ext in ["bin", "json"] {
        for stem in ["den", "clf"] {
            std::fs::copy(
                dir.path().join(format!("{stem}.{ext}")),
                moved.join(format!("{stem}.{ext}")),
            )
            .unwrap();
        }
    }
    let mut relocated = cfg.clone();
    relocated.models = ModelPaths {
        denoiser: moved.join("den"),
        classifier: Some(moved.join("clf")),
    };
    assert_eq!(fingerprint(&cfg).unwrap(), fingerprint(&relocated).unwrap());

    let mut other = cfg.clone();
    other.seed_base = 7;
    assert_ne!(fingerprint(&cfg).unwrap(), fingerprint(&other).unwrap());
}

#[test]
fn reruns_reproduce_metrics_and_vsd_runs_in_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), Method::RewardVsd);
    cfg.distill.particles = 2;
    cfg.repetitions = 3;
    let a = run(&cfg, &RunOptions::new(dir.path().join("a"))).unwrap();
    let b = run(
        &cfg,
        &RunOptions {
            workers: 3,
            ..RunOptions::new(dir.path().join("b"))
        },
    )
    .unwrap();
    let metrics = |r: &ResultRecord| r.runs.iter().map(|x| x.metrics.clone()).collect::<Vec<_>>();
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(a.runs[2].theta_rows, (4, 2));
    assert_eq!(a.runs.iter().map(|r| r.class).collect::<Vec<_>>(), [0, 1, 2]);
}

#[test]
fn failed_runs_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), Method::Sds);
    cfg.distill.learning_rate = 1e300;
    let r = run(&cfg, &RunOptions::new(dir.path().join("r"))).unwrap();
    assert_eq!(r.failures, 2);
    assert!(matches!(r.runs[0].status, RunStatus::Failed { .. }));
    assert_eq!(r.metrics[0].mean, None);
    let back = ResultRecord::load(&dir.path().join("r").join(&r.fingerprint).join("record.json"));
    assert_eq!(back.unwrap(), r);
}

#[test]
fn edits_need_a_source_and_target_other_classes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), Method::RewardDds);
    assert!(cfg.check().is_err());
    let src = dir.path().join("src");
    persist::save_thetas(&[vec![3.0, 0.0]], "identity", cfg.dataset.spec.shape(), &src).unwrap();
    cfg.edit = Some(distill_lab::harness::EditConfig {
        source: src,
        source_class: 0,
    });
    cfg.repetitions = 3;
    let r = run(&cfg, &RunOptions::new(dir.path().join("r"))).unwrap();
    assert_eq!(r.failures, 0);
    assert_eq!(r.runs.iter().map(|r| r.class).collect::<Vec<_>>(), [1, 2, 3]);
}

#[test]
fn run_config_from_text() {
    let dir = tempfile::tempdir().unwrap();
    tiny_models(dir.path());
    let text = "
[run]
method = reward-sds
metrics = classifier, oracle-likelihood, smoothness
repetitions = 3
seed = 11

[models]
denoiser = den
classifier = clf

[distill]
candidates = 6
scheme = winner-takes-all
t_max = 98
t_min = 2
";
    let path = dir.path().join("run.ini");
    std::fs::write(&path, text).unwrap();
    let mut c = ConfigFile::load(&path).unwrap();
    let cfg = RunConfig::from_config(&mut c).unwrap();
    c.finish().unwrap();
    assert_eq!(cfg.method, Method::RewardSds);
    assert_eq!(cfg.repetitions, 3);
    assert_eq!(cfg.seed_base, 11);
    assert_eq!(cfg.distill.scheme, WeightScheme::WinnerTakesAll);
    assert_eq!(cfg.models.denoiser, dir.path().join("den"));
    assert_eq!(
        cfg.metrics,
        [
            MetricKind::Reward(RewardKind::Classifier),
            MetricKind::OracleLikelihood,
            MetricKind::Reward(RewardKind::Smoothness)
        ]
    );
    cfg.load().unwrap();

    let mut c: ConfigFile = "[run]\nmethod = sds\nrepetitions = 0\n[models]\ndenoiser = x\n"
        .parse()
        .unwrap();
    assert!(RunConfig::from_config(&mut c).is_err());
}

#[test]
fn sweep_specs_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_config(dir.path(), Method::RewardSds);
    let spec = |param, values: &[&str]| SweepSpec {
        param,
        values: values.iter().map(|v| v.to_string()).collect(),
        base: base.clone(),
    };
    assert!(spec(SweepParam::N, &[]).points().is_err());
    assert!(spec(SweepParam::N, &["two"]).points().is_err());
    // the default scheme needs four candidates
    assert!(spec(SweepParam::N, &["1", "10"]).points().is_err());
    assert!(spec(SweepParam::K, &["0", "31"]).points().is_err());
    assert!(spec(SweepParam::Preset, &["huge"]).points().is_err());
    let mut full = spec(SweepParam::Preset, &["medium", "large"]);
    full.base.distill.total_steps = 1000;
    let presets = full.points().unwrap();
    let d = &presets[1].1.distill;
    assert_eq!((d.candidates, d.reward_steps, d.denoise_steps), (10, 1000, 15));
    let schemes = spec(SweepParam::Scheme, &["softmax", "random"]).points().unwrap();
    assert_eq!(schemes[1].1.distill.scheme, WeightScheme::Random);
}

#[test]
fn sweep_records_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = small_config(dir.path(), Method::RewardSds);
    base.distill.scheme = WeightScheme::WinnerTakesAll;
    let spec = SweepSpec {
        param: SweepParam::N,
        values: vec!["1".into(), "3".into()],
        base,
    };
    let out = sweep(&spec, &RunOptions::new(dir.path().join("r"))).unwrap();
    assert!(out.errors.is_empty());
    assert_eq!(out.records.len(), 2);
    let summary = out.summary.unwrap();
    assert_eq!(summary.metric, "classifier");
    assert_eq!(summary.points[1].value, "3");
    let rep = report(&out.records, ReportKind::TrendPlot).unwrap();
    assert_eq!(rep.svg.matches("class=\"x-tick\"").count(), 2);
    assert_eq!(rep.csv.lines().count(), 3);
}

fn record(param: &str, value: &str, mean: f64, std: f64, count: usize, wall: f64) -> ResultRecord {
    let dir = Path::new("/nonexistent");
    let cfg = RunConfig::new(
        DatasetConfig {
            spec: DatasetSpec::standard_mixture(),
            samples: 10,
            seed: 0,
        },
        ModelPaths {
            denoiser: dir.join("den"),
            classifier: None,
        },
        Method::RewardSds,
    );
    ResultRecord {
        fingerprint: format!("{param}{value}"),
        config: cfg,
        sweep: (!param.is_empty()).then(|| SweepPoint {
            param: param.into(),
            value: value.into(),
        }),
        metrics: vec![MetricStats {
            name: "classifier".into(),
            mean: Some(mean),
            std: Some(std),
            count,
        }],
        wall_seconds_mean: wall,
        cpu_seconds_mean: wall,
        failures: 0,
        runs: Vec::new(),
    }
}

#[test]
fn report_shapes() {
    let one = report(&[record("", "", -0.5, 0.1, 1, 1.0)], ReportKind::Table).unwrap();
    assert_eq!(one.csv.lines().count(), 2);
    assert_eq!(one.svg.matches("class=\"row\"").count(), 1);

    let k: Vec<ResultRecord> = (0..=10)
        .map(|i| record("K", &(100 * i).to_string(), -1.0 + 0.05 * i as f64, 0.2, 20, 1.0))
        .collect();
    let trend = report(&k, ReportKind::TrendPlot).unwrap();
    assert_eq!(trend.svg.matches("class=\"x-tick\"").count(), 11);
    for v in ["0", "500", "1000"] {
        assert!(trend.svg.contains(&format!(">{v}</text></g>")));
    }

    let presets: Vec<ResultRecord> = ["baseline", "small", "medium", "large"]
        .iter()
        .enumerate()
        .map(|(i, p)| record("preset", p, -0.1 * i as f64, 0.05, 20, 1.0 + i as f64))
        .collect();
    let tq = report(&presets, ReportKind::TimeQualityPlot).unwrap();
    assert_eq!(tq.svg.matches("class=\"point-label\"").count(), 4);
    for p in ["baseline", "small", "medium", "large"] {
        assert!(tq.svg.contains(&format!(">{p}</text>")));
    }

    let mixed = [record("K", "0", 0.0, 0.1, 2, 1.0), record("N", "1", 0.0, 0.1, 2, 1.0)];
    assert!(report(&mixed, ReportKind::Table).is_err());
    assert!(report(&[], ReportKind::Table).is_err());
    assert!(report(&[record("", "", 0.0, 0.0, 1, 1.0)], ReportKind::TrendPlot).is_err());
}

/// Verdict recomputed from the CSV columns alone.
fn verdict_from_csv(csv_text: &str) -> bool {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (m, se) = (col("classifier_mean"), col("classifier_se"));
    let rows: Vec<(f64, f64)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[m].parse().unwrap(), r[se].parse().unwrap())
        })
        .collect();
    rows.windows(2)
        .all(|w| w[1].0 >= w[0].0 - (w[0].1 * w[0].1 + w[1].1 * w[1].1).sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn verdict_matches_hand_computation(
        points in prop::collection::vec((-5.0f64..1.0, 0.0f64..2.0, 1usize..30), 1..8)
    ) {
        let records: Vec<ResultRecord> = points
            .iter()
            .enumerate()
            .map(|(i, &(m, s, n))| record("N", &i.to_string(), m, s, n, 1.0))
            .collect();
        let summary = TrendSummary::from_records(SweepParam::N, &records).unwrap();
        let rep = report(&records, ReportKind::Table).unwrap();
        prop_assert_eq!(summary.nondecreasing, verdict_from_csv(&rep.csv));
    }

    #[test]
    fn records_round_trip_through_json(
        mean in prop::num::f64::NORMAL,
        std in 0.0f64..1e6,
        wall in 0.0f64..1e4,
        count in 0usize..100,
    ) {
        let mut r = record("S", "8", mean, std, count, wall);
        r.metrics.push(MetricStats { name: "oracle-likelihood".into(), mean: None, std: None, count: 0 });
        let text = serde_json::to_string(&r).unwrap();
        let back: ResultRecord = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn csv_round_trips_metric_values(mean in prop::num::f64::NORMAL, std in 0.0f64..1e6) {
        let r = record("K", "100", mean, std, 4, 2.5);
        let rep = report(std::slice::from_ref(&r), ReportKind::Table).unwrap();
        let mut rdr = csv::Reader::from_reader(rep.csv.as_bytes());
        let headers = rdr.headers().unwrap().clone();
        let row = rdr.records().next().unwrap().unwrap();
        let get = |name: &str| row[headers.iter().position(|h| h == name).unwrap()].to_string();
        prop_assert_eq!(get("classifier_mean").parse::<f64>().unwrap(), mean);
        prop_assert_eq!(get("classifier_std").parse::<f64>().unwrap(), std);
        prop_assert_eq!(get("value"), "100");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["distill.ini", "edit.ini"] {
        let mut c = ConfigFile::load(&dir.join(name)).unwrap();
        if name == "edit.ini" {
            c.set("edit", "source", "src");
            c.set("edit", "source_class", "0");
        }
        RunConfig::from_config(&mut c).unwrap();
        c.finish().unwrap();
    }
    for name in ["sweep-k.ini", "presets.ini"] {
        let mut c = ConfigFile::load(&dir.join(name)).unwrap();
        let spec = SweepSpec::from_config(&mut c).unwrap();
        c.finish().unwrap();
        assert_eq!(spec.values.len(), if name == "presets.ini" { 4 } else { 11 });
    }
    for name in ["train-diffusion.ini", "train-reward.ini"] {
        let mut c = ConfigFile::load(&dir.join(name)).unwrap();
        DatasetConfig::from_config(&mut c).unwrap();
        distill_lab::config::train_config(&mut c, TrainConfig::default()).unwrap();
        assert!(c.take_path("output", "denoiser").unwrap().is_some() || c.take_path("output", "classifier").unwrap().is_some());
    }
}
