use std::path::Path;
use std::process::{Command, Output};

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distill-lab"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lab(dir, args);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {stdout}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

const TRAIN: &str = "
[dataset]
samples = 300

[model]
hidden = 16, 16
timesteps = 100

[train]
steps = 60
batch_size = 16

[output]
denoiser = den
";

const TRAIN_REWARD: &str = "
[dataset]
samples = 300

[train]
steps = 40

[output]
classifier = clf
";

const RUN: &str = "
[run]
method = reward-sds
metrics = classifier, oracle
repetitions = 2

[models]
denoiser = den
classifier = clf

[distill]
total_steps = 12
reward_steps = 6
candidates = 4
denoise_steps = 2
t_min = 2
t_max = 98
";

fn trained(dir: &Path) {
    std::fs::write(dir.join("train.ini"), TRAIN).unwrap();
    std::fs::write(dir.join("train-reward.ini"), TRAIN_REWARD).unwrap();
    let out = ok(dir, &["train-diffusion", "train.ini"]);
    assert!(out.contains("den.bin"));
    let out = ok(dir, &["train-reward", "train-reward.ini"]);
    assert!(out.contains("held-out accuracy"));
}

fn record_dirs(results: &Path) -> Vec<std::path::PathBuf> {
    let mut dirs: Vec<_> = std::fs::read_dir(results)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("record.json").exists())
        .collect();
    dirs.sort();
    dirs
}

#[test]
fn train_distill_edit_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    std::fs::write(dir.join("run.ini"), RUN).unwrap();

    let out = ok(dir, &["distill", "run.ini", "--results", "r", "--workers", "2"]);
    assert!(out.contains("classifier"), "{out}");
    let records = record_dirs(&dir.join("r"));
    assert_eq!(records.len(), 1);
    let theta = records[0].join("theta");

    // a rerun lands in the same record; a new seed in a new one
    ok(dir, &["distill", "run.ini", "--results", "r"]);
    assert_eq!(record_dirs(&dir.join("r")).len(), 1);
    ok(dir, &["--seed", "5", "distill", "run.ini", "--results", "r"]);
    assert_eq!(record_dirs(&dir.join("r")).len(), 2);

    let edit = RUN.replace("reward-sds", "reward-dds").replace("repetitions = 2", "repetitions = 3");
    std::fs::write(dir.join("edit.ini"), edit).unwrap();
    let theta = theta.to_str().unwrap();
    ok(dir, &["edit", "edit.ini", "--source", theta, "--source-class", "1", "--results", "e"]);
    assert_eq!(record_dirs(&dir.join("e")).len(), 1);
    // DDS goes through edit, and edit needs a source class
    assert!(!lab(dir, &["distill", "edit.ini"]).status.success());
    assert!(!lab(dir, &["edit", "edit.ini", "--source", theta]).status.success());

    let recs: Vec<String> = record_dirs(&dir.join("r"))
        .iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    let mut args = vec!["report", "--kind", "table", "--out", "rep"];
    args.extend(recs.iter().map(String::as_str));
    ok(dir, &args);
    let csv = std::fs::read_to_string(dir.join("rep/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.join("rep/report.svg").exists());
}

#[test]
fn sweep_writes_records_and_a_trend_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let spec = format!("{RUN}\n[sweep]\nparam = K\nvalues = 0, 6, 12\n");
    std::fs::write(dir.join("sweep.ini"), spec).unwrap();
    let out = ok(dir, &["sweep", "sweep.ini", "--results", "s"]);
    assert!(out.contains("nondecreasing"), "{out}");
    assert_eq!(record_dirs(&dir.join("s")).len(), 3);
    let svg = std::fs::read_to_string(dir.join("s/report.svg")).unwrap();
    assert_eq!(svg.matches("class=\"x-tick\"").count(), 3);
}

#[test]
fn bad_configs_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    std::fs::write(dir.join("typo.ini"), format!("{RUN}\ncandidatez = 3\n")).unwrap();
    let out = lab(dir, &["distill", "typo.ini", "--results", "r"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("candidatez"));

    std::fs::write(dir.join("run.ini"), RUN).unwrap();
    // TOP2-minus-bottom2 needs four candidates
    let out = Command::new(env!("CARGO_BIN_EXE_distill-lab"))
        .current_dir(dir)
        .env("DISTILL_LAB_DISTILL_CANDIDATES", "2")
        .args(["distill", "run.ini", "--results", "r"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!dir.join("r").exists() || record_dirs(&dir.join("r")).is_empty());

    assert!(!lab(dir, &["distill", "missing.ini"]).status.success());
}
