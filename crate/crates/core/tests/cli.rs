use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL_SPEC: &str = "dim=8\nknown=4\nnovel=3\nsamples_per_class=30\ntest_samples_per_class=10\n";
const FAST: &[&str] = &["--epochs-pretrain", "2", "--epochs-discover", "2", "--set", "batch_size=32"];

struct Lab {
    dir: TempDir,
}

impl Lab {
    fn new() -> Self {
        Self {
            dir: TempDir::new().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ncdlab"))
            .args(args)
            .current_dir(self.dir.path())
            .env("NCD_LAB_OUT", self.path("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        summary(&out)
    }

    fn small_data(&self) -> String {
        fs::write(self.path("small.txt"), SMALL_SPEC).unwrap();
        self.ok(&["generate", "--spec", "small.txt", "--out", "data/small.ncdcsv"]);
        "data/small.ncdcsv".to_string()
    }

    fn pretrained(&self, data: &str) -> String {
        let s = self.ok(&[&["pretrain", "--data", data][..], FAST].concat());
        format!("{}/pretrained.ckpt", s["run_dir"].as_str().unwrap())
    }
}

fn summary(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("summary line")).unwrap()
}

fn read(dir: &Value, file: &str) -> String {
    fs::read_to_string(Path::new(dir["run_dir"].as_str().unwrap()).join(file)).unwrap()
}

#[test]
fn generate_default_spec() {
    let lab = Lab::new();
    let s = lab.ok(&["generate", "--out", "a/b/default.ncdcsv"]);
    assert_eq!(s["status"], "ok");
    let text = fs::read_to_string(lab.path("a/b/default.ncdcsv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "# dim=16 known=10 novel=5 seed=0");
    assert!(lab.path("a/b/default.oracle.json").exists());
    assert!(lab.path("a/b/default.spec.txt").exists());

    lab.ok(&["generate", "--out", "again.ncdcsv"]);
    assert_eq!(fs::read(lab.path("again.ncdcsv")).unwrap(), text.as_bytes());
    assert_eq!(
        fs::read(lab.path("again.oracle.json")).unwrap(),
        fs::read(lab.path("a/b/default.oracle.json")).unwrap()
    );
}

#[test]
fn bad_spec_keys_are_named() {
    let lab = Lab::new();
    fs::write(lab.path("bad.txt"), "dim=8\ncolour=red\nflavour=1\n").unwrap();
    let out = lab.run(&["generate", "--spec", "bad.txt", "--out", "x.ncdcsv"]);
    assert!(!out.status.success());
    let s = summary(&out);
    assert_eq!(s["status"], "failed");
    let err = s["error"].as_str().unwrap();
    assert!(err.contains("colour") && err.contains("flavour"), "{err}");
}

#[test]
fn unknown_flags_and_keys_rejected() {
    let lab = Lab::new();
    let out = lab.run(&["pretrain", "--data", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let data = lab.small_data();
    let out = lab.run(&["pretrain", "--data", &data, "--set", "nonsense=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(summary(&out)["error"].as_str().unwrap().contains("nonsense"));
}

#[test]
fn missing_input_fails_with_summary() {
    let lab = Lab::new();
    let out = lab.run(&["pretrain", "--data", "missing.ncdcsv"]);
    assert_eq!(out.status.code(), Some(1));
    let s = summary(&out);
    assert_eq!(s["status"], "failed");
    assert!(s["error"].as_str().unwrap().contains("missing.ncdcsv"));
}

#[test]
fn discover_is_reproducible_from_resolved_config() {
    let lab = Lab::new();
    let data = lab.small_data();
    let pre = lab.pretrained(&data);
    let first = lab.ok(&[&["discover", "--data", &data, "--pretrained", &pre, "--beta", "0.2", "--seed", "7"][..], FAST].concat());
    let dir = first["run_dir"].as_str().unwrap();
    for f in ["config.txt", "student.ckpt", "teacher.ckpt", "train_log.jsonl", "timing.json", "eval.json"] {
        assert!(Path::new(dir).join(f).exists(), "{f}");
    }
    let config = read(&first, "config.txt");
    assert!(config.contains("beta=0.2") && config.contains("seed=7"));

    let cfg_path = format!("{dir}/config.txt");
    let second = lab.ok(&["discover", "--data", &data, "--pretrained", &pre, "--config", &cfg_path]);
    assert_ne!(first["run_dir"], second["run_dir"]);
    assert_eq!(read(&first, "config.txt"), read(&second, "config.txt"));
    assert_eq!(read(&first, "train_log.jsonl"), read(&second, "train_log.jsonl"));
    assert_eq!(read(&first, "eval.json"), read(&second, "eval.json"));

    let eval = lab.ok(&[
        "evaluate",
        "--model",
        &format!("{dir}/student.ckpt"),
        "--data",
        &data,
        "--config",
        &cfg_path,
    ]);
    assert_eq!(read(&eval, "eval.json"), read(&first, "eval.json"));
    assert_eq!(eval["train_novel_acc"], first["train_novel_acc"]);
}

#[test]
fn flags_override_config_file() {
    let lab = Lab::new();
    let data = lab.small_data();
    fs::write(lab.path("base.txt"), "beta=0.5\nt=0.4\nepochs_pretrain=1\n").unwrap();
    let s = lab.ok(&["pretrain", "--data", &data, "--config", "base.txt", "--beta", "0.05"]);
    let cfg = read(&s, "config.txt");
    assert!(cfg.contains("beta=0.05") && cfg.contains("t=0.4") && cfg.contains("epochs_pretrain=1"));
}

#[test]
fn relation_of_identical_checkpoints() {
    let lab = Lab::new();
    let data = lab.small_data();
    let pre = lab.pretrained(&data);
    let s = lab.ok(&["relation", "--model", &pre, "--teacher", &pre, "--data", &data, "--out", "rel/r.json"]);
    assert_eq!(s["mean_teacher_spearman"], s["mean_student_spearman"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(lab.path("rel/r.json")).unwrap()).unwrap();
    let classes = report["classes"].as_array().unwrap();
    assert_eq!(classes.len(), 3);
    for c in classes {
        assert_eq!(c["teacher"], c["student"]);
        assert!(c["student_spearman"].as_f64().unwrap().is_finite());
    }

    let big = lab.ok(&["generate", "--out", "big.ncdcsv"]);
    assert_eq!(big["status"], "ok");
    let out = lab.run(&["relation", "--model", &pre, "--teacher", &pre, "--data", "big.ncdcsv", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
}

fn csv_rows(s: &Value) -> Vec<String> {
    fs::read_to_string(s["csv"].as_str().unwrap())
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn sweep_grids_accepted() {
    let lab = Lab::new();
    let data = lab.small_data();
    let beta = lab.ok(&[&["sweep", "--data", &data, "--param", "beta", "--values", "0,0.01,0.02,0.05,0.1,0.2,0.5,1"][..], FAST].concat());
    let rows = csv_rows(&beta);
    assert_eq!(rows[0], "value,seed,train_novel_acc,known_acc,novel_acc,all_acc,status");
    assert_eq!(rows.len(), 9);
    assert!(rows[1..].iter().all(|r| r.ends_with(",ok")));

    let modes = lab.ok(&[&["sweep", "--data", &data, "--param", "weight_mode", "--values", "1,η,SG(η),SG(Norm(η)),Norm(η)"][..], FAST].concat());
    assert_eq!(csv_rows(&modes).len(), 6);

    let counts = lab.ok(&[&["sweep", "--data", &data, "--param", "novel_count_error", "--values", "-20%,-10%,0%,+10%,+20%"][..], FAST].concat());
    assert_eq!(csv_rows(&counts).len(), 6);
}

#[test]
fn parallel_sweep_matches_sequential_and_reports_failures() {
    let lab = Lab::new();
    let data = lab.small_data();
    let args = |parallel: &'static str| {
        [&["sweep", "--data", &data, "--param", "beta", "--values", "0,0.3,oops", "--seeds", "2", "--parallel", parallel][..], FAST].concat()
    };
    let seq = lab.run(&args("1"));
    let par = lab.run(&args("3"));
    for out in [&seq, &par] {
        assert_eq!(out.status.code(), Some(1));
        let s = summary(out);
        assert_eq!(s["status"], "failed");
        assert_eq!(s["jobs"], 6);
        assert_eq!(s["failed"].as_array().unwrap().len(), 2);
    }
    assert_eq!(csv_rows(&summary(&seq)), csv_rows(&summary(&par)));
}

#[test]
fn single_job_sweep_equals_discover() {
    let lab = Lab::new();
    let data = lab.small_data();
    let sweep = lab.ok(&[&["sweep", "--data", &data, "--param", "beta", "--values", "0.3", "--seed", "4"][..], FAST].concat());
    let pre = lab.ok(&[&["pretrain", "--data", &data, "--seed", "4"][..], FAST].concat());
    let pre = format!("{}/pretrained.ckpt", pre["run_dir"].as_str().unwrap());
    let disc = lab.ok(&[&["discover", "--data", &data, "--pretrained", &pre, "--seed", "4", "--beta", "0.3"][..], FAST].concat());
    let row = &csv_rows(&sweep)[1];
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[0], "0.3");
    assert_eq!(fields[1], "4");
    assert_eq!(fields[2].parse::<f64>().unwrap(), disc["train_novel_acc"].as_f64().unwrap());
    assert_eq!(fields[5].parse::<f64>().unwrap(), disc["all_acc"].as_f64().unwrap());
}
