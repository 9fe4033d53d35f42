use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ncdlab::data::{generate, load_dataset, save_dataset, RelationOracle, SyntheticSpec};
use ncdlab::experiment::{discover_and_evaluate, split_values, sweep_csv, Sweep, SweepParam, SweepRow};
use ncdlab::metrics::{task_agnostic_eval, train_novel_acc};
use ncdlab::model::{load_checkpoint, save_checkpoint, ModelParams};
use ncdlab::relation::relation_report;
use ncdlab::trainer::{pretrain, DiscoverOptions, TrainLog};
use ncdlab::{Error, Result, RunConfig};

/// Novel class discovery experiments on synthetic Gaussian mixtures.
#[derive(Parser)]
#[command(name = "ncdlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its relation oracle.
    Generate {
        /// key=value spec file; defaults are used for missing keys
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Dataset path (.ncdcsv)
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Supervised pretraining on the labeled known classes.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Joint discovery training from a pretrained checkpoint, then evaluation.
    Discover {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        /// Save a student checkpoint every N epochs (0 disables)
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Task-agnostic evaluation of a checkpoint on the test splits.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pretrain + discover + evaluate over a grid of values and seeds.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// beta, weight_mode or novel_count_error
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated grid, e.g. 0,0.01,0.1 or 1,η,SG(η) or -20%,0%,+20%
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// Number of seeds, counted up from the configured seed
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Worker processes to run concurrently
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Averaged class relations of two checkpoints against the oracle.
    Relation {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Oracle JSON; defaults to the file written next to the dataset
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    #[command(hide = true)]
    SweepWorker {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, allow_hyphen_values = true)]
        value: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// key=value run config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Set any config key, repeatable: --set beta=0.2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    weight_mode: Option<String>,
    /// Relation temperature
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    epochs_pretrain: Option<usize>,
    #[arg(long)]
    epochs_discover: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_kv_text(&read_text(path)?)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let mut flag = |key: &str, value: Option<String>| value.map_or(Ok(()), |v| cfg.set(key, &v));
        flag("seed", self.seed.map(|v| v.to_string()))?;
        flag("beta", self.beta.map(|v| v.to_string()))?;
        flag("weight_mode", self.weight_mode.clone())?;
        flag("t", self.t.map(|v| v.to_string()))?;
        flag("epochs_pretrain", self.epochs_pretrain.map(|v| v.to_string()))?;
        flag("epochs_discover", self.epochs_discover.map(|v| v.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outcome of a command: the JSON summary and whether every run succeeded.
struct Report {
    summary: Value,
    ok: bool,
}

fn out_root() -> PathBuf {
    std::env::var_os("NCD_LAB_OUT").map_or_else(|| PathBuf::from("ncdlab-runs"), PathBuf::from)
}

fn run_dir(command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let millis = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
    let root = out_root();
    let base = format!("{command}-{}-{millis}", cfg.hash());
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(Error::file(&dir))?;
    fs::write(dir.join("config.txt"), cfg.to_kv_text())?;
    Ok(dir)
}

fn write_log(dir: &Path, log: &TrainLog) -> Result<()> {
    log.write_jsonl(&dir.join("train_log.jsonl"))?;
    log.write_timing(&dir.join("timing.json"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::file(path))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(Error::file(path))?;
    Ok(())
}

fn oracle_path(data: &Path) -> PathBuf {
    data.with_extension("oracle.json")
}

fn cmd_generate(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<Report> {
    let mut spec = match spec {
        Some(p) => SyntheticSpec::from_kv_text(&read_text(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (dataset, oracle) = generate(&spec)?;
    save_dataset(&dataset, out)?;
    let oracle_out = oracle_path(out);
    write_json(&oracle_out, &oracle)?;
    let spec_out = out.with_extension("spec.txt");
    fs::write(&spec_out, spec.to_kv_text())?;
    Ok(Report {
        summary: json!({
            "dataset": out,
            "oracle": oracle_out,
            "spec": spec_out,
            "samples": dataset.len(),
        }),
        ok: true,
    })
}

fn cmd_pretrain(data: &Path, cfg: &RunConfig) -> Result<Report> {
    let dataset = load_dataset(data)?;
    let dir = run_dir("pretrain", cfg)?;
    let (model, log) = pretrain(&dataset, cfg)?;
    save_checkpoint(&model, &dir.join("pretrained.ckpt"))?;
    write_log(&dir, &log)?;
    let known = log.records.last().and_then(|r| r.known_train_acc);
    Ok(Report {
        summary: json!({ "run_dir": dir, "known_train_acc": known }),
        ok: true,
    })
}

fn cmd_discover(data: &Path, pretrained: &Path, checkpoint_every: usize, cfg: &RunConfig) -> Result<Report> {
    let dataset = load_dataset(data)?;
    let teacher = load_checkpoint(pretrained)?;
    let dir = run_dir("discover", cfg)?;
    let options = DiscoverOptions {
        checkpoint_every,
        checkpoint_dir: Some(dir.join("checkpoints")),
        ..DiscoverOptions::default()
    };
    let outcome = discover_and_evaluate(&dataset, &teacher, cfg, options)?;
    save_checkpoint(&outcome.student, &dir.join("student.ckpt"))?;
    save_checkpoint(&teacher, &dir.join("teacher.ckpt"))?;
    write_log(&dir, &outcome.log)?;
    write_json(&dir.join("eval.json"), &outcome.report)?;
    Ok(Report {
        summary: json!({
            "run_dir": dir,
            "train_novel_acc": outcome.train_novel_acc,
            "known_acc": outcome.report.known_acc,
            "novel_acc": outcome.report.novel_cluster_acc,
            "all_acc": outcome.report.all_acc,
        }),
        ok: true,
    })
}

fn cmd_evaluate(model: &Path, data: &Path, cfg: &RunConfig) -> Result<Report> {
    let dataset = load_dataset(data)?;
    let params = load_checkpoint(model)?;
    let dir = run_dir("evaluate", cfg)?;
    let report = task_agnostic_eval(&params, &dataset, cfg)?;
    let train_novel = train_novel_acc(&params, &dataset, cfg.tau)?;
    write_json(&dir.join("eval.json"), &report)?;
    Ok(Report {
        summary: json!({
            "run_dir": dir,
            "train_novel_acc": train_novel,
            "known_acc": report.known_acc,
            "novel_acc": report.novel_cluster_acc,
            "all_acc": report.all_acc,
        }),
        ok: true,
    })
}

fn cmd_sweep(
    data: &Path,
    param: SweepParam,
    values: &str,
    seeds: u64,
    parallel: usize,
    cfg: &RunConfig,
) -> Result<Report> {
    let values = split_values(values);
    if values.is_empty() {
        return Err(Error::Config("--values is empty".into()));
    }
    if seeds == 0 || parallel == 0 {
        return Err(Error::Config("--seeds and --parallel must be at least 1".into()));
    }
    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
    let dataset = load_dataset(data)?;
    let dir = run_dir("sweep", cfg)?;
    let rows = if parallel == 1 {
        Sweep::new(&dataset, cfg.clone(), param).run(&values, &seed_list)
    } else {
        run_workers(data, param, &values, &seed_list, parallel, &dir)?
    };
    let csv_path = dir.join("sweep.csv");
    fs::write(&csv_path, sweep_csv(&rows))?;
    let failed: Vec<Value> = rows
        .iter()
        .filter(|r| !r.ok())
        .map(|r| json!({ "value": r.value, "seed": r.seed, "status": r.status }))
        .collect();
    Ok(Report {
        ok: failed.is_empty(),
        summary: json!({
            "run_dir": dir,
            "csv": csv_path,
            "jobs": rows.len(),
            "failed": failed,
        }),
    })
}

fn run_workers(
    data: &Path,
    param: SweepParam,
    values: &[String],
    seeds: &[u64],
    parallel: usize,
    dir: &Path,
) -> Result<Vec<SweepRow>> {
    let exe = std::env::current_exe()?;
    let jobs_dir = dir.join("jobs");
    fs::create_dir_all(&jobs_dir).map_err(Error::file(&jobs_dir))?;
    let jobs: Vec<(String, u64, PathBuf)> = seeds
        .iter()
        .flat_map(|&s| values.iter().map(move |v| (v.clone(), s)))
        .enumerate()
        .map(|(i, (v, s))| (v, s, jobs_dir.join(format!("job_{i}.json"))))
        .collect();
    let mut rows = Vec::with_capacity(jobs.len());
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut next = 0;
    let finish = |i: usize, child: Child, rows: &mut Vec<SweepRow>| {
        let (value, seed, path) = &jobs[i];
        // A worker that records a failed job still writes its row.
        let row = match child.wait_with_output() {
            Ok(o) => read_text(path)
                .and_then(|t| Ok(serde_json::from_str::<SweepRow>(&t)?))
                .map_err(|e| Error::InvalidArgument(format!("worker exited with {}: {e}", o.status))),
            Err(e) => Err(e.into()),
        };
        rows.push(row.unwrap_or_else(|e| SweepRow {
            value: value.clone(),
            seed: *seed,
            status: format!("failed: {e}"),
            train_novel_acc: None,
            known_acc: None,
            novel_acc: None,
            all_acc: None,
        }));
    };
    while next < jobs.len() || !running.is_empty() {
        while running.len() < parallel && next < jobs.len() {
            let (value, seed, out) = &jobs[next];
            let child = Command::new(&exe)
                .arg("sweep-worker")
                .arg("--data")
                .arg(data)
                .args(["--param", param.as_str(), "--value", value, "--seed", &seed.to_string()])
                .arg("--config")
                .arg(dir.join("config.txt"))
                .arg("--out")
                .arg(out)
                .stdout(std::process::Stdio::null())
                .spawn()?;
            running.push((next, child));
            next += 1;
        }
        let (i, child) = running.remove(0);
        finish(i, child, &mut rows);
    }
    rows.sort_by_key(|r| (values.iter().position(|v| *v == r.value), r.seed));
    Ok(rows)
}

fn cmd_sweep_worker(data: &Path, param: SweepParam, value: &str, seed: u64, config: &Path, out: &Path) -> Result<Report> {
    let cfg = RunConfig::from_kv_text(&read_text(config)?)?;
    let dataset = load_dataset(data)?;
    let (row, _) = Sweep::new(&dataset, cfg, param).run_job(value, seed);
    write_json(out, &row)?;
    Ok(Report {
        ok: row.ok(),
        summary: json!({ "row": row }),
    })
}

fn cmd_relation(
    model: &Path,
    teacher: &Path,
    data: &Path,
    oracle: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<Report> {
    let dataset = load_dataset(data)?;
    let oracle_file = oracle.map_or_else(|| oracle_path(data), Path::to_path_buf);
    let oracle: RelationOracle = serde_json::from_str(&read_text(&oracle_file)?)?;
    let student: ModelParams = load_checkpoint(model)?;
    let teacher = load_checkpoint(teacher)?;
    let report = relation_report(&student, &teacher, &dataset, &oracle, cfg.t)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(out, &report)?;
    Ok(Report {
        summary: json!({
            "out": out,
            "mean_teacher_spearman": report.mean_teacher_spearman,
            "mean_student_spearman": report.mean_student_spearman,
        }),
        ok: true,
    })
}

fn dispatch(cmd: &Cmd) -> Result<Report> {
    match cmd {
        Cmd::Generate { spec, out, seed } => cmd_generate(spec.as_deref(), out, *seed),
        Cmd::Pretrain { data, config } => cmd_pretrain(data, &config.resolve()?),
        Cmd::Discover {
            data,
            pretrained,
            checkpoint_every,
            config,
        } => cmd_discover(data, pretrained, *checkpoint_every, &config.resolve()?),
        Cmd::Evaluate { model, data, config } => cmd_evaluate(model, data, &config.resolve()?),
        Cmd::Sweep {
            data,
            param,
            values,
            seeds,
            parallel,
            config,
        } => cmd_sweep(data, *param, values, *seeds, *parallel, &config.resolve()?),
        Cmd::Relation {
            model,
            teacher,
            data,
            oracle,
            out,
            config,
        } => cmd_relation(model, teacher, data, oracle.as_deref(), out, &config.resolve()?),
        Cmd::SweepWorker {
            data,
            param,
            value,
            seed,
            config,
            out,
        } => cmd_sweep_worker(data, *param, value, *seed, config, out),
    }
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Generate { .. } => "generate",
        Cmd::Pretrain { .. } => "pretrain",
        Cmd::Discover { .. } => "discover",
        Cmd::Evaluate { .. } => "evaluate",
        Cmd::Sweep { .. } => "sweep",
        Cmd::Relation { .. } => "relation",
        Cmd::SweepWorker { .. } => "sweep-worker",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    let (summary, ok) = match dispatch(&cli.command) {
        Ok(Report { mut summary, ok }) => {
            summary["command"] = json!(name);
            summary["status"] = json!(if ok { "ok" } else { "failed" });
            (summary, ok)
        }
        Err(e) => {
            eprintln!("error: {e}");
            (json!({ "command": name, "status": "failed", "error": e.to_string() }), false)
        }
    };
    println!("{summary}");
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
