//! End-to-end runs and parameter sweeps.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{task_agnostic_eval, train_novel_acc, EvalReport};
use crate::model::ModelParams;
use crate::trainer::{discover_with, pretrain, DiscoverOptions, TrainLog};

/// Result of one discovery run and its evaluation.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub student: ModelParams,
    pub log: TrainLog,
    pub report: EvalReport,
    /// Clustering accuracy of the novel head on the unlabeled training split.
    pub train_novel_acc: f64,
}

pub fn discover_and_evaluate(
    dataset: &Dataset,
    pretrained: &ModelParams,
    cfg: &RunConfig,
    options: DiscoverOptions,
) -> Result<RunOutcome> {
    let (student, log) = discover_with(dataset, pretrained, cfg, options)?;
    let report = task_agnostic_eval(&student, dataset, cfg)?;
    let train_novel_acc = train_novel_acc(&student, dataset, cfg.tau)?;
    Ok(RunOutcome {
        student,
        log,
        report,
        train_novel_acc,
    })
}

/// Pretraining followed by discovery; the returned log holds both stages.
pub fn run_pipeline(dataset: &Dataset, cfg: &RunConfig) -> Result<(ModelParams, RunOutcome)> {
    let (pretrained, mut log) = pretrain(dataset, cfg)?;
    let mut outcome = discover_and_evaluate(dataset, &pretrained, cfg, DiscoverOptions::default())?;
    log.extend(std::mem::take(&mut outcome.log));
    outcome.log = log;
    Ok((pretrained, outcome))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Beta,
    WeightMode,
    /// Relative error of the assumed number of novel classes.
    NovelCountError,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::WeightMode => "weight_mode",
            SweepParam::NovelCountError => "novel_count_error",
        }
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str, true_novel: usize) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::Beta => cfg.set("beta", value)?,
            SweepParam::WeightMode => cfg.weight_mode = value.parse()?,
            SweepParam::NovelCountError => {
                let e = parse_relative_error(value)?;
                let n = (true_novel as f64 * (1.0 + e)).round();
                if n < 1.0 {
                    return Err(Error::Config(format!("novel count error {value} leaves no novel classes")));
                }
                cfg.novel_count_override = Some(n as usize);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepParam::Beta),
            "weight_mode" => Ok(SweepParam::WeightMode),
            "novel_count_error" => Ok(SweepParam::NovelCountError),
            _ => Err(Error::Config(format!(
                "unknown sweep parameter {s:?} (expected beta, weight_mode or novel_count_error)"
            ))),
        }
    }
}

/// `"-20%"`, `"+10%"`, `"0"` or a plain fraction such as `"-0.2"`.
pub fn parse_relative_error(value: &str) -> Result<f64> {
    let v = value.trim();
    let bad = || Error::Config(format!("invalid relative error {value:?}"));
    let (num, scale) = match v.strip_suffix('%') {
        Some(n) => (n, 0.01),
        None => (v, 1.0),
    };
    let x: f64 = num.trim_start_matches('+').parse().map_err(|_| bad())?;
    if !x.is_finite() {
        return Err(bad());
    }
    Ok(x * scale)
}

/// Splits a comma-separated grid. Entries may contain parentheses with
/// commas inside, e.g. `SG(Norm(η))`.
pub fn split_values(list: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in list.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub status: String,
    pub train_novel_acc: Option<f64>,
    pub known_acc: Option<f64>,
    pub novel_acc: Option<f64>,
    pub all_acc: Option<f64>,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const SWEEP_CSV_HEADER: &str = "value,seed,train_novel_acc,known_acc,novel_acc,all_acc,status";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::new();
    let _ = writeln!(s, "{SWEEP_CSV_HEADER}");
    for r in rows {
        let status = r.status.replace([',', '\n'], ";");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.value,
            r.seed,
            f(r.train_novel_acc),
            f(r.known_acc),
            f(r.novel_acc),
            f(r.all_acc),
            status
        );
    }
    s
}

/// Runs `(value, seed)` jobs in order, pretraining once per seed. A failing
/// job is recorded in its row and the sweep continues.
pub struct Sweep<'a> {
    pub dataset: &'a Dataset,
    pub base: RunConfig,
    pub param: SweepParam,
    pretrained: HashMap<u64, ModelParams>,
}

impl<'a> Sweep<'a> {
    pub fn new(dataset: &'a Dataset, base: RunConfig, param: SweepParam) -> Self {
        Self {
            dataset,
            base,
            param,
            pretrained: HashMap::new(),
        }
    }

    pub fn config_for(&self, value: &str, seed: u64) -> Result<RunConfig> {
        let mut cfg = self.param.apply(&self.base, value, self.dataset.num_novel())?;
        cfg.seed = seed;
        Ok(cfg)
    }

    pub fn run_job(&mut self, value: &str, seed: u64) -> (SweepRow, Option<RunOutcome>) {
        match self.try_job(value, seed) {
            Ok(outcome) => (
                SweepRow {
                    value: value.to_string(),
                    seed,
                    status: "ok".into(),
                    train_novel_acc: Some(outcome.train_novel_acc),
                    known_acc: Some(outcome.report.known_acc),
                    novel_acc: Some(outcome.report.novel_cluster_acc),
                    all_acc: Some(outcome.report.all_acc),
                },
                Some(outcome),
            ),
            Err(e) => (
                SweepRow {
                    value: value.to_string(),
                    seed,
                    status: format!("failed: {e}"),
                    train_novel_acc: None,
                    known_acc: None,
                    novel_acc: None,
                    all_acc: None,
                },
                None,
            ),
        }
    }

    fn try_job(&mut self, value: &str, seed: u64) -> Result<RunOutcome> {
        let cfg = self.config_for(value, seed)?;
        if !self.pretrained.contains_key(&seed) {
            let (p, _) = pretrain(self.dataset, &cfg)?;
            self.pretrained.insert(seed, p);
        }
        let pretrained = &self.pretrained[&seed];
        discover_and_evaluate(self.dataset, pretrained, &cfg, DiscoverOptions::default())
    }

    pub fn run(&mut self, values: &[String], seeds: &[u64]) -> Vec<SweepRow> {
        let mut rows = Vec::new();
        for &seed in seeds {
            for v in values {
                rows.push(self.run_job(v, seed).0);
            }
        }
        rows.sort_by_key(|r| (values.iter().position(|v| *v == r.value), r.seed));
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::WeightMode;
    use crate::data::{default_plan, generate, SyntheticSpec};

    #[test]
    fn grids_parse() {
        let tab6 = split_values("0,0.01,0.02,0.05,0.1,0.2,0.5,1");
        assert_eq!(tab6.len(), 8);
        let base = RunConfig::default();
        for v in &tab6 {
            SweepParam::Beta.apply(&base, v, 5).unwrap();
        }
        let tab5 = split_values("1,η,SG(η),SG(Norm(η)),Norm(η)");
        let modes: Vec<WeightMode> = tab5
            .iter()
            .map(|v| SweepParam::WeightMode.apply(&base, v, 5).unwrap().weight_mode)
            .collect();
        assert_eq!(modes, WeightMode::ALL);
        let counts: Vec<Option<usize>> = split_values("-20%,-10%,0%,+10%,+20%")
            .iter()
            .map(|v| SweepParam::NovelCountError.apply(&base, v, 10).unwrap().novel_count_override)
            .collect();
        assert_eq!(counts, vec![Some(8), Some(9), Some(10), Some(11), Some(12)]);
        assert!(SweepParam::NovelCountError.apply(&base, "-100%", 5).is_err());
        assert!(SweepParam::Beta.apply(&base, "-1", 5).is_err());
        assert_eq!(parse_relative_error("-0.2").unwrap(), -0.2);
    }

    #[test]
    fn single_job_equals_direct_composition() {
        let spec = SyntheticSpec {
            dim: 8,
            n_known: 4,
            n_novel: 3,
            samples_per_class: 30,
            test_samples_per_class: 10,
            affinity_plan: default_plan(4, 3),
            ..SyntheticSpec::default()
        };
        let (d, _) = generate(&spec).unwrap();
        let base = RunConfig {
            epochs_pretrain: 2,
            epochs_discover: 2,
            batch_size: 32,
            ..RunConfig::default()
        };
        let mut sweep = Sweep::new(&d, base.clone(), SweepParam::Beta);
        let rows = sweep.run(&["0.2".to_string(), "oops".to_string()], &[3]);
        assert!(rows[0].ok());
        assert!(rows[1].status.starts_with("failed"));

        let cfg = RunConfig { beta: 0.2, seed: 3, ..base };
        let (_, direct) = run_pipeline(&d, &cfg).unwrap();
        assert_eq!(rows[0].train_novel_acc, Some(direct.train_novel_acc));
        assert_eq!(rows[0].all_acc, Some(direct.report.all_acc));
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }
}
