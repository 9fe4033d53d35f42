//! Two-stage training: supervised pretraining on known classes, then joint
//! discovery against a frozen teacher snapshot.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::config::{OptimizerConfig, RunConfig};
use crate::data::{make_batches, make_supervised_batches, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, supervised_ce, LossBreakdown, LossControls};
use crate::metrics::{task_agnostic_eval, train_known_acc};
use crate::model::{save_checkpoint, Architecture, ModelParams};
use crate::numerics::Tape;

const PRETRAIN_STREAM: u64 = 1;
const DISCOVER_STREAM: u64 = 2;

/// Linear warmup from `lr/100` to `lr`, then cosine decay back to `lr/100`.
/// Positions are measured in (fractional) epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub cosine_decay: bool,
}

impl LrSchedule {
    pub fn new(opt: &OptimizerConfig, total_epochs: usize) -> Self {
        Self {
            base: opt.learning_rate,
            warmup_epochs: opt.warmup_epochs.min(total_epochs),
            total_epochs,
            cosine_decay: opt.cosine_decay,
        }
    }

    pub fn floor(&self) -> f64 {
        self.base / 100.0
    }

    pub fn at(&self, position: f64) -> f64 {
        let lo = self.floor();
        let w = self.warmup_epochs as f64;
        if position < w {
            return lo + (self.base - lo) * position / w;
        }
        if !self.cosine_decay || self.total_epochs as f64 <= w {
            return self.base;
        }
        let progress = ((position - w) / (self.total_epochs as f64 - w)).clamp(0.0, 1.0);
        lo + 0.5 * (self.base - lo) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// SGD with heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &ModelParams, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// Applies one optimizer update from the gradients stored on `params`.
/// Frozen tensors and tensors without a gradient are left alone.
pub fn step_optimizer(params: &mut ModelParams, state: &mut SgdMomentum, lr: f64) -> Result<()> {
    let mu = state.momentum;
    let tensors = params.tensors_mut();
    if tensors.len() != state.velocity.len() {
        return Err(Error::InvalidArgument("optimizer state does not match the parameters".into()));
    }
    for (t, v) in tensors.into_iter().zip(state.velocity.iter_mut()) {
        if !t.requires_grad() {
            continue;
        }
        let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
        if v.len() != g.len() {
            *v = vec![0.0; g.len()];
        }
        for ((p, vi), gi) in t.values_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vi = mu * *vi + gi;
            *p -= lr * *vi;
        }
        t.clear_grad();
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Discover,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Discover => "discover",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub known_acc: f64,
    pub novel_cluster_acc: f64,
    pub all_acc: f64,
}

/// Epoch-level aggregates. Loss fields are means over the epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub config_hash: String,
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    pub lr_end: f64,
    pub l_sup: f64,
    pub l_u: f64,
    pub l_rkd: f64,
    pub total: f64,
    pub eta_mean: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub sinkhorn_iters_mean: f64,
    pub sinkhorn_unconverged: usize,
    /// Largest marginal violation among steps whose transport converged.
    pub max_marginal_violation: f64,
    pub known_train_acc: Option<f64>,
    pub eval: Option<EvalSummary>,
}

/// Per-epoch training records. Wall-clock durations are kept apart from
/// the records so that the serialized log is reproducible bit for bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
        self.epoch_seconds.extend(other.epoch_seconds);
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(Error::file(path))?;
        Ok(())
    }

    pub fn write_timing(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(Error::file(path))?);
        for (r, secs) in self.records.iter().zip(&self.epoch_seconds) {
            writeln!(
                w,
                "{}",
                serde_json::json!({ "stage": r.stage, "epoch": r.epoch, "seconds": secs })
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last(&self, stage: Stage) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.stage == stage)
    }
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    unlabeled_steps: usize,
    l_sup: f64,
    l_u: f64,
    l_rkd: f64,
    total: f64,
    eta_sum: f64,
    eta_min: f64,
    eta_max: f64,
    sinkhorn_iters: usize,
    sinkhorn_unconverged: usize,
    max_violation: f64,
    lr: f64,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            eta_min: f64::INFINITY,
            eta_max: f64::NEG_INFINITY,
            ..Self::default()
        }
    }

    fn add(&mut self, bd: &LossBreakdown, lr: f64) {
        self.steps += 1;
        self.l_sup += bd.l_sup;
        self.l_u += bd.l_u;
        self.l_rkd += bd.l_rkd;
        self.total += bd.total;
        self.lr = lr;
        if bd.n_unlabeled > 0 {
            self.unlabeled_steps += 1;
            self.eta_sum += bd.eta_mean;
            self.eta_min = self.eta_min.min(bd.eta_min);
            self.eta_max = self.eta_max.max(bd.eta_max);
        }
    }

    fn finish(self, hash: &str, stage: Stage, epoch: usize) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        let nu = self.unlabeled_steps.max(1) as f64;
        let seen = self.unlabeled_steps > 0;
        EpochRecord {
            config_hash: hash.to_string(),
            stage,
            epoch,
            steps: self.steps,
            lr_end: self.lr,
            l_sup: self.l_sup / n,
            l_u: self.l_u / n,
            l_rkd: self.l_rkd / n,
            total: self.total / n,
            eta_mean: if seen { self.eta_sum / nu } else { 0.0 },
            eta_min: if seen { self.eta_min } else { 0.0 },
            eta_max: if seen { self.eta_max } else { 0.0 },
            sinkhorn_iters_mean: self.sinkhorn_iters as f64 / nu,
            sinkhorn_unconverged: self.sinkhorn_unconverged,
            max_marginal_violation: self.max_violation,
            known_train_acc: None,
            eval: None,
        }
    }
}

pub fn architecture(dataset: &Dataset, cfg: &RunConfig) -> Architecture {
    Architecture {
        input_dim: dataset.dim(),
        hidden: cfg.encoder_hidden.clone(),
        embedding_dim: cfg.embedding_dim,
        num_known: dataset.num_known(),
        num_novel: dataset.num_novel(),
        projection_hidden: cfg.novel_projection.then_some(cfg.projection_hidden),
    }
}

fn should_eval(cfg: &RunConfig, epoch: usize, total: usize) -> bool {
    epoch + 1 == total || (cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0)
}

fn diverged(stage: Stage, epoch: usize, step: usize, source: Error) -> Error {
    Error::Diverged {
        stage: stage.name(),
        epoch,
        step,
        source: Box::new(source),
    }
}

/// Initializes a model from `cfg.seed` and trains it with cross-entropy on
/// the known head alone. Zero epochs return the initialization.
pub fn pretrain(dataset: &Dataset, cfg: &RunConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if dataset.count(Split::LabeledKnown) == 0 {
        return Err(Error::Empty("LABELED_KNOWN split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PRETRAIN_STREAM);
    let mut params = ModelParams::init(&architecture(dataset, cfg), &mut rng)?;
    let mut opt = SgdMomentum::new(&params, cfg.optimizer.momentum);
    let schedule = LrSchedule::new(&cfg.optimizer, cfg.epochs_pretrain);
    let hash = cfg.hash();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs_pretrain {
        let start = Instant::now();
        let batches = make_supervised_batches(dataset, cfg.batch_size, &mut rng)?;
        let n_steps = batches.len();
        let mut acc = EpochAccumulator::new();
        for (step, batch) in batches.iter().enumerate() {
            let lr = schedule.at(epoch as f64 + step as f64 / n_steps as f64);
            let bd = supervised_step(&mut params, batch, cfg.tau)
                .and_then(|bd| {
                    step_optimizer(&mut params, &mut opt, lr)?;
                    Ok(bd)
                })
                .map_err(|e| diverged(Stage::Pretrain, epoch, step, e))?;
            acc.add(&bd, lr);
        }
        let mut rec = acc.finish(&hash, Stage::Pretrain, epoch);
        if should_eval(cfg, epoch, cfg.epochs_pretrain) {
            rec.known_train_acc = Some(train_known_acc(&params, dataset, cfg.tau)?);
        }
        debug!("pretrain epoch {epoch}: loss {:.5}", rec.total);
        log.records.push(rec);
        log.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    if let Some(r) = log.last(Stage::Pretrain) {
        info!("pretrain done: loss {:.5}, known train acc {:?}", r.total, r.known_train_acc);
    }
    Ok((params, log))
}

fn supervised_step(params: &mut ModelParams, batch: &Batch, tau: f64) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let x = tape.constant(batch.features.clone())?;
    let fwd = bound.forward(&mut tape, x, tau)?;
    let probs = tape.softmax(fwd.known_logits, tau)?;
    let labels = batch.known_labels();
    let num_known = tape.value(probs).cols();
    let loss = supervised_ce(&mut tape, probs, &labels, num_known)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "pretrain loss" });
    }
    let grads = tape.backward(loss)?;
    params.store_gradients(&bound, &grads)?;
    Ok(LossBreakdown {
        l_sup: value,
        total: value,
        n_labeled: labels.len(),
        ..LossBreakdown::default()
    })
}

/// Knobs of a discovery run that are not hyperparameters.
#[derive(Clone, Debug, Default)]
pub struct DiscoverOptions {
    /// Leave the distillation term out of the graph (rather than weighting
    /// it by zero).
    pub excise_relation_kd: bool,
    /// Write `epoch_<n>.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

/// A discovery run in progress: student, frozen teacher and optimizer state.
pub struct Discovery<'a> {
    dataset: &'a Dataset,
    cfg: RunConfig,
    options: DiscoverOptions,
    teacher: ModelParams,
    student: ModelParams,
    optimizer: SgdMomentum,
    schedule: LrSchedule,
    rng: ChaCha8Rng,
    hash: String,
    epoch: usize,
    log: TrainLog,
    label_reads_at_start: usize,
}

impl<'a> Discovery<'a> {
    pub fn new(dataset: &'a Dataset, pretrained: &ModelParams, cfg: &RunConfig, options: DiscoverOptions) -> Result<Self> {
        cfg.validate()?;
        if pretrained.input_dim() != dataset.dim() || pretrained.num_known() != dataset.num_known() {
            return Err(Error::InvalidArgument(format!(
                "model expects {} features and {} known classes, dataset has {} and {}",
                pretrained.input_dim(),
                pretrained.num_known(),
                dataset.dim(),
                dataset.num_known()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(DISCOVER_STREAM);
        let teacher = pretrained.snapshot();
        let mut student = pretrained.clone().trainable();
        if let Some(n) = cfg.novel_count_override {
            if n != student.num_novel() {
                student.reset_novel_head(n, &mut rng)?;
            }
        }
        let optimizer = SgdMomentum::new(&student, cfg.optimizer.momentum);
        Ok(Self {
            dataset,
            schedule: LrSchedule::new(&cfg.optimizer, cfg.epochs_discover),
            hash: cfg.hash(),
            cfg: cfg.clone(),
            options,
            teacher,
            student,
            optimizer,
            rng,
            epoch: 0,
            log: TrainLog::default(),
            label_reads_at_start: dataset.hidden_label_reads(),
        })
    }

    pub fn student(&self) -> &ModelParams {
        &self.student
    }

    pub fn teacher(&self) -> &ModelParams {
        &self.teacher
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One forward/backward/update on `batch` at learning rate `lr`.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<(LossBreakdown, Option<(usize, bool, f64)>)> {
        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape)?;
        let controls = LossControls {
            include_relation_kd: !self.options.excise_relation_kd,
            ..LossControls::default()
        };
        let terms = composite_loss(&mut tape, &bound, &self.teacher, batch, &self.cfg, &controls)?;
        if !terms.breakdown.total.is_finite() {
            return Err(Error::NonFinite { op: "discovery loss" });
        }
        let grads = tape.backward(terms.total)?;
        self.student.store_gradients(&bound, &grads)?;
        step_optimizer(&mut self.student, &mut self.optimizer, lr)?;
        let plan = terms.plan.map(|p| {
            let (r, c) = p.marginal_violations();
            (p.iterations_used, p.converged, r.max(c))
        });
        Ok((terms.breakdown, plan))
    }

    /// Runs one epoch and appends its record to the log.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch;
        let batches = make_batches(self.dataset, self.cfg.batch_size, self.cfg.labeled_fraction, &mut self.rng)?;
        let n_steps = batches.len();
        let mut acc = EpochAccumulator::new();
        for (step, batch) in batches.iter().enumerate() {
            let lr = self.schedule.at(epoch as f64 + step as f64 / n_steps as f64);
            let (bd, plan) = self
                .step(batch, lr)
                .map_err(|e| diverged(Stage::Discover, epoch, step, e))?;
            acc.add(&bd, lr);
            if let Some((iters, converged, violation)) = plan {
                acc.sinkhorn_iters += iters;
                if converged {
                    acc.max_violation = acc.max_violation.max(violation);
                } else {
                    acc.sinkhorn_unconverged += 1;
                }
            }
        }
        let mut rec = acc.finish(&self.hash, Stage::Discover, epoch);
        if should_eval(&self.cfg, epoch, self.cfg.epochs_discover) {
            let report = task_agnostic_eval(&self.student, self.dataset, &self.cfg)?;
            rec.eval = Some(EvalSummary {
                known_acc: report.known_acc,
                novel_cluster_acc: report.novel_cluster_acc,
                all_acc: report.all_acc,
            });
        }
        debug!(
            "discover epoch {epoch}: total {:.5} sup {:.5} u {:.5} rkd {:.5} eta {:.3}",
            rec.total, rec.l_sup, rec.l_u, rec.l_rkd, rec.eta_mean
        );
        if self.options.checkpoint_every > 0 && (epoch + 1) % self.options.checkpoint_every == 0 {
            if let Some(dir) = &self.options.checkpoint_dir {
                fs::create_dir_all(dir)?;
                save_checkpoint(&self.student, &dir.join(format!("epoch_{}.ckpt", epoch + 1)))?;
            }
        }
        self.epoch += 1;
        self.log.records.push(rec);
        self.log.epoch_seconds.push(start.elapsed().as_secs_f64());
        Ok(self.log.records.last().expect("record just pushed"))
    }

    /// Ends the run, checking that no hidden label was read along the way.
    pub fn finish(self) -> Result<(ModelParams, TrainLog)> {
        let reads = self.dataset.hidden_label_reads() - self.label_reads_at_start;
        if reads != 0 {
            return Err(Error::InvalidArgument(format!(
                "training read {reads} labels of unlabeled samples"
            )));
        }
        Ok((self.student, self.log))
    }
}

/// Joint discovery training from a pretrained model.
pub fn discover(dataset: &Dataset, pretrained: &ModelParams, cfg: &RunConfig) -> Result<(ModelParams, TrainLog)> {
    discover_with(dataset, pretrained, cfg, DiscoverOptions::default())
}

pub fn discover_with(
    dataset: &Dataset,
    pretrained: &ModelParams,
    cfg: &RunConfig,
    options: DiscoverOptions,
) -> Result<(ModelParams, TrainLog)> {
    let mut run = Discovery::new(dataset, pretrained, cfg, options)?;
    for _ in 0..cfg.epochs_discover {
        run.run_epoch()?;
    }
    let unconverged: usize = run.log.records.iter().map(|r| r.sinkhorn_unconverged).sum();
    if unconverged > 0 {
        warn!("sinkhorn hit max_iters on {unconverged} steps; the last iterates were used");
    }
    if let Some(r) = run.log.last(Stage::Discover) {
        info!(
            "discover done: total {:.5}, eval {:?}",
            r.total,
            r.eval.as_ref().map(|e| e.novel_cluster_acc)
        );
    }
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::model::Architecture;
    use crate::numerics::Tensor;
    use crate::config::WeightMode;

    fn tiny_data() -> Dataset {
        let spec = SyntheticSpec {
            dim: 8,
            n_known: 4,
            n_novel: 3,
            samples_per_class: 40,
            test_samples_per_class: 10,
            affinity_plan: crate::data::default_plan(4, 3),
            ..SyntheticSpec::default()
        };
        generate(&spec).unwrap().0
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            epochs_pretrain: 4,
            epochs_discover: 3,
            batch_size: 32,
            encoder_hidden: vec![16],
            embedding_dim: 8,
            projection_hidden: 8,
            eval_interval: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn vanilla_sgd_step() {
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![],
            embedding_dim: 2,
            num_known: 2,
            num_novel: 1,
            projection_hidden: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParams::init(&arch, &mut rng).unwrap();
        let before = p.clone();
        let grads: Vec<Vec<f64>> = p.tensors().iter().map(|t| (0..t.len()).map(|i| i as f64 - 0.5).collect()).collect();
        for (t, g) in p.tensors_mut().into_iter().zip(&grads) {
            t.set_grad(g.clone()).unwrap();
        }
        let mut opt = SgdMomentum::new(&p, 0.0);
        step_optimizer(&mut p, &mut opt, 0.1).unwrap();
        for ((a, b), g) in p.tensors().iter().zip(before.tensors()).zip(&grads) {
            for i in 0..a.len() {
                assert!((b.values()[i] - a.values()[i] - 0.1 * g[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn momentum_accumulates() {
        let arch = Architecture {
            input_dim: 1,
            hidden: vec![],
            embedding_dim: 1,
            num_known: 1,
            num_novel: 1,
            projection_hidden: None,
        };
        let mut p = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w0 = p.tensors()[0].values()[0];
        let mut opt = SgdMomentum::new(&p, 0.9);
        for _ in 0..2 {
            p.tensors_mut()[0].set_grad(vec![1.0]).unwrap();
            step_optimizer(&mut p, &mut opt, 1.0).unwrap();
        }
        assert!((w0 - p.tensors()[0].values()[0] - 2.9).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(&OptimizerConfig::default(), 150);
        assert!((s.at(0.0) - 0.0005).abs() < 1e-15);
        assert!((s.at(5.0) - 0.05).abs() < 1e-15);
        assert!(s.at(2.5) > s.at(1.0) && s.at(2.5) < s.at(4.0));
        assert!((s.at(150.0) - 0.0005).abs() < 1e-12);
        assert!(s.at(100.0) < s.at(50.0));
        let flat = LrSchedule { cosine_decay: false, ..s };
        assert_eq!(flat.at(120.0), 0.05);
    }

    #[test]
    fn zero_pretrain_epochs_returns_initialization() {
        let d = tiny_data();
        let cfg = RunConfig { epochs_pretrain: 0, ..tiny_cfg() };
        let (p, log) = pretrain(&d, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(PRETRAIN_STREAM);
        let init = ModelParams::init(&architecture(&d, &cfg), &mut rng).unwrap();
        assert_eq!(p, init);
        assert!(log.records.is_empty());
    }

    #[test]
    fn pretrain_leaves_novel_head_alone() {
        let d = tiny_data();
        let cfg = RunConfig { epochs_pretrain: 0, ..tiny_cfg() };
        let (init, _) = pretrain(&d, &cfg).unwrap();
        let (trained, log) = pretrain(&d, &tiny_cfg()).unwrap();
        assert_eq!(init.novel_head, trained.novel_head);
        assert_ne!(init.known_head, trained.known_head);
        assert!(log.records.iter().all(|r| r.config_hash == tiny_cfg().hash()));
        assert!(log.records.last().unwrap().total < log.records[0].total);
    }

    #[test]
    fn teacher_frozen_and_runs_reproducible() {
        let d = tiny_data();
        let cfg = tiny_cfg();
        let (pre, _) = pretrain(&d, &cfg).unwrap();
        let snapshot = pre.clone();
        let (a, la) = discover(&d, &pre, &cfg).unwrap();
        let (b, lb) = discover(&d, &pre, &cfg).unwrap();
        assert_eq!(pre, snapshot);
        assert_eq!(a, b);
        assert_eq!(la.to_jsonl().unwrap(), lb.to_jsonl().unwrap());
        assert_eq!(la.records.len(), 3);
        assert!(la.records.iter().all(|r| r.eval.is_some()));
        assert_eq!(d.hidden_label_reads(), 0);
        for r in &la.records {
            assert!(r.max_marginal_violation <= cfg.sinkhorn.tolerance);
        }
    }

    #[test]
    fn zero_beta_equals_excised_distillation() {
        let d = tiny_data();
        let cfg = RunConfig { beta: 0.0, ..tiny_cfg() };
        let (pre, _) = pretrain(&d, &cfg).unwrap();
        let (a, la) = discover(&d, &pre, &cfg).unwrap();
        let options = DiscoverOptions {
            excise_relation_kd: true,
            ..DiscoverOptions::default()
        };
        let (b, lb) = discover_with(&d, &pre, &cfg, options).unwrap();
        let bits = |p: &ModelParams| -> Vec<u64> {
            p.tensors().iter().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        for (ra, rb) in la.records.iter().zip(&lb.records) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
            assert_eq!(ra.l_u.to_bits(), rb.l_u.to_bits());
        }
    }

    #[test]
    fn equal_strengths_make_weighting_a_no_op() {
        // Every unlabeled sample is the same point, so every eta in a batch is
        // equal and the normalized weight is 1 everywhere.
        let d = tiny_data();
        let cfg = tiny_cfg();
        let (pre, _) = pretrain(&d, &cfg).unwrap();
        let unl = d.indices(Split::UnlabeledNovel);
        let lab = d.indices(Split::LabeledKnown);
        let mut idx: Vec<usize> = lab[..16].to_vec();
        idx.extend(std::iter::repeat_n(unl[0], 16));
        let batch = Batch::from_indices(&d, idx);
        let first_step = |mode: WeightMode| {
            let c = RunConfig { weight_mode: mode, ..cfg.clone() };
            let mut run = Discovery::new(&d, &pre, &c, DiscoverOptions::default()).unwrap();
            run.step(&batch, 0.01).unwrap().0
        };
        let one = first_step(WeightMode::One);
        let norm = first_step(WeightMode::NormEta);
        assert!((one.l_rkd - norm.l_rkd).abs() < 1e-12 * one.l_rkd.abs().max(1.0));
        assert_eq!(one.eta_min, one.eta_max);
    }

    #[test]
    fn novel_count_override_reshapes_student_only() {
        let d = tiny_data();
        let cfg = RunConfig { novel_count_override: Some(5), epochs_discover: 1, ..tiny_cfg() };
        let (pre, _) = pretrain(&d, &cfg).unwrap();
        let (student, log) = discover(&d, &pre, &cfg).unwrap();
        assert_eq!(student.num_novel(), 5);
        assert_eq!(pre.num_novel(), 3);
        assert!(log.records[0].eval.is_some());
    }

    #[test]
    fn checkpoints_written_at_interval() {
        let d = tiny_data();
        let cfg = tiny_cfg();
        let (pre, _) = pretrain(&d, &RunConfig { epochs_pretrain: 1, ..cfg.clone() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let options = DiscoverOptions {
            checkpoint_every: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..DiscoverOptions::default()
        };
        let (student, _) = discover_with(&d, &pre, &cfg, options).unwrap();
        assert!(dir.path().join("epoch_2.ckpt").exists());
        assert!(!dir.path().join("epoch_3.ckpt").exists());
        let loaded = crate::model::load_checkpoint(&dir.path().join("epoch_2.ckpt")).unwrap();
        assert_eq!(loaded.num_novel(), student.num_novel());
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let d = tiny_data();
        let cfg = tiny_cfg();
        let (mut pre, _) = pretrain(&d, &RunConfig { epochs_pretrain: 1, ..cfg.clone() }).unwrap();
        let w = &mut pre.encoder[0].weight;
        let n = w.len();
        *w = Tensor::matrix(w.rows(), w.cols(), vec![f64::MAX; n]).unwrap().with_requires_grad(true);
        match discover(&d, &pre, &cfg) {
            Err(Error::Diverged { stage, epoch, step, .. }) => assert_eq!((stage, epoch, step), ("discover", 0, 0)),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
