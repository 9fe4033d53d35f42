//! Supervised, self-labeling and weighted relation-distillation losses.

use log::warn;
use serde::{Deserialize, Serialize};

pub use crate::config::{ProbabilitySource, WeightMode};
use crate::config::RunConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{student_relation, teacher_relation, BoundModel, ForwardVars, ModelParams};
use crate::numerics::{Tape, Tensor, Var};
use crate::transport::{self, loss_u, PseudoLabelPlan, PROBABILITY_FLOOR};

/// Mean of `-ln full_probs[i, y_i]` over the rows of `full_probs`.
pub fn supervised_ce(tape: &mut Tape, full_probs: Var, labels: &[usize], num_known: usize) -> Result<Var> {
    let (n, c) = tape.value(full_probs).dims();
    if labels.is_empty() {
        return Err(Error::Empty("supervised_ce labels"));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "supervised_ce",
            lhs: tape.value(full_probs).shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let bound = num_known.min(c);
    let mut onehot = Tensor::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= bound {
            return Err(Error::LabelOutOfRange { label: y, classes: bound });
        }
        onehot.set(i, y, 1.0);
    }
    let onehot = tape.constant(onehot)?;
    let safe = tape.clamp_min(full_probs, PROBABILITY_FLOOR)?;
    let logp = tape.ln(safe)?;
    let picked = tape.mul(onehot, logp)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

/// `eta_i`: probability mass of row `i` on the first `num_known` columns.
/// Stays on the tape. Returns a `B x 1` column.
pub fn relation_strength(tape: &mut Tape, full_probs: Var, num_known: usize) -> Result<Var> {
    let known = tape.slice_cols(full_probs, 0, num_known)?;
    tape.row_sum(known)
}

/// Per-sample weights `g(eta)` as a `B x 1` column.
pub fn weight(tape: &mut Tape, eta: Var, mode: WeightMode) -> Result<Var> {
    let (b, _) = tape.value(eta).dims();
    match mode {
        WeightMode::One => tape.constant(Tensor::ones(b, 1)),
        WeightMode::Eta => Ok(eta),
        WeightMode::SgEta => tape.stop_gradient(eta),
        WeightMode::NormEta | WeightMode::SgNormEta => {
            let vals = tape.value(eta).values();
            if vals.iter().any(|&v| v <= 0.0) || vals.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Domain {
                    op: "weight",
                    detail: "normalized weights need every relation strength to be positive".into(),
                });
            }
            let total = tape.sum(eta)?;
            let scaled = tape.scale(eta, b as f64)?;
            let g = tape.div(scaled, total)?;
            if mode == WeightMode::SgNormEta {
                tape.stop_gradient(g)
            } else {
                Ok(g)
            }
        }
    }
}

/// Per-sample `KL(pT_i || pS_i)` as a `B x 1` column. `p_teacher` enters as
/// a constant; student entries below the probability floor are clamped.
pub fn distillation_kl(tape: &mut Tape, p_teacher: &Tensor, p_student: Var) -> Result<Var> {
    let ps = tape.value(p_student);
    if ps.dims() != p_teacher.dims() {
        return Err(Error::ShapeMismatch {
            op: "relation_kd",
            lhs: p_teacher.shape().to_vec(),
            rhs: ps.shape().to_vec(),
        });
    }
    let clamped = ps.values().iter().filter(|&&v| v < PROBABILITY_FLOOR).count();
    if clamped > 0 {
        warn!("relation_kd: clamped {clamped} student probabilities to {PROBABILITY_FLOOR:e}");
    }
    let (b, c) = p_teacher.dims();
    let neg_entropy: Vec<f64> = (0..b)
        .map(|i| {
            p_teacher.row(i)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum()
        })
        .collect();
    let neg_entropy = tape.constant(Tensor::matrix(b, 1, neg_entropy)?)?;
    let pt = tape.constant(Tensor::matrix(b, c, p_teacher.values().to_vec())?)?;
    let safe = tape.clamp_min(p_student, PROBABILITY_FLOOR)?;
    let log_ps = tape.ln(safe)?;
    let cross = tape.mul(pt, log_ps)?;
    let cross = tape.row_sum(cross)?;
    tape.sub(neg_entropy, cross)
}

/// `(1/B) sum_i g_i KL(pT_i || pS_i)`, returned with the per-sample KL values.
pub fn relation_kd(tape: &mut Tape, p_teacher: &Tensor, p_student: Var, g: Var) -> Result<(Var, Vec<f64>)> {
    let kl = distillation_kl(tape, p_teacher, p_student)?;
    if tape.value(g).dims() != tape.value(kl).dims() {
        return Err(Error::ShapeMismatch {
            op: "relation_kd",
            lhs: tape.value(g).shape().to_vec(),
            rhs: tape.value(kl).shape().to_vec(),
        });
    }
    let per_sample = tape.value(kl).values().to_vec();
    let weighted = tape.mul(g, kl)?;
    Ok((tape.mean(weighted)?, per_sample))
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_u: f64,
    pub l_rkd: f64,
    pub total: f64,
    pub eta_mean: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub kl_per_sample: Vec<f64>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
}

/// Tape handles and values of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub forward: ForwardVars,
    pub breakdown: LossBreakdown,
    /// The transport plan used for the self-labeling term, when the batch
    /// had unlabeled samples.
    pub plan: Option<PseudoLabelPlan>,
    /// Values of `g(eta)` over the unlabeled rows.
    pub weights: Option<Tensor>,
}

/// Optional pieces of [`composite_loss`] held fixed instead of computed.
#[derive(Clone, Copy, Debug)]
pub struct LossControls<'a> {
    /// Transport plan for the unlabeled rows.
    pub q_star: Option<&'a PseudoLabelPlan>,
    /// Constant distillation weights (`B_u x 1`), replacing `g(eta)`.
    pub fixed_weights: Option<&'a Tensor>,
    pub include_relation_kd: bool,
}

impl Default for LossControls<'_> {
    fn default() -> Self {
        Self {
            q_star: None,
            fixed_weights: None,
            include_relation_kd: true,
        }
    }
}

/// Log-probabilities over the novel head for the given rows, plus their
/// detached values laid out `C^u x B` for the transport solver.
fn novel_log_probs(
    tape: &mut Tape,
    fwd: &ForwardVars,
    rows: &[usize],
    num_known: usize,
    tau: f64,
    source: ProbabilitySource,
) -> Result<(Var, Tensor)> {
    let total_classes = tape.value(fwd.full_probs).cols();
    let (log_p, probs) = match source {
        ProbabilitySource::NovelHeadOnly => {
            let logits = tape.gather_rows(fwd.novel_logits, rows)?;
            let log_p = tape.log_softmax(logits, tau)?;
            let probs = tape.value(log_p).values().iter().map(|v| v.exp()).collect::<Vec<_>>();
            let (r, c) = tape.value(log_p).dims();
            (log_p, Tensor::matrix(r, c, probs)?)
        }
        ProbabilitySource::FullSliceRenorm | ProbabilitySource::FullSliceRaw => {
            let fp = tape.gather_rows(fwd.full_probs, rows)?;
            let mut slice = tape.slice_cols(fp, num_known, total_classes)?;
            if source == ProbabilitySource::FullSliceRenorm {
                let mass = tape.row_sum(slice)?;
                slice = tape.div(slice, mass)?;
            }
            let probs = tape.value(slice).clone().with_requires_grad(false);
            let safe = tape.clamp_min(slice, PROBABILITY_FLOOR)?;
            (tape.ln(safe)?, probs)
        }
    };
    let b = probs.rows() as f64;
    let mut p = probs.transpose();
    p.values_mut().iter_mut().for_each(|v| *v /= b);
    Ok((log_p, p))
}

/// The composite objective `L_l + alpha L_u + beta L_rKD` on one batch.
///
/// `q_star` fixes the transport plan; when `None` it is solved from the
/// detached novel probabilities of the unlabeled rows. Labeled rows feed
/// only the supervised term, unlabeled rows only the other two; a term with
/// no rows is zero.
pub fn total_loss(
    tape: &mut Tape,
    student: &BoundModel,
    teacher: &ModelParams,
    batch: &Batch,
    q_star: Option<&PseudoLabelPlan>,
    cfg: &RunConfig,
) -> Result<LossTerms> {
    let controls = LossControls {
        q_star,
        ..LossControls::default()
    };
    composite_loss(tape, student, teacher, batch, cfg, &controls)
}

/// [`total_loss`] with parts of the computation pinned by `controls`.
/// Leaving the distillation term out drops it from the graph entirely.
pub fn composite_loss(
    tape: &mut Tape,
    student: &BoundModel,
    teacher: &ModelParams,
    batch: &Batch,
    cfg: &RunConfig,
    controls: &LossControls<'_>,
) -> Result<LossTerms> {
    let include_relation_kd = controls.include_relation_kd;
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let x = tape.constant(batch.features.clone())?;
    let fwd = student.forward(tape, x, cfg.tau)?;
    let num_known = tape.value(fwd.known_logits).cols();
    let mut bd = LossBreakdown::default();
    let zero = tape.constant(Tensor::scalar(0.0))?;

    let labeled = batch.labeled_rows();
    bd.n_labeled = labeled.len();
    let l_sup = if labeled.is_empty() {
        zero
    } else {
        let fp = tape.gather_rows(fwd.full_probs, &labeled)?;
        supervised_ce(tape, fp, &batch.known_labels(), num_known)?
    };

    let unlabeled = batch.unlabeled_rows();
    bd.n_unlabeled = unlabeled.len();
    let (mut l_u, mut l_rkd, mut plan, mut weights) = (zero, zero, None, None);
    if !unlabeled.is_empty() {
        let (log_p, p) = novel_log_probs(tape, &fwd, &unlabeled, num_known, cfg.tau, cfg.eq3_probability_source)?;
        let solved = match controls.q_star {
            Some(q) => {
                if q.q.dims() != p.dims() {
                    return Err(Error::ShapeMismatch {
                        op: "total_loss",
                        lhs: q.q.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
                q.clone()
            }
            None => transport::solve(&p, &cfg.sinkhorn)?,
        };
        l_u = loss_u(tape, &solved, log_p)?;
        plan = Some(solved);

        let fp = tape.gather_rows(fwd.full_probs, &unlabeled)?;
        let eta = relation_strength(tape, fp, num_known)?;
        let eta_vals = tape.value(eta).values();
        bd.eta_mean = eta_vals.iter().sum::<f64>() / eta_vals.len() as f64;
        bd.eta_min = eta_vals.iter().copied().fold(f64::INFINITY, f64::min);
        bd.eta_max = eta_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        if include_relation_kd {
            let p_teacher = teacher_relation(teacher, &batch.features.select_rows(&unlabeled), cfg.t)?;
            let kl = tape.gather_rows(fwd.known_logits, &unlabeled)?;
            let p_student = student_relation(tape, kl, cfg.t)?;
            let g = match controls.fixed_weights {
                Some(w) => tape.constant(w.clone().with_requires_grad(false))?,
                None => weight(tape, eta, cfg.weight_mode)?,
            };
            weights = Some(tape.value(g).clone());
            let (rkd, per_sample) = relation_kd(tape, &p_teacher, p_student, g)?;
            l_rkd = rkd;
            bd.kl_per_sample = per_sample;
        }
    }

    let a = tape.scale(l_u, cfg.alpha)?;
    let mut total = tape.add(l_sup, a)?;
    if include_relation_kd {
        let b = tape.scale(l_rkd, cfg.beta)?;
        total = tape.add(total, b)?;
    }
    bd.l_sup = tape.value(l_sup).item()?;
    bd.l_u = tape.value(l_u).item()?;
    bd.l_rkd = tape.value(l_rkd).item()?;
    bd.total = tape.value(total).item()?;
    Ok(LossTerms {
        total,
        forward: fwd,
        breakdown: bd,
        plan,
        weights,
    })
}
