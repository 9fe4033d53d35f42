//! Equipartition pseudo-labels by entropic optimal transport.
//!
//! Given the batch prediction matrix `P` (`C^u x B`, each column a sample's
//! distribution scaled by `1/B`), the plan `Q` minimizes
//! `<Q, -ln P> - epsilon * H(Q)` over nonnegative matrices with row sums
//! `1/C^u` and column sums `1/B`. Sinkhorn-Knopp alternates exact row and
//! column rescalings of the Gibbs kernel `exp(ln P / epsilon)`; all updates
//! run on log-potentials so that small `epsilon` does not underflow.

use log::debug;

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Tape, Tensor, Var};

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROBABILITY_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Largest tolerated absolute violation of any marginal.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 300,
            tolerance: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Transport plan returned by [`solve`]. Plain values, never on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelPlan {
    /// `C^u x B` plan; rows sum to `1/C^u`, columns to `1/B` when converged.
    pub q: Tensor,
    pub iterations_used: usize,
    pub converged: bool,
}

impl PseudoLabelPlan {
    pub fn num_clusters(&self) -> usize {
        self.q.rows()
    }

    pub fn batch_size(&self) -> usize {
        self.q.cols()
    }

    /// Per-sample pseudo-label distributions, `B x C^u`: the columns of
    /// `B * Q`, transposed.
    pub fn pseudo_labels(&self) -> Tensor {
        let b = self.batch_size() as f64;
        let mut t = self.q.transpose();
        for v in t.values_mut() {
            *v *= b;
        }
        t
    }

    /// `(max row violation, max column violation)`.
    pub fn marginal_violations(&self) -> (f64, f64) {
        marginal_violations(&self.q)
    }
}

/// Largest absolute deviations of the row sums from `1/rows` and the column
/// sums from `1/cols`.
pub fn marginal_violations(q: &Tensor) -> (f64, f64) {
    let (k, b) = q.dims();
    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / b as f64;
    let mut col_sums = vec![0.0; b];
    let mut row_violation: f64 = 0.0;
    for i in 0..k {
        let row = q.row(i);
        row_violation = row_violation.max((row.iter().sum::<f64>() - row_target).abs());
        for (c, v) in col_sums.iter_mut().zip(row) {
            *c += v;
        }
    }
    let col_violation = col_sums.iter().map(|c| (c - col_target).abs()).fold(0.0, f64::max);
    (row_violation, col_violation)
}

/// `<Q, -ln P>` with `P` clamped at [`PROBABILITY_FLOOR`].
pub fn transport_cost(q: &Tensor, p: &Tensor) -> f64 {
    q.values()
        .iter()
        .zip(p.values())
        .map(|(qv, pv)| -qv * pv.max(PROBABILITY_FLOOR).ln())
        .sum()
}

/// Sinkhorn-Knopp iterate, exposed so callers can observe every half step.
#[derive(Clone, Debug)]
pub struct SinkhornState {
    /// `ln P / epsilon`, row-major `C^u x B`.
    log_kernel: Vec<f64>,
    row_potential: Vec<f64>,
    col_potential: Vec<f64>,
    clusters: usize,
    batch: usize,
    epsilon: f64,
}

impl SinkhornState {
    pub fn new(p: &Tensor, epsilon: f64) -> Result<Self> {
        let (k, b) = p.dims();
        if k == 0 || b == 0 {
            return Err(Error::Empty("prediction matrix"));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        let mut log_kernel = Vec::with_capacity(k * b);
        for &v in p.values() {
            let cost = -v.max(PROBABILITY_FLOOR).ln();
            if !cost.is_finite() || v.is_nan() {
                return Err(Error::Domain {
                    op: "sinkhorn",
                    detail: format!("non-finite cost from prediction entry {v}"),
                });
            }
            log_kernel.push(-cost / epsilon);
        }
        Ok(Self {
            log_kernel,
            row_potential: vec![0.0; k],
            col_potential: vec![0.0; b],
            clusters: k,
            batch: b,
            epsilon,
        })
    }

    fn log_entry(&self, i: usize, j: usize) -> f64 {
        self.log_kernel[i * self.batch + j] + self.row_potential[i] + self.col_potential[j]
    }

    /// Rescales rows so that each sums to exactly `1/C^u`.
    pub fn row_step(&mut self) {
        let target = -(self.clusters as f64).ln();
        for i in 0..self.clusters {
            let row = &self.log_kernel[i * self.batch..(i + 1) * self.batch];
            let lse = log_sum_exp(row.iter().zip(&self.col_potential).map(|(k, g)| k + g));
            self.row_potential[i] = target - lse;
        }
    }

    /// Rescales columns so that each sums to exactly `1/B`.
    pub fn col_step(&mut self) {
        let target = -(self.batch as f64).ln();
        for j in 0..self.batch {
            let column = (0..self.clusters).map(|i| self.log_kernel[i * self.batch + j] + self.row_potential[i]);
            self.col_potential[j] = target - log_sum_exp(column);
        }
    }

    pub fn plan(&self) -> Tensor {
        let mut q = Vec::with_capacity(self.clusters * self.batch);
        for i in 0..self.clusters {
            for j in 0..self.batch {
                q.push(self.log_entry(i, j).exp());
            }
        }
        Tensor::matrix(self.clusters, self.batch, q).expect("plan shape")
    }

    /// Entropic objective `<Q, -ln P> + epsilon * sum Q (ln Q - 1)` of the
    /// current iterate.
    pub fn entropic_objective(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.clusters {
            for j in 0..self.batch {
                let lq = self.log_entry(i, j);
                let q = lq.exp();
                let cost = -self.log_kernel[i * self.batch + j] * self.epsilon;
                total += q * cost + self.epsilon * q * (lq - 1.0);
            }
        }
        total
    }

    /// Dual objective of the entropic program at the current potentials.
    pub fn dual_objective(&self) -> f64 {
        let eps = self.epsilon;
        let a = 1.0 / self.clusters as f64;
        let b = 1.0 / self.batch as f64;
        let f: f64 = self.row_potential.iter().map(|u| eps * u * a).sum();
        let g: f64 = self.col_potential.iter().map(|v| eps * v * b).sum();
        let mass: f64 = (0..self.clusters)
            .flat_map(|i| (0..self.batch).map(move |j| (i, j)))
            .map(|(i, j)| self.log_entry(i, j).exp())
            .sum();
        f + g - eps * mass
    }
}

/// Solves the equipartition transport problem for `p` (`C^u x B`).
///
/// Non-convergence is not an error: the last iterate is returned with
/// `converged = false` and a debug message is logged.
pub fn solve(p: &Tensor, cfg: &SinkhornConfig) -> Result<PseudoLabelPlan> {
    cfg.validate()?;
    let mut state = SinkhornState::new(p, cfg.epsilon)?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        state.row_step();
        state.col_step();
        iterations += 1;
        let (row_v, col_v) = marginal_violations(&state.plan());
        if row_v <= cfg.tolerance && col_v <= cfg.tolerance {
            converged = true;
            break;
        }
    }
    let q = state.plan();
    if !converged {
        let (row_v, col_v) = marginal_violations(&q);
        debug!(
            "sinkhorn did not converge in {} iterations (row violation {row_v:.3e}, column violation {col_v:.3e})",
            cfg.max_iters
        );
    }
    Ok(PseudoLabelPlan {
        q,
        iterations_used: iterations,
        converged,
    })
}

/// Self-labeling loss `(1/B) sum_i -q*(y_i|x_i) . ln p(y_i|x_i)`.
///
/// `log_probs` is `B x C^u` (one row per sample); the plan enters as a
/// constant.
pub fn loss_u(tape: &mut Tape, plan: &PseudoLabelPlan, log_probs: Var) -> Result<Var> {
    let targets = plan.pseudo_labels();
    if targets.dims() != tape.value(log_probs).dims() {
        return Err(Error::ShapeMismatch {
            op: "loss_u",
            lhs: targets.shape().to_vec(),
            rhs: tape.value(log_probs).shape().to_vec(),
        });
    }
    let batch = targets.rows() as f64;
    let t = tape.constant(targets)?;
    let weighted = tape.mul(t, log_probs)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_prediction(rng: &mut ChaCha8Rng, k: usize, b: usize) -> Tensor {
        let mut p = Tensor::zeros(k, b);
        for j in 0..b {
            let col: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = col.iter().sum();
            for (i, v) in col.iter().enumerate() {
                p.set(i, j, v / s / b as f64);
            }
        }
        p
    }

    /// Vertices of the 2 x 3 transportation polytope with row sums 1/2 and
    /// column sums 1/3, enumerated directly: the first row `x` satisfies
    /// `sum x = 1/2`, `0 <= x_j <= 1/3`, and at a vertex at least two of the
    /// `x_j` sit on a bound.
    fn lp_optimum_2x3(p: &Tensor) -> f64 {
        let third = 1.0 / 3.0;
        let mut best = f64::INFINITY;
        for free in 0..3 {
            for mask in 0..4u32 {
                let mut x = [0.0; 3];
                let mut fixed_sum = 0.0;
                let mut bit = 0;
                for (j, xj) in x.iter_mut().enumerate() {
                    if j == free {
                        continue;
                    }
                    *xj = if mask >> bit & 1 == 1 { third } else { 0.0 };
                    fixed_sum += *xj;
                    bit += 1;
                }
                x[free] = 0.5 - fixed_sum;
                if x[free] < -1e-12 || x[free] > third + 1e-12 {
                    continue;
                }
                let q = Tensor::matrix(2, 3, vec![x[0], x[1], x[2], third - x[0], third - x[1], third - x[2]]).unwrap();
                best = best.min(transport_cost(&q, p));
            }
        }
        best
    }

    #[test]
    fn uniform_prediction_gives_uniform_plan() {
        let p = Tensor::filled(4, 6, 0.25 / 6.0);
        let plan = solve(&p, &SinkhornConfig::default()).unwrap();
        assert!(plan.converged);
        assert!(plan.q.values().iter().all(|v| (v - 1.0 / 24.0).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_lp_solution() {
        // Q = [[x, 1/2 - x], [1/2 - x, x]]; cost is linear in x with negative
        // slope 2 ln(0.1/0.9) so the optimum sits at x = 1/2.
        let p = Tensor::matrix(2, 2, vec![0.45, 0.05, 0.05, 0.45]).unwrap();
        let plan = solve(&p, &SinkhornConfig::default()).unwrap();
        let expected = [0.5, 0.0, 0.0, 0.5];
        for (q, e) in plan.q.values().iter().zip(expected) {
            assert!((q - e).abs() < 1e-6, "{:?}", plan.q);
        }
    }

    #[test]
    fn two_by_three_near_lp_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SinkhornConfig {
            epsilon: 0.01,
            max_iters: 20_000,
            tolerance: 1e-9,
        };
        for _ in 0..50 {
            let p = random_prediction(&mut rng, 2, 3);
            let plan = solve(&p, &cfg).unwrap();
            let opt = lp_optimum_2x3(&p);
            let cost = transport_cost(&plan.q, &p);
            assert!(cost >= opt - 1e-7);
            assert!((cost - opt) / opt < 0.01, "cost {cost} opt {opt}");
        }
    }

    #[test]
    fn half_steps_make_their_marginal_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_prediction(&mut rng, 5, 17);
        let mut s = SinkhornState::new(&p, 0.05).unwrap();
        for _ in 0..5 {
            s.row_step();
            assert!(marginal_violations(&s.plan()).0 < 1e-14);
            s.col_step();
            assert!(marginal_violations(&s.plan()).1 < 1e-14);
        }
    }

    #[test]
    fn violation_falls_and_dual_rises_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..100 {
            let k = rng.random_range(2..=8);
            let b = rng.random_range(2..=64);
            let p = random_prediction(&mut rng, k, b);
            let mut s = SinkhornState::new(&p, 0.05).unwrap();
            let mut last_violation = f64::INFINITY;
            let mut last_dual = f64::NEG_INFINITY;
            for _ in 0..200 {
                s.row_step();
                let d = s.dual_objective();
                assert!(d >= last_dual - 1e-12, "trial {trial}: dual fell");
                s.col_step();
                let d = s.dual_objective();
                assert!(d >= last_dual - 1e-12, "trial {trial}: dual fell");
                last_dual = d;
                let (rv, _) = marginal_violations(&s.plan());
                assert!(rv <= last_violation + 1e-15, "trial {trial}: violation rose");
                last_violation = rv;
            }
            if last_violation < 1e-9 {
                // Zero duality gap once the iterate is feasible.
                let gap = (s.entropic_objective() - s.dual_objective()).abs();
                assert!(gap < 1e-6, "trial {trial}: duality gap {gap}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Tensor::matrix(2, 2, vec![0.25, f64::NAN, 0.25, 0.25]).unwrap();
        assert!(solve(&p, &SinkhornConfig::default()).is_err());
        let p = Tensor::filled(2, 2, 0.25);
        let bad = SinkhornConfig { epsilon: 0.0, ..Default::default() };
        assert!(solve(&p, &bad).is_err());
        let bad = SinkhornConfig { max_iters: 0, ..Default::default() };
        assert!(solve(&p, &bad).is_err());
    }

    #[test]
    fn zero_probabilities_are_clamped() {
        let p = Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let plan = solve(&p, &SinkhornConfig::default()).unwrap();
        assert!(plan.q.all_finite());
    }

    #[test]
    fn non_convergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_prediction(&mut rng, 6, 40);
        let cfg = SinkhornConfig { epsilon: 0.01, max_iters: 1, tolerance: 1e-12 };
        let plan = solve(&p, &cfg).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations_used, 1);
    }

    #[test]
    fn loss_u_examples() {
        // Perfect agreement: one-hot pseudo-labels, confident predictions.
        let q = Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let plan = PseudoLabelPlan { q, iterations_used: 1, converged: true };
        let mut tape = Tape::new();
        let lp = tape.constant(Tensor::matrix(2, 2, vec![0.0, -50.0, -50.0, 0.0]).unwrap()).unwrap();
        let l = loss_u(&mut tape, &plan, lp).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-15);

        // Uniform plan and uniform predictions over 4 clusters.
        let q = Tensor::filled(4, 3, 1.0 / 12.0);
        let plan = PseudoLabelPlan { q, iterations_used: 1, converged: true };
        let lp = tape.constant(Tensor::filled(3, 4, -(4f64.ln()))).unwrap();
        let l = loss_u(&mut tape, &plan, lp).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-14);

        let wrong = tape.constant(Tensor::filled(4, 3, -1.0)).unwrap();
        assert!(loss_u(&mut tape, &plan, wrong).is_err());
    }

    #[test]
    fn loss_u_gradient_flows_into_log_probs_only() {
        let q = Tensor::filled(3, 2, 1.0 / 6.0);
        let plan = PseudoLabelPlan { q, iterations_used: 1, converged: true };
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.3, 0.0, 1.0]).unwrap().with_requires_grad(true)).unwrap();
        let lp = tape.log_softmax(x, 1.0).unwrap();
        let l = loss_u(&mut tape, &plan, lp).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.values(x).unwrap().iter().any(|v| v.abs() > 0.0));
        // only two leaves exist: the logits and the constant targets
        assert_eq!(
            (0..tape.len()).filter(|&i| i == 0).count(),
            1
        );
        assert!(!plan.q.requires_grad());
    }

    proptest! {
        #[test]
        fn column_permutation_equivariance(seed in 0u64..1000, shift in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_prediction(&mut rng, 3, 8);
            let perm: Vec<usize> = (0..8).map(|j| (j + shift) % 8).collect();
            let mut permuted = Tensor::zeros(3, 8);
            for i in 0..3 {
                for (j, &src) in perm.iter().enumerate() {
                    permuted.set(i, j, p.get(i, src));
                }
            }
            let cfg = SinkhornConfig::default();
            let a = solve(&p, &cfg).unwrap();
            let b = solve(&permuted, &cfg).unwrap();
            for i in 0..3 {
                for (j, &src) in perm.iter().enumerate() {
                    prop_assert!((b.q.get(i, j) - a.q.get(i, src)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn converged_plans_satisfy_marginals(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(2..=8);
            let b = rng.random_range(2..=64);
            let p = random_prediction(&mut rng, k, b);
            let plan = solve(&p, &SinkhornConfig::default()).unwrap();
            prop_assert!(plan.q.values().iter().all(|v| *v >= 0.0));
            if plan.converged {
                let (r, c) = plan.marginal_violations();
                prop_assert!(r <= 1e-6 && c <= 1e-6);
            }
        }
    }
}
