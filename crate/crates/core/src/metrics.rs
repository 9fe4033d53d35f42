//! Hungarian matching, clustering accuracy and task-agnostic evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, WeightMode};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// A maximum-profit assignment of rows (predicted clusters) to columns
/// (ground-truth classes).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    /// `mapping[row] = column`.
    pub mapping: Vec<usize>,
    /// Total profit of the matched cells.
    pub profit: i64,
}

/// Maximum-profit perfect matching on a square matrix, O(k^3).
///
/// Shortest augmenting paths with row/column potentials on the cost matrix
/// `-profit`.
pub fn hungarian(profit: &[Vec<i64>]) -> Result<Assignment> {
    let k = profit.len();
    if profit.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidArgument("hungarian needs a square matrix".into()));
    }
    if k == 0 {
        return Ok(Assignment { mapping: Vec::new(), profit: 0 });
    }
    // 1-based arrays; column 0 is a sentinel.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; k + 1];
    let mut v = vec![0i64; k + 1];
    let mut row_of = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = -profit[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0; k];
    for j in 1..=k {
        mapping[row_of[j] - 1] = j - 1;
    }
    let total = mapping.iter().enumerate().map(|(r, &c)| profit[r][c]).sum();
    Ok(Assignment { mapping, profit: total })
}

fn index_of(ids: impl Iterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut map = BTreeMap::new();
    for id in ids {
        let next = map.len();
        map.entry(id).or_insert(next);
    }
    map
}

/// Number of samples matched under the best injection from predicted ids
/// accepted by `eligible` to truth ids. Predictions rejected by `eligible`
/// never match.
fn best_match_count(pred: &[usize], truth: &[usize], eligible: impl Fn(usize) -> bool) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("cluster_acc input"));
    }
    let mut sorted_pred: Vec<usize> = pred.iter().copied().filter(|&p| eligible(p)).collect();
    sorted_pred.sort_unstable();
    let mut sorted_truth = truth.to_vec();
    sorted_truth.sort_unstable();
    let rows = index_of(sorted_pred.into_iter());
    let cols = index_of(sorted_truth.into_iter());
    let k = rows.len().max(cols.len());
    let mut table = vec![vec![0i64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if let Some(&r) = rows.get(&p) {
            table[r][cols[&t]] += 1;
        }
    }
    Ok(hungarian(&table)?.profit as usize)
}

/// Fraction of samples correct under the best one-to-one relabeling of
/// predicted ids. Rectangular contingency tables are zero-padded.
pub fn cluster_acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(best_match_count(pred, truth, |_| true)? as f64 / pred.len() as f64)
}

/// Task-agnostic scores over a joint known + novel population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub known_acc: f64,
    pub novel_cluster_acc: f64,
    pub all_acc: f64,
    pub n_known: usize,
    pub n_novel: usize,
    pub seed: u64,
    pub beta: f64,
    pub weight_mode: WeightMode,
    /// `confusion[truth][predicted]` counts over the evaluated samples.
    pub confusion: Vec<Vec<usize>>,
}

/// Scores joint-output predictions.
///
/// Known-population samples use plain accuracy. Novel-population samples
/// use clustering accuracy where only predictions in the novel block
/// (`>= num_known`) can be matched, so a novel sample predicted as a known
/// class is always an error.
pub fn score_task_agnostic(
    pred: &[usize],
    truth: &[usize],
    is_novel: &[bool],
    num_known: usize,
    num_outputs: usize,
    num_classes: usize,
) -> Result<(f64, f64, f64, Vec<Vec<usize>>)> {
    if pred.len() != truth.len() || pred.len() != is_novel.len() {
        return Err(Error::InvalidArgument("prediction, label and population lengths differ".into()));
    }
    let (mut kp, mut kt, mut np, mut nt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut confusion = vec![vec![0usize; num_outputs]; num_classes];
    for i in 0..pred.len() {
        if pred[i] >= num_outputs || truth[i] >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: pred[i].max(truth[i]),
                classes: num_outputs.min(num_classes),
            });
        }
        confusion[truth[i]][pred[i]] += 1;
        if is_novel[i] {
            np.push(pred[i]);
            nt.push(truth[i]);
        } else {
            kp.push(pred[i]);
            kt.push(truth[i]);
        }
    }
    if kp.is_empty() {
        return Err(Error::Empty("known population"));
    }
    if np.is_empty() {
        return Err(Error::Empty("novel population"));
    }
    let known_correct = kp.iter().zip(&kt).filter(|(p, t)| p == t).count();
    let novel_correct = best_match_count(&np, &nt, |p| p >= num_known)?;
    let known_acc = known_correct as f64 / kp.len() as f64;
    let novel_acc = novel_correct as f64 / np.len() as f64;
    let all_acc = (known_correct + novel_correct) as f64 / pred.len() as f64;
    Ok((known_acc, novel_acc, all_acc, confusion))
}

/// Predicts every `TEST_KNOWN` and `TEST_NOVEL` sample by argmax over the
/// full joint output and scores it without using population membership.
pub fn task_agnostic_eval(model: &ModelParams, dataset: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
    let idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| matches!(dataset.split(i), Split::TestKnown | Split::TestNovel))
        .collect();
    if idx.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let out = model.forward_values(&dataset.features_of(&idx), cfg.tau)?;
    let pred = out.full_probs.argmax_rows();
    let truth = dataset.labels_of(&idx);
    let is_novel: Vec<bool> = idx.iter().map(|&i| dataset.split(i).is_novel()).collect();
    let num_classes = dataset.num_known() + dataset.num_novel();
    let (known_acc, novel_cluster_acc, all_acc, confusion) = score_task_agnostic(
        &pred,
        &truth,
        &is_novel,
        model.num_known(),
        out.full_probs.cols(),
        num_classes,
    )?;
    Ok(EvalReport {
        known_acc,
        novel_cluster_acc,
        all_acc,
        n_known: is_novel.iter().filter(|&&n| !n).count(),
        n_novel: is_novel.iter().filter(|&&n| n).count(),
        seed: cfg.seed,
        beta: cfg.beta,
        weight_mode: cfg.weight_mode,
        confusion,
    })
}

/// Clustering accuracy of the novel head on the unlabeled training split.
pub fn train_novel_acc(model: &ModelParams, dataset: &Dataset, tau: f64) -> Result<f64> {
    let idx = dataset.indices(Split::UnlabeledNovel);
    if idx.is_empty() {
        return Err(Error::Empty("unlabeled training split"));
    }
    let out = model.forward_values(&dataset.features_of(&idx), tau)?;
    cluster_acc(&out.novel_logits.argmax_rows(), &dataset.labels_of(&idx))
}

/// Plain accuracy of the known head on the labeled training split.
pub fn train_known_acc(model: &ModelParams, dataset: &Dataset, tau: f64) -> Result<f64> {
    let idx = dataset.indices(Split::LabeledKnown);
    if idx.is_empty() {
        return Err(Error::Empty("labeled training split"));
    }
    let out = model.forward_values(&dataset.features_of(&idx), tau)?;
    let pred = out.known_logits.argmax_rows();
    let hits = idx.iter().zip(&pred).filter(|(&i, &p)| dataset.label(i) == p).count();
    Ok(hits as f64 / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force(profit: &[Vec<i64>]) -> i64 {
        permutations(profit.len())
            .iter()
            .map(|p| p.iter().enumerate().map(|(r, &c)| profit[r][c]).sum())
            .max()
            .unwrap()
    }

    fn brute_force_acc(pred: &[usize], truth: &[usize]) -> f64 {
        let mut p_ids: Vec<usize> = pred.to_vec();
        p_ids.sort_unstable();
        p_ids.dedup();
        let mut t_ids: Vec<usize> = truth.to_vec();
        t_ids.sort_unstable();
        t_ids.dedup();
        let k = p_ids.len().max(t_ids.len());
        let mut best = 0;
        for perm in permutations(k) {
            let hits = pred
                .iter()
                .zip(truth)
                .filter(|(p, t)| {
                    let r = p_ids.iter().position(|x| x == *p).unwrap();
                    perm[r] < t_ids.len() && t_ids[perm[r]] == **t
                })
                .count();
            best = best.max(hits);
        }
        best as f64 / pred.len() as f64
    }

    #[test]
    fn identity_and_swap_examples() {
        let id = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        assert_eq!(hungarian(&id).unwrap().mapping, vec![0, 1, 2]);
        let swap = vec![vec![0, 5, 0], vec![5, 0, 0], vec![0, 0, 5]];
        let a = hungarian(&swap).unwrap();
        assert_eq!(a.mapping, vec![1, 0, 2]);
        assert_eq!(a.profit, 15);
        assert!(hungarian(&[vec![1, 2]]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..200 {
            let k = 1 + trial % 7;
            let m: Vec<Vec<i64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0..50)).collect()).collect();
            let a = hungarian(&m).unwrap();
            let mut seen = a.mapping.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..k).collect::<Vec<_>>());
            assert_eq!(a.profit, brute_force(&m), "{m:?}");
        }
    }

    #[test]
    fn cluster_acc_examples() {
        assert_eq!(cluster_acc(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap(), 1.0);
        assert_eq!(cluster_acc(&[5, 3, 9, 9], &[0, 1, 2, 2]).unwrap(), 1.0);
        assert_eq!(cluster_acc(&[0, 0, 1, 1], &[1, 1, 0, 2]).unwrap(), 0.75);
        assert_eq!(brute_force_acc(&[0, 0, 1, 1], &[1, 1, 0, 2]), 0.75);
        assert!(cluster_acc(&[], &[]).is_err());
        assert!(cluster_acc(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn cluster_acc_matches_injection_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(1..25);
            let kp = rng.random_range(1..6);
            let kt = rng.random_range(1..6);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
            let truth: Vec<usize> = (0..n).map(|_| 10 + rng.random_range(0..kt)).collect();
            assert_eq!(cluster_acc(&pred, &truth).unwrap(), brute_force_acc(&pred, &truth));
        }
    }

    proptest! {
        #[test]
        fn cluster_acc_invariances(seed in 0u64..100_000, n in 1usize..40, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let acc = cluster_acc(&pred, &truth).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            let mut relabel: Vec<usize> = (0..k).collect();
            relabel.shuffle(&mut rng);
            let pred2: Vec<usize> = pred.iter().map(|&p| relabel[p] + 7).collect();
            relabel.shuffle(&mut rng);
            let truth2: Vec<usize> = truth.iter().map(|&t| relabel[t] * 3).collect();
            prop_assert_eq!(acc, cluster_acc(&pred2, &truth).unwrap());
            prop_assert_eq!(acc, cluster_acc(&pred, &truth2).unwrap());
            let constant = vec![0; n];
            let max_freq = (0..k).map(|c| truth.iter().filter(|&&t| t == c).count()).max().unwrap();
            prop_assert!(cluster_acc(&constant, &truth).unwrap() >= max_freq as f64 / n as f64);
        }
    }

    #[test]
    fn novel_prediction_in_known_block_is_an_error() {
        // Two known classes (0, 1), two novel classes (2, 3).
        // Known samples: truth [0, 1], predicted [0, 1].
        // Novel samples: truth [2, 2, 3, 3], predicted [3, 3, 0, 0]; the last two
        // land in the known block and may not be matched to class 3, so the
        // best injection only recovers the first two.
        let pred = [0, 1, 3, 3, 0, 0];
        let truth = [0, 1, 2, 2, 3, 3];
        let novel = [false, false, true, true, true, true];
        let (k, n, all, conf) = score_task_agnostic(&pred, &truth, &novel, 2, 4, 4).unwrap();
        assert_eq!(k, 1.0);
        assert_eq!(n, 0.5);
        assert!((all - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(conf[3][0], 2);
        assert_eq!(cluster_acc(&pred[2..], &truth[2..]).unwrap(), 1.0);
    }

    #[test]
    fn empty_population_is_an_error() {
        assert!(score_task_agnostic(&[0], &[0], &[false], 1, 2, 2).is_err());
        assert!(score_task_agnostic(&[1], &[1], &[true], 1, 2, 2).is_err());
    }
}
