//! Averaged class-relation representations and their rank agreement with
//! the ground-truth oracle.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RelationOracle, Split};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{softmax_row, Tensor};

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "spearman",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two values".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "spearman" });
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Domain {
            op: "spearman",
            detail: "one of the inputs is constant".into(),
        });
    }
    Ok(cov / (va * vb).sqrt())
}

/// `C^u x C^l`: for each ground-truth novel class, the mean of
/// `softmax(known_logits / t)` over its `UNLABELED_NOVEL` samples.
pub fn averaged_relation(model: &ModelParams, dataset: &Dataset, t: f64) -> Result<Tensor> {
    if model.input_dim() != dataset.dim() || model.num_known() != dataset.num_known() {
        return Err(Error::ShapeMismatch {
            op: "averaged_relation",
            lhs: vec![model.input_dim(), model.num_known()],
            rhs: vec![dataset.dim(), dataset.num_known()],
        });
    }
    if !(t > 0.0) {
        return Err(Error::Domain {
            op: "averaged_relation",
            detail: format!("temperature must be positive, got {t}"),
        });
    }
    let idx = dataset.indices(Split::UnlabeledNovel);
    let labels = dataset.labels_of(&idx);
    let out = model.forward_values(&dataset.features_of(&idx), 1.0)?;
    let (cl, cu) = (dataset.num_known(), dataset.num_novel());
    let mut sums = vec![0.0; cu * cl];
    let mut counts = vec![0usize; cu];
    for (r, &y) in labels.iter().enumerate() {
        let m = y - cl;
        counts[m] += 1;
        for (k, p) in softmax_row(out.known_logits.row(r), t).into_iter().enumerate() {
            sums[m * cl + k] += p;
        }
    }
    for (m, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::Empty("novel class without unlabeled samples"));
        }
        sums[m * cl..(m + 1) * cl].iter_mut().for_each(|v| *v /= c as f64);
    }
    Tensor::matrix(cu, cl, sums)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRelation {
    pub class: usize,
    pub teacher: Vec<f64>,
    pub student: Vec<f64>,
    pub oracle: Vec<f64>,
    pub teacher_spearman: f64,
    pub student_spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationReport {
    pub t: f64,
    pub classes: Vec<ClassRelation>,
    pub mean_teacher_spearman: f64,
    pub mean_student_spearman: f64,
}

pub fn relation_report(
    student: &ModelParams,
    teacher: &ModelParams,
    dataset: &Dataset,
    oracle: &RelationOracle,
    t: f64,
) -> Result<RelationReport> {
    if oracle.affinity.len() != dataset.num_novel()
        || oracle.affinity.iter().any(|r| r.len() != dataset.num_known())
    {
        return Err(Error::ShapeMismatch {
            op: "relation_report",
            lhs: vec![oracle.affinity.len(), oracle.affinity.first().map_or(0, Vec::len)],
            rhs: vec![dataset.num_novel(), dataset.num_known()],
        });
    }
    let ps = averaged_relation(student, dataset, t)?;
    let pt = averaged_relation(teacher, dataset, t)?;
    let mut classes = Vec::with_capacity(dataset.num_novel());
    for m in 0..dataset.num_novel() {
        let oracle_row = oracle.affinity[m].clone();
        classes.push(ClassRelation {
            class: dataset.num_known() + m,
            teacher_spearman: spearman(pt.row(m), &oracle_row)?,
            student_spearman: spearman(ps.row(m), &oracle_row)?,
            teacher: pt.row(m).to_vec(),
            student: ps.row(m).to_vec(),
            oracle: oracle_row,
        });
    }
    let n = classes.len() as f64;
    Ok(RelationReport {
        t,
        mean_teacher_spearman: classes.iter().map(|c| c.teacher_spearman).sum::<f64>() / n,
        mean_student_spearman: classes.iter().map(|c| c.student_spearman).sum::<f64>() / n,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::model::Architecture;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 0.0]), vec![3.5, 2.0, 3.5, 1.0]);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // Classic formula 1 - 6 sum d^2 / (n (n^2 - 1)) with d = (0, 1, -1, 0).
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - (1.0 - 6.0 * 2.0 / 60.0)).abs() < 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn spearman_is_bounded_and_monotone_invariant(xs in prop::collection::vec(-5.0f64..5.0, 3..12)) {
            let ys: Vec<f64> = xs.iter().map(|x| x.exp() * 2.0 + 1.0).collect();
            if let Ok(r) = spearman(&xs, &ys) {
                prop_assert!((r - 1.0).abs() < 1e-12);
            }
            let zs: Vec<f64> = xs.iter().rev().cloned().collect();
            if let Ok(r) = spearman(&xs, &zs) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            }
        }
    }

    #[test]
    fn identical_models_give_identical_rows() {
        let spec = SyntheticSpec {
            samples_per_class: 10,
            test_samples_per_class: 2,
            ..SyntheticSpec::default()
        };
        let (d, o) = generate(&spec).unwrap();
        let arch = Architecture::desk_scale(d.dim(), d.num_known(), d.num_novel());
        let m = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rep = relation_report(&m, &m.snapshot(), &d, &o, 4.0).unwrap();
        for c in &rep.classes {
            assert_eq!(c.teacher, c.student);
            assert_eq!(c.teacher_spearman, c.student_spearman);
            assert!(c.student_spearman.is_finite());
            assert!((spearman(&c.oracle, &c.oracle).unwrap() - 1.0).abs() < 1e-15);
            assert!((c.student.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let other = Architecture::desk_scale(d.dim() + 1, d.num_known(), d.num_novel());
        let bad = ModelParams::init(&other, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(relation_report(&bad, &m, &d, &o, 4.0).is_err());
    }
}
