//! Labeled/unlabeled datasets, batching and the synthetic mixture generator.

mod io;
mod synthetic;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use synthetic::{default_plan, generate, NovelPlacement, RelationOracle, SyntheticSpec, SPEC_KEYS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    LabeledKnown,
    UnlabeledNovel,
    TestKnown,
    TestNovel,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::LabeledKnown,
        Split::UnlabeledNovel,
        Split::TestKnown,
        Split::TestNovel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::LabeledKnown => "LABELED_KNOWN",
            Split::UnlabeledNovel => "UNLABELED_NOVEL",
            Split::TestKnown => "TEST_KNOWN",
            Split::TestNovel => "TEST_NOVEL",
        }
    }

    pub fn is_train(self) -> bool {
        matches!(self, Split::LabeledKnown | Split::UnlabeledNovel)
    }

    pub fn is_novel(self) -> bool {
        matches!(self, Split::UnlabeledNovel | Split::TestNovel)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split flag {s:?}")))
    }
}

/// An immutable dataset.
///
/// Labels of `UNLABELED_NOVEL` samples are only reachable through
/// [`Dataset::label`], which counts every such read. Training code uses
/// [`Dataset::training_label`], which hides them.
#[derive(Debug)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_known: usize,
    num_novel: usize,
    seed: u64,
    hidden_label_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            features: self.features.clone(),
            labels: self.labels.clone(),
            splits: self.splits.clone(),
            num_known: self.num_known,
            num_novel: self.num_novel,
            seed: self.seed,
            hidden_label_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.num_known == other.num_known
            && self.num_novel == other.num_novel
            && self.seed == other.seed
            && self.splits == other.splits
            && self.labels == other.labels
            && self.features.shape() == other.features.shape()
            && self
                .features
                .values()
                .iter()
                .zip(other.features.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        splits: Vec<Split>,
        num_known: usize,
        num_novel: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = features.rows();
        if features.shape().len() != 2 {
            return Err(Error::InvalidArgument("features must be a matrix".into()));
        }
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if labels.len() != n || splits.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{n} feature rows but {} labels and {} split flags",
                labels.len(),
                splits.len()
            )));
        }
        if num_known == 0 || num_novel == 0 {
            return Err(Error::InvalidArgument("need at least one known and one novel class".into()));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite { op: "dataset features" });
        }
        for (i, (&y, &sp)) in labels.iter().zip(&splits).enumerate() {
            let ok = if sp.is_novel() {
                (num_known..num_known + num_novel).contains(&y)
            } else {
                y < num_known
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: label {y} is not valid for split {sp}"
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            splits,
            num_known,
            num_novel,
            seed,
            hidden_label_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_known(&self) -> usize {
        self.num_known
    }

    pub fn num_novel(&self) -> usize {
        self.num_novel
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// The label as visible during training: `None` unless the sample is
    /// `LABELED_KNOWN`.
    pub fn training_label(&self, i: usize) -> Option<usize> {
        (self.splits[i] == Split::LabeledKnown).then(|| self.labels[i])
    }

    /// Ground-truth label for evaluation. Reads on `UNLABELED_NOVEL`
    /// samples are counted.
    pub fn label(&self, i: usize) -> usize {
        if self.splits[i] == Split::UnlabeledNovel {
            self.hidden_label_reads.fetch_add(1, Ordering::Relaxed);
        }
        self.labels[i]
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    /// Number of ground-truth reads on `UNLABELED_NOVEL` samples so far.
    pub fn hidden_label_reads(&self) -> usize {
        self.hidden_label_reads.load(Ordering::Relaxed)
    }

    pub fn reset_hidden_label_reads(&self) {
        self.hidden_label_reads.store(0, Ordering::Relaxed);
    }

    /// Rows of `features` for the given samples.
    pub fn features_of(&self, indices: &[usize]) -> Tensor {
        self.features.select_rows(indices)
    }
}

/// A training mini-batch. Labels are `None` for unlabeled samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn from_indices(dataset: &Dataset, indices: Vec<usize>) -> Batch {
        let labels = indices.iter().map(|&i| dataset.training_label(i)).collect();
        Batch {
            features: dataset.features_of(&indices),
            indices,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Positions (within the batch) of labeled samples.
    pub fn labeled_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.labels[r].is_some()).collect()
    }

    pub fn unlabeled_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.labels[r].is_none()).collect()
    }

    pub fn known_labels(&self) -> Vec<usize> {
        self.labels.iter().flatten().copied().collect()
    }
}

/// One epoch of joint batches over `LABELED_KNOWN` and `UNLABELED_NOVEL`.
///
/// Each full batch takes `round(B * labeled_fraction)` labeled samples and
/// fills the rest with unlabeled ones. Once a pool runs dry the other pool
/// fills the remaining slots, so every training sample appears exactly once
/// and the final ragged batch is kept.
pub fn make_batches<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    labeled_fraction: f64,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::InvalidArgument(format!(
            "labeled_fraction {labeled_fraction} outside [0, 1]"
        )));
    }
    let mut labeled = dataset.indices(Split::LabeledKnown);
    let mut unlabeled = dataset.indices(Split::UnlabeledNovel);
    check_batch_size(batch_size, labeled.len() + unlabeled.len())?;
    labeled.shuffle(rng);
    unlabeled.shuffle(rng);

    let want_labeled = (batch_size as f64 * labeled_fraction).round() as usize;
    let (mut li, mut ui) = (0, 0);
    let mut batches = Vec::new();
    while li < labeled.len() || ui < unlabeled.len() {
        let rem_l = labeled.len() - li;
        let rem_u = unlabeled.len() - ui;
        let mut take_l = want_labeled.min(rem_l);
        let take_u = (batch_size - take_l).min(rem_u);
        take_l = (batch_size - take_u).min(rem_l);
        let mut idx = Vec::with_capacity(take_l + take_u);
        idx.extend_from_slice(&labeled[li..li + take_l]);
        idx.extend_from_slice(&unlabeled[ui..ui + take_u]);
        li += take_l;
        ui += take_u;
        batches.push(Batch::from_indices(dataset, idx));
    }
    Ok(batches)
}

/// One epoch of batches over `LABELED_KNOWN` only.
pub fn make_supervised_batches<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    let mut labeled = dataset.indices(Split::LabeledKnown);
    if labeled.is_empty() {
        return Err(Error::Empty("LABELED_KNOWN split"));
    }
    check_batch_size(batch_size, labeled.len())?;
    labeled.shuffle(rng);
    Ok(labeled
        .chunks(batch_size)
        .map(|c| Batch::from_indices(dataset, c.to_vec()))
        .collect())
}

fn check_batch_size(batch_size: usize, available: usize) -> Result<()> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} < 2")));
    }
    if batch_size > available {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} exceeds the {available} available training samples"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n_lab: usize, n_unl: usize) -> Dataset {
        let n = n_lab + n_unl;
        let features = Tensor::matrix(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap();
        let labels = (0..n).map(|i| if i < n_lab { i % 2 } else { 2 }).collect();
        let splits = (0..n)
            .map(|i| if i < n_lab { Split::LabeledKnown } else { Split::UnlabeledNovel })
            .collect();
        Dataset::new(features, labels, splits, 2, 1, 0).unwrap()
    }

    #[test]
    fn half_and_half_batches() {
        let d = toy(100, 100);
        let batches = make_batches(&d, 64, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for b in &batches[..3] {
            assert_eq!(b.labeled_rows().len(), 32);
            assert_eq!(b.unlabeled_rows().len(), 32);
        }
        assert_eq!(batches.len(), 4);
        assert_eq!(batches[3].len(), 200 - 192);
    }

    #[test]
    fn epoch_covers_dataset_once() {
        let d = toy(70, 130);
        let batches = make_batches(&d, 64, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == 64));
    }

    #[test]
    fn seeded_shuffling_is_reproducible() {
        let d = toy(50, 50);
        let a = make_batches(&d, 16, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_batches(&d, 16, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = make_batches(&d, 16, 0.5, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batch_size_errors() {
        let d = toy(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_batches(&d, 1, 0.5, &mut rng).is_err());
        assert!(make_batches(&d, 11, 0.5, &mut rng).is_err());
        assert!(make_batches(&d, 10, 0.5, &mut rng).is_ok());
        assert!(make_supervised_batches(&d, 6, &mut rng).is_err());
    }

    #[test]
    fn batching_hides_unlabeled_labels() {
        let d = toy(20, 20);
        let batches = make_batches(&d, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.hidden_label_reads(), 0);
        for b in &batches {
            for r in b.unlabeled_rows() {
                assert_eq!(b.labels[r], None);
            }
        }
        d.label(25);
        d.label(3);
        assert_eq!(d.hidden_label_reads(), 1);
    }

    #[test]
    fn rejects_labels_outside_their_split() {
        let f = Tensor::zeros(2, 1);
        let bad = Dataset::new(f.clone(), vec![0, 0], vec![Split::LabeledKnown, Split::TestNovel], 1, 1, 0);
        assert!(bad.is_err());
        let ok = Dataset::new(f, vec![0, 1], vec![Split::LabeledKnown, Split::TestNovel], 1, 1, 0);
        assert!(ok.is_ok());
    }
}
