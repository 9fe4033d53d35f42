use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{softmax_row, Tensor};

const MAX_REJECTION_TRIES: usize = 10_000;
const TIE_BREAK_SCALE: f64 = 1e-9;

/// Where a novel class center is placed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NovelPlacement {
    /// `lambda * center[a] + (1 - lambda) * center[b]` plus jitter.
    Affine { a: usize, b: usize, lambda: f64 },
    /// Far from every known center.
    Isolated,
}

impl NovelPlacement {
    fn to_token(self) -> String {
        match self {
            NovelPlacement::Affine { a, b, lambda } => format!("{a}-{b}@{lambda}"),
            NovelPlacement::Isolated => "iso".into(),
        }
    }

    fn parse(token: &str) -> Result<Self> {
        let token = token.trim();
        if token == "iso" || token == "isolated" {
            return Ok(NovelPlacement::Isolated);
        }
        let bad = || Error::Config(format!("invalid affinity entry {token:?} (expected a-b@lambda or iso)"));
        let (pair, lambda) = token.split_once('@').ok_or_else(bad)?;
        let (a, b) = pair.split_once('-').ok_or_else(bad)?;
        Ok(NovelPlacement::Affine {
            a: a.trim().parse().map_err(|_| bad())?,
            b: b.trim().parse().map_err(|_| bad())?,
            lambda: lambda.trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub n_known: usize,
    pub n_novel: usize,
    /// Training samples per class.
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub noise_sigma: f64,
    /// Radius of the sphere carrying the known centers.
    pub center_scale: f64,
    /// Standard deviation of the offset added to every novel center.
    pub jitter: f64,
    /// Ratio between the largest and smallest novel training class; 1 keeps
    /// novel classes balanced.
    pub novel_imbalance: f64,
    pub affinity_plan: Vec<NovelPlacement>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            n_known: 10,
            n_novel: 5,
            samples_per_class: 200,
            test_samples_per_class: 100,
            noise_sigma: 0.3,
            center_scale: 3.0,
            jitter: 0.05,
            novel_imbalance: 1.0,
            affinity_plan: default_plan(10, 5),
            seed: 0,
        }
    }
}

/// Keys accepted in spec files.
pub const SPEC_KEYS: &[&str] = &[
    "dim",
    "known",
    "novel",
    "samples_per_class",
    "test_samples_per_class",
    "noise_sigma",
    "center_scale",
    "jitter",
    "novel_imbalance",
    "affinity",
    "seed",
];

/// Roughly three in five novel classes sit between a pair of known
/// classes, the rest are isolated. Pairs are disjoint while possible.
pub fn default_plan(n_known: usize, n_novel: usize) -> Vec<NovelPlacement> {
    let n_iso = n_novel * 2 / 5;
    let mut pairs = Vec::new();
    for offset in 0..2 {
        let mut a = offset;
        while a + 1 < n_known {
            pairs.push((a, a + 1));
            a += 2;
        }
    }
    for a in 0..n_known {
        for b in a + 2..n_known {
            pairs.push((a, b));
        }
    }
    let mut plan: Vec<NovelPlacement> = pairs
        .into_iter()
        .take(n_novel - n_iso)
        .map(|(a, b)| NovelPlacement::Affine { a, b, lambda: 0.5 })
        .collect();
    plan.resize(n_novel, NovelPlacement::Isolated);
    plan
}

impl SyntheticSpec {
    /// Parses a `key=value` spec file on top of the defaults. An absent
    /// `affinity` key gets [`default_plan`] for the resulting class counts.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let mut explicit_plan = None;
        let mut unknown = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                detail: format!("expected key=value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let at = |e: Error| Error::Parse { line: n + 1, detail: e.to_string() };
            match k {
                "affinity" => {
                    explicit_plan = Some(
                        v.split(',')
                            .filter(|s| !s.trim().is_empty())
                            .map(NovelPlacement::parse)
                            .collect::<Result<Vec<_>>>()
                            .map_err(at)?,
                    )
                }
                _ if SPEC_KEYS.contains(&k) => spec.set(k, v).map_err(at)?,
                _ => unknown.push(k.to_string()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown spec keys: {}", unknown.join(", "))));
        }
        spec.affinity_plan = explicit_plan.unwrap_or_else(|| default_plan(spec.n_known, spec.n_novel));
        spec.validate()?;
        Ok(spec)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "dim" => self.dim = num(key, value)?,
            "known" => self.n_known = num(key, value)?,
            "novel" => self.n_novel = num(key, value)?,
            "samples_per_class" => self.samples_per_class = num(key, value)?,
            "test_samples_per_class" => self.test_samples_per_class = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "center_scale" => self.center_scale = num(key, value)?,
            "jitter" => self.jitter = num(key, value)?,
            "novel_imbalance" => self.novel_imbalance = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown spec key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "known={}", self.n_known);
        let _ = writeln!(s, "novel={}", self.n_novel);
        let _ = writeln!(s, "samples_per_class={}", self.samples_per_class);
        let _ = writeln!(s, "test_samples_per_class={}", self.test_samples_per_class);
        let _ = writeln!(s, "noise_sigma={}", self.noise_sigma);
        let _ = writeln!(s, "center_scale={}", self.center_scale);
        let _ = writeln!(s, "jitter={}", self.jitter);
        let _ = writeln!(s, "novel_imbalance={}", self.novel_imbalance);
        let plan: Vec<String> = self.affinity_plan.iter().map(|p| p.to_token()).collect();
        let _ = writeln!(s, "affinity={}", plan.join(","));
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        if self.n_known < 2 {
            return Err(Error::Config("need at least 2 known classes".into()));
        }
        if self.n_novel < 1 {
            return Err(Error::Config("need at least 1 novel class".into()));
        }
        if self.samples_per_class == 0 || self.test_samples_per_class == 0 {
            return Err(Error::Config("samples per class must be positive".into()));
        }
        let reals = [self.noise_sigma, self.center_scale, self.jitter];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) || self.center_scale == 0.0 {
            return Err(Error::Config("noise_sigma, jitter must be >= 0 and center_scale > 0".into()));
        }
        if !(self.novel_imbalance >= 1.0 && self.novel_imbalance.is_finite()) {
            return Err(Error::Config("novel_imbalance must be >= 1".into()));
        }
        if self.affinity_plan.len() != self.n_novel {
            return Err(Error::Config(format!(
                "affinity plan has {} entries for {} novel classes",
                self.affinity_plan.len(),
                self.n_novel
            )));
        }
        for p in &self.affinity_plan {
            if let NovelPlacement::Affine { a, b, lambda } = *p {
                if a >= self.n_known || b >= self.n_known || a == b {
                    return Err(Error::Config(format!("invalid known pair {a}-{b}")));
                }
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(Error::Config(format!("mix weight {lambda} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    fn novel_train_count(&self, m: usize) -> usize {
        if self.n_novel == 1 || self.novel_imbalance == 1.0 {
            return self.samples_per_class;
        }
        let frac = m as f64 / (self.n_novel - 1) as f64;
        ((self.samples_per_class as f64) * self.novel_imbalance.powf(-frac)).round().max(1.0) as usize
    }
}

/// Ground-truth similarity of each novel class to each known class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationOracle {
    /// `C^u x C^l`, each row a softmax of negative center distances.
    pub affinity: Vec<Vec<f64>>,
    pub known_centers: Vec<Vec<f64>>,
    pub novel_centers: Vec<Vec<f64>>,
}

impl RelationOracle {
    pub fn affinity_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.affinity).expect("rectangular affinity")
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn orthonormal_frame<R: Rng + ?Sized>(rng: &mut R, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v = gaussian_vec(rng, dim);
        for e in &frame {
            let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(e).for_each(|(x, y)| *x -= dot * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            frame.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    frame
}

fn sphere_point<R: Rng + ?Sized>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| radius * x / n).collect();
        }
    }
}

fn place_separated<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    radius: f64,
    min_sep: f64,
    existing: &[Vec<f64>],
    what: &str,
) -> Result<Vec<f64>> {
    for _ in 0..MAX_REJECTION_TRIES {
        let c = sphere_point(rng, dim, radius);
        if existing.iter().all(|e| distance(e, &c) >= min_sep) {
            return Ok(c);
        }
    }
    Err(Error::InfeasibleSpec(format!(
        "could not place {what} at separation {min_sep} among {} centers in dimension {dim}",
        existing.len()
    )))
}

/// Draws a labeled/unlabeled Gaussian mixture and its relation oracle.
///
/// Known and isolated novel centers use mutually orthogonal directions when
/// the dimension allows it, and rejection sampling with a minimum separation
/// of `center_scale` otherwise.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, RelationOracle)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, cl, cu, r) = (spec.dim, spec.n_known, spec.n_novel, spec.center_scale);
    let n_iso = spec
        .affinity_plan
        .iter()
        .filter(|p| matches!(p, NovelPlacement::Isolated))
        .count();

    let (known, mut isolated) = if cl + n_iso <= d {
        let frame = orthonormal_frame(&mut rng, d, cl + n_iso);
        let scaled: Vec<Vec<f64>> = frame.into_iter().map(|e| e.into_iter().map(|x| r * x).collect()).collect();
        let (k, i) = scaled.split_at(cl);
        (k.to_vec(), i.to_vec())
    } else {
        let mut known = Vec::with_capacity(cl);
        for _ in 0..cl {
            let c = place_separated(&mut rng, d, r, r, &known, "a known center")?;
            known.push(c);
        }
        let mut iso = Vec::with_capacity(n_iso);
        for _ in 0..n_iso {
            let taken: Vec<Vec<f64>> = known.iter().chain(&iso).cloned().collect();
            let c = place_separated(&mut rng, d, r, r, &taken, "an isolated novel center")?;
            iso.push(c);
        }
        (known, iso)
    };
    isolated.reverse();

    let mut novel = Vec::with_capacity(cu);
    for p in &spec.affinity_plan {
        let mut c = match *p {
            NovelPlacement::Affine { a, b, lambda } => known[a]
                .iter()
                .zip(&known[b])
                .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                .collect(),
            NovelPlacement::Isolated => isolated.pop().expect("one direction per isolated class"),
        };
        for x in c.iter_mut() {
            *x += spec.jitter * rng.sample::<f64, _>(StandardNormal);
        }
        novel.push(c);
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut emit = |rng: &mut ChaCha8Rng, center: &[f64], label: usize, count: usize, split: Split| {
        for _ in 0..count {
            for &c in center {
                features.push(c + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(label);
            splits.push(split);
        }
    };
    for (k, c) in known.iter().enumerate() {
        emit(&mut rng, c, k, spec.samples_per_class, Split::LabeledKnown);
        emit(&mut rng, c, k, spec.test_samples_per_class, Split::TestKnown);
    }
    for (m, c) in novel.iter().enumerate() {
        emit(&mut rng, c, cl + m, spec.novel_train_count(m), Split::UnlabeledNovel);
        emit(&mut rng, c, cl + m, spec.test_samples_per_class, Split::TestNovel);
    }
    let n = labels.len();
    let dataset = Dataset::new(Tensor::matrix(n, d, features)?, labels, splits, cl, cu, spec.seed)?;

    let affinity = novel
        .iter()
        .map(|u| {
            let neg: Vec<f64> = known
                .iter()
                .map(|k| -(distance(u, k) + TIE_BREAK_SCALE * rng.random::<f64>()))
                .collect();
            softmax_row(&neg, 1.0)
        })
        .collect();
    let oracle = RelationOracle {
        affinity,
        known_centers: known,
        novel_centers: novel,
    };
    Ok((dataset, oracle))
}
