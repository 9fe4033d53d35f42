//! Run configuration and its flat `key=value` text form.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::transport::SinkhornConfig;

/// Weight function `g(eta)` applied to each sample's distillation term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `g = 1`: plain averaged KL.
    One,
    /// `g = eta`, differentiated.
    Eta,
    /// `g = eta` treated as a constant.
    SgEta,
    /// Batch-normalized `eta` treated as a constant.
    SgNormEta,
    /// `g = B * eta / sum(eta)`, differentiated through numerator and denominator.
    NormEta,
}

impl WeightMode {
    pub const ALL: [WeightMode; 5] = [
        WeightMode::One,
        WeightMode::Eta,
        WeightMode::SgEta,
        WeightMode::SgNormEta,
        WeightMode::NormEta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::One => "one",
            WeightMode::Eta => "eta",
            WeightMode::SgEta => "sg_eta",
            WeightMode::SgNormEta => "sg_norm_eta",
            WeightMode::NormEta => "norm_eta",
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    /// Accepts the snake-case names as well as the table notation
    /// `1`, `η`, `SG(η)`, `SG(Norm(η))`, `Norm(η)` (or `eta` for `η`).
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .to_lowercase()
            .replace('η', "eta")
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        Ok(match norm.as_str() {
            "one" | "1" => WeightMode::One,
            "eta" => WeightMode::Eta,
            "sg_eta" | "sg(eta)" => WeightMode::SgEta,
            "sg_norm_eta" | "sg(norm(eta))" => WeightMode::SgNormEta,
            "norm_eta" | "norm(eta)" => WeightMode::NormEta,
            _ => return Err(Error::Config(format!("unknown weight mode {s:?}"))),
        })
    }
}

/// Which distribution over novel classes feeds the self-labeling loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilitySource {
    /// Novel block of the joint softmax, renormalized to sum to one.
    FullSliceRenorm,
    /// Softmax over the novel-head logits alone. Algebraically the same
    /// distribution as [`ProbabilitySource::FullSliceRenorm`].
    NovelHeadOnly,
    /// Novel block of the joint softmax as is, without renormalization.
    FullSliceRaw,
}

impl ProbabilitySource {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbabilitySource::FullSliceRenorm => "full_slice_renorm",
            ProbabilitySource::NovelHeadOnly => "novel_head_only",
            ProbabilitySource::FullSliceRaw => "full_slice_raw",
        }
    }
}

impl FromStr for ProbabilitySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "full_slice_renorm" => Ok(ProbabilitySource::FullSliceRenorm),
            "novel_head_only" => Ok(ProbabilitySource::NovelHeadOnly),
            "full_slice_raw" => Ok(ProbabilitySource::FullSliceRaw),
            _ => Err(Error::Config(format!("unknown probability source {s:?}"))),
        }
    }
}

/// SGD with momentum under a warmup + cosine learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub cosine_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            warmup_epochs: 5,
            cosine_decay: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Weight of the self-labeling loss.
    pub alpha: f64,
    /// Weight of the relation distillation loss.
    pub beta: f64,
    /// Softmax temperature of the joint prediction.
    pub tau: f64,
    /// Temperature of the class-relation representations.
    pub t: f64,
    pub weight_mode: WeightMode,
    pub sinkhorn: SinkhornConfig,
    pub epochs_pretrain: usize,
    pub epochs_discover: usize,
    pub batch_size: usize,
    pub labeled_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Size of the novel head when the number of novel classes is
    /// deliberately mis-specified.
    pub novel_count_override: Option<usize>,
    pub eq3_probability_source: ProbabilitySource,
    pub encoder_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub novel_projection: bool,
    pub projection_hidden: usize,
    /// Evaluate every this many epochs (and always after the last one);
    /// 0 evaluates only after the last epoch.
    pub eval_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            tau: 0.1,
            t: 4.0,
            weight_mode: WeightMode::NormEta,
            sinkhorn: SinkhornConfig::default(),
            epochs_pretrain: 50,
            epochs_discover: 150,
            batch_size: 64,
            labeled_fraction: 0.5,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            novel_count_override: None,
            eq3_probability_source: ProbabilitySource::FullSliceRenorm,
            encoder_hidden: vec![64],
            embedding_dim: 32,
            novel_projection: true,
            projection_hidden: 32,
            eval_interval: 10,
        }
    }
}

/// Every key accepted by [`RunConfig::set`], in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "tau",
    "t",
    "weight_mode",
    "sinkhorn_epsilon",
    "sinkhorn_max_iters",
    "sinkhorn_tolerance",
    "epochs_pretrain",
    "epochs_discover",
    "batch_size",
    "labeled_fraction",
    "learning_rate",
    "momentum",
    "warmup_epochs",
    "cosine_decay",
    "seed",
    "novel_count_override",
    "eq3_probability_source",
    "encoder_hidden",
    "embedding_dim",
    "novel_projection",
    "projection_hidden",
    "eval_interval",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "t" => self.t = parse(key, value)?,
            "weight_mode" => self.weight_mode = value.parse()?,
            "sinkhorn_epsilon" => self.sinkhorn.epsilon = parse(key, value)?,
            "sinkhorn_max_iters" => self.sinkhorn.max_iters = parse(key, value)?,
            "sinkhorn_tolerance" => self.sinkhorn.tolerance = parse(key, value)?,
            "epochs_pretrain" => self.epochs_pretrain = parse(key, value)?,
            "epochs_discover" => self.epochs_discover = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "labeled_fraction" => self.labeled_fraction = parse(key, value)?,
            "learning_rate" => self.optimizer.learning_rate = parse(key, value)?,
            "momentum" => self.optimizer.momentum = parse(key, value)?,
            "warmup_epochs" => self.optimizer.warmup_epochs = parse(key, value)?,
            "cosine_decay" => self.optimizer.cosine_decay = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "novel_count_override" => {
                self.novel_count_override = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "eq3_probability_source" => self.eq3_probability_source = value.parse()?,
            "encoder_hidden" => {
                self.encoder_hidden = match value.trim() {
                    "" | "none" => Vec::new(),
                    v => v.split(',').map(|w| parse(key, w)).collect::<Result<_>>()?,
                }
            }
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "novel_projection" => self.novel_projection = parse_bool(key, value)?,
            "projection_hidden" => self.projection_hidden = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; every unknown key is reported by name.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        let mut unknown = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: n + 1,
                    detail: format!("expected key=value, got {line:?}"),
                });
            };
            if !CONFIG_KEYS.contains(&k.trim()) {
                unknown.push(k.trim().to_string());
                continue;
            }
            self.set(k, v).map_err(|e| Error::Parse {
                line: n + 1,
                detail: e.to_string(),
            })?;
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form: every key in [`CONFIG_KEYS`] order, floats in
    /// shortest round-trip notation.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("tau", self.tau.to_string());
        put("t", self.t.to_string());
        put("weight_mode", self.weight_mode.to_string());
        put("sinkhorn_epsilon", self.sinkhorn.epsilon.to_string());
        put("sinkhorn_max_iters", self.sinkhorn.max_iters.to_string());
        put("sinkhorn_tolerance", self.sinkhorn.tolerance.to_string());
        put("epochs_pretrain", self.epochs_pretrain.to_string());
        put("epochs_discover", self.epochs_discover.to_string());
        put("batch_size", self.batch_size.to_string());
        put("labeled_fraction", self.labeled_fraction.to_string());
        put("learning_rate", self.optimizer.learning_rate.to_string());
        put("momentum", self.optimizer.momentum.to_string());
        put("warmup_epochs", self.optimizer.warmup_epochs.to_string());
        put("cosine_decay", self.optimizer.cosine_decay.to_string());
        put("seed", self.seed.to_string());
        put(
            "novel_count_override",
            self.novel_count_override.map_or("none".into(), |n| n.to_string()),
        );
        put("eq3_probability_source", self.eq3_probability_source.as_str().into());
        put(
            "encoder_hidden",
            if self.encoder_hidden.is_empty() {
                "none".into()
            } else {
                self.encoder_hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            },
        );
        put("embedding_dim", self.embedding_dim.to_string());
        put("novel_projection", self.novel_projection.to_string());
        put("projection_hidden", self.projection_hidden.to_string());
        put("eval_interval", self.eval_interval.to_string());
        s
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_kv_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha >= 0.0),
            ("beta", self.beta >= 0.0),
            ("tau", self.tau > 0.0),
            ("t", self.t > 0.0),
            ("learning_rate", self.optimizer.learning_rate > 0.0),
            ("momentum", (0.0..1.0).contains(&self.optimizer.momentum)),
            (
                "labeled_fraction",
                self.labeled_fraction > 0.0 && self.labeled_fraction < 1.0,
            ),
            ("batch_size", self.batch_size >= 2),
            ("embedding_dim", self.embedding_dim >= 1),
            ("projection_hidden", self.projection_hidden >= 1),
            ("novel_count_override", self.novel_count_override != Some(0)),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::Config(format!("{name} is out of range")));
            }
        }
        let floats = [self.alpha, self.beta, self.tau, self.t, self.labeled_fraction];
        if floats.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite hyperparameter".into()));
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::Config("encoder_hidden widths must be positive".into()));
        }
        self.sinkhorn.validate().map_err(|e| Error::Config(e.to_string()))
    }
}
