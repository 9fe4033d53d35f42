//! Shared MLP encoder with two cosine-classifier heads.
//!
//! The known head scores embeddings against the known-class prototypes and
//! the novel head against the novel-class prototypes (optionally after a
//! small projection MLP). Both outputs are concatenated and pushed through a
//! single softmax at temperature `tau`, so every prediction is a distribution
//! over known and novel classes together.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{softmax_row, Tape, Tensor, Var};

/// Fully connected layer computing `x · weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Tensor,
    /// `1 x out`
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::matrix(inputs, outputs, w).expect("linear weight"),
            bias: Tensor::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

/// Layer widths and head sizes of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the tanh hidden layers between input and embedding.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_known: usize,
    pub num_novel: usize,
    /// Hidden width of the novel-head projection MLP; `None` disables it.
    pub projection_hidden: Option<usize>,
}

impl Architecture {
    /// The desk-scale default: `input -> 64 -> 32` with a width-32 projection.
    pub fn desk_scale(input_dim: usize, num_known: usize, num_novel: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64],
            embedding_dim: 32,
            num_known,
            num_novel,
            projection_hidden: Some(32),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Linear>,
    /// `C^l x d_emb` prototypes of the known head.
    pub known_head: Tensor,
    /// `C^u x d_emb` prototypes of the novel head.
    pub novel_head: Tensor,
    /// Two layers `d_emb -> hidden -> d_emb` applied before the novel head.
    pub novel_projection: Option<Vec<Linear>>,
}

fn unit_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(row.into_iter().map(|v| v / norm));
    }
    Tensor::matrix(rows, cols, out).expect("prototype rows")
}

impl ModelParams {
    /// Seeded initialization: Glorot-uniform layers with zero biases and
    /// unit-norm Gaussian prototype rows. All tensors are trainable.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.embedding_dim == 0 || arch.num_known == 0 || arch.num_novel == 0 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {arch:?}")));
        }
        let mut widths = vec![arch.input_dim];
        widths.extend(&arch.hidden);
        widths.push(arch.embedding_dim);
        let encoder = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        let known_head = unit_rows(arch.num_known, arch.embedding_dim, rng);
        let novel_projection = arch.projection_hidden.map(|h| {
            vec![
                Linear::init(arch.embedding_dim, h, rng),
                Linear::init(h, arch.embedding_dim, rng),
            ]
        });
        let novel_head = unit_rows(arch.num_novel, arch.embedding_dim, rng);
        let params = Self {
            encoder,
            known_head,
            novel_head,
            novel_projection,
        };
        params.validate()?;
        Ok(params.trainable())
    }

    /// Checks that layer dimensions chain and that the heads match the
    /// embedding width.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.encoder.is_empty() {
            return bad("encoder has no layers".into());
        }
        for (i, l) in self.encoder.iter().enumerate() {
            if l.bias.shape() != [1, l.outputs()] {
                return bad(format!("encoder layer {i} bias shape {:?}", l.bias.shape()));
            }
        }
        for (i, w) in self.encoder.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                return bad(format!("encoder layers {i} and {} do not chain", i + 1));
            }
        }
        let d = self.embedding_dim();
        if self.known_head.cols() != d || self.novel_head.cols() != d {
            return bad("head width differs from embedding width".into());
        }
        if let Some(p) = &self.novel_projection {
            if p.len() != 2 || p[0].inputs() != d || p[0].outputs() != p[1].inputs() || p[1].outputs() != d {
                return bad("novel projection does not map the embedding onto itself".into());
            }
            for l in p {
                if l.bias.shape() != [1, l.outputs()] {
                    return bad("projection bias shape".into());
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].inputs()
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.last().map_or(0, Linear::outputs)
    }

    pub fn num_known(&self) -> usize {
        self.known_head.rows()
    }

    pub fn num_novel(&self) -> usize {
        self.novel_head.rows()
    }

    /// All parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.known_head);
        if let Some(p) = &mut self.novel_projection {
            for l in p {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.novel_head);
        out
    }

    /// Parameter tensors with their checkpoint names, in [`Self::tensors`] order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        out.push(("known_head".to_string(), &self.known_head));
        if let Some(p) = &self.novel_projection {
            for (i, l) in p.iter().enumerate() {
                out.push((format!("projection.{i}.weight"), &l.weight));
                out.push((format!("projection.{i}.bias"), &l.bias));
            }
        }
        out.push(("novel_head".to_string(), &self.novel_head));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn with_grad_flag(mut self, flag: bool) -> Self {
        for t in self.tensors_mut() {
            *t = std::mem::replace(t, Tensor::scalar(0.0)).with_requires_grad(flag);
        }
        self
    }

    pub fn trainable(self) -> Self {
        self.with_grad_flag(true)
    }

    /// Frozen deep copy: identical values, no gradient participation.
    pub fn snapshot(&self) -> ModelParams {
        self.clone().with_grad_flag(false)
    }

    /// Replaces the novel head with `count` fresh unit-norm prototypes.
    pub fn reset_novel_head<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Result<()> {
        if count == 0 {
            return Err(Error::InvalidArgument("novel head needs at least one prototype".into()));
        }
        let trainable = self.novel_head.requires_grad();
        self.novel_head = unit_rows(count, self.embedding_dim(), rng).with_requires_grad(trainable);
        Ok(())
    }

    /// Records every parameter on `tape`. Trainable tensors become gradient
    /// leaves, frozen ones constants.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let bind_layers = |tape: &mut Tape, layers: &[Linear]| -> Result<Vec<(Var, Var)>> {
            layers
                .iter()
                .map(|l| Ok((tape.leaf(&l.weight)?, tape.leaf(&l.bias)?)))
                .collect()
        };
        let encoder = bind_layers(tape, &self.encoder)?;
        let known_head = tape.leaf(&self.known_head)?;
        let projection = match &self.novel_projection {
            Some(p) => Some(bind_layers(tape, p)?),
            None => None,
        };
        let novel_head = tape.leaf(&self.novel_head)?;
        Ok(BoundModel {
            encoder,
            known_head,
            projection,
            novel_head,
        })
    }

    /// Copies gradients from a backward pass into the `grad` slot of every
    /// trainable tensor; tensors the loss does not reach get zeros.
    pub fn store_gradients(&mut self, bound: &BoundModel, grads: &crate::numerics::Gradients) -> Result<()> {
        let vars = bound.vars();
        for (t, v) in self.tensors_mut().into_iter().zip(vars) {
            if !t.requires_grad() {
                continue;
            }
            let g = grads.values(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
            t.set_grad(g)?;
        }
        Ok(())
    }

    /// Forward pass on plain values, outside of any optimization step.
    pub fn forward_values(&self, x: &Tensor, tau: f64) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let frozen = self.snapshot();
        let bound = frozen.bind(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let out = bound.forward(&mut tape, xv, tau)?;
        Ok(ForwardOutput {
            embedding: tape.value(out.embedding).clone(),
            known_logits: tape.value(out.known_logits).clone(),
            novel_logits: tape.value(out.novel_logits).clone(),
            full_probs: tape.value(out.full_probs).clone(),
        })
    }
}

/// Tape handles for one model's parameters.
#[derive(Clone, Debug)]
pub struct BoundModel {
    encoder: Vec<(Var, Var)>,
    known_head: Var,
    projection: Option<Vec<(Var, Var)>>,
    novel_head: Var,
}

/// Tape handles produced by [`BoundModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub embedding: Var,
    pub known_logits: Var,
    pub novel_logits: Var,
    pub logits: Var,
    pub full_probs: Var,
}

/// Values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub embedding: Tensor,
    pub known_logits: Tensor,
    pub novel_logits: Tensor,
    pub full_probs: Tensor,
}

fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

fn cosine_logits(tape: &mut Tape, unit_embedding: Var, prototypes: Var) -> Result<Var> {
    let p = tape.l2_normalize_rows(prototypes)?;
    let pt = tape.transpose(p)?;
    tape.matmul(unit_embedding, pt)
}

impl BoundModel {
    /// Parameter handles in [`ModelParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.encoder {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.known_head);
        if let Some(p) = &self.projection {
            for (w, b) in p {
                out.push(*w);
                out.push(*b);
            }
        }
        out.push(self.novel_head);
        out
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, tau: f64) -> Result<ForwardVars> {
        let in_dim = tape.value(self.encoder[0].0).rows();
        if tape.value(x).cols() != in_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![in_dim],
            });
        }
        let mut h = x;
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = linear(tape, h, *layer)?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        let embedding = tape.l2_normalize_rows(h)?;
        let known_logits = cosine_logits(tape, embedding, self.known_head)?;
        let novel_input = match &self.projection {
            Some(p) => {
                let z = linear(tape, embedding, p[0])?;
                let z = tape.tanh(z)?;
                let z = linear(tape, z, p[1])?;
                tape.l2_normalize_rows(z)?
            }
            None => embedding,
        };
        let novel_logits = cosine_logits(tape, novel_input, self.novel_head)?;
        let logits = tape.concat_cols(known_logits, novel_logits)?;
        let full_probs = tape.softmax(logits, tau)?;
        Ok(ForwardVars {
            embedding,
            known_logits,
            novel_logits,
            logits,
            full_probs,
        })
    }
}

fn check_relation_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            op: "relation",
            detail: format!("relation temperature must be positive, got {t}"),
        })
    }
}

/// Class-relation representation of the frozen teacher:
/// `softmax(known_logits / t)` per row. Never recorded on a tape.
pub fn teacher_relation(teacher: &ModelParams, x: &Tensor, t: f64) -> Result<Tensor> {
    check_relation_temperature(t)?;
    let out = teacher.forward_values(x, 1.0)?;
    let logits = &out.known_logits;
    let mut vals = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        vals.extend(softmax_row(logits.row(i), t));
    }
    Tensor::matrix(logits.rows(), logits.cols(), vals)
}

/// Class-relation representation of the student, on the tape so that the
/// distillation loss differentiates through it.
pub fn student_relation(tape: &mut Tape, known_logits: Var, t: f64) -> Result<Var> {
    check_relation_temperature(t)?;
    tape.softmax(known_logits, t)
}
