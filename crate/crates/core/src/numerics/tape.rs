use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    MatMul(usize, usize),
    Transpose(usize),
    Binary(BinaryKind, usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    ClampMin(usize, f64),
    SumAll(usize),
    RowSum(usize),
    ColSum(usize),
    RowMax(usize, Vec<usize>),
    Softmax(usize, f64),
    LogSoftmax(usize, f64),
    L2NormalizeRows(usize, Vec<f64>),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's parents have
/// smaller indices and a single reverse sweep visits each node once.
/// A tape is built fresh for every optimization step and is not meant to be
/// shared between threads.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Reverse-mode adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not require gradients or the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.adjoints[var.index].as_ref().map(|g| {
            Tensor::new(self.shapes[var.index].clone(), g.clone()).expect("adjoint shape")
        })
    }

    pub fn values(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.adjoints[var.index].as_deref()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn broadcast_index(rhs: (usize, usize), i: usize, j: usize) -> usize {
    let (rr, rc) = rhs;
    let ri = if rr == 1 { 0 } else { i };
    let rj = if rc == 1 { 0 } else { j };
    ri * rc + rj
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::InvalidArgument(
                "variable belongs to a different tape".into(),
            ));
        }
        Ok(&self.nodes[v.index])
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records a leaf; it participates in differentiation iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let rg = t.requires_grad();
        self.push("leaf", t.clone(), Op::Leaf, rg)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Forward identity whose backward adjoint is zero.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.node(x)?.value.clone();
        self.push("stop_gradient", value, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (m, k) = na.value.dims();
        let (k2, n) = nb.value.dims();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: na.value.shape().to_vec(),
                rhs: nb.value.shape().to_vec(),
            });
        }
        let av = na.value.values();
        let bv = nb.value.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = na.requires_grad || nb.requires_grad;
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul(a.index, b.index), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let (value, rg) = (n.value.transpose(), n.requires_grad);
        self.push("transpose", value, Op::Transpose(x.index), rg)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (r, c) = na.value.dims();
        let (rr, rc) = nb.value.dims();
        if !((rr == r || rr == 1) && (rc == c || rc == 1)) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: na.value.shape().to_vec(),
                rhs: nb.value.shape().to_vec(),
            });
        }
        let av = na.value.values();
        let bv = nb.value.values();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = av[i * c + j];
                let y = bv[broadcast_index((rr, rc), i, j)];
                out.push(match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => {
                        if y == 0.0 {
                            return Err(Error::Domain {
                                op: "div",
                                detail: "division by zero".into(),
                            });
                        }
                        x / y
                    }
                });
            }
        }
        let rg = na.requires_grad || nb.requires_grad;
        let value = Tensor::new(na.value.shape().to_vec(), out)?;
        self.push(name, value, Op::Binary(kind, a.index, b.index), rg)
    }

    /// Elementwise `a + b`; `b` may be a row `[1, c]`, a column `[r, 1]` or a
    /// scalar, broadcast over `a`. The same holds for `sub`, `mul` and `div`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let n = self.node(x)?;
        let vals = n.value.values().iter().map(|v| v * factor).collect();
        let value = Tensor::new(n.value.shape().to_vec(), vals)?;
        let rg = n.requires_grad;
        self.push("scale", value, Op::Scale(x.index, factor), rg)
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let n = self.node(x)?;
        let vals = n.value.values().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(n.value.shape().to_vec(), vals)?;
        let rg = n.requires_grad;
        self.push(name, value, op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x.index), f64::exp)
    }

    /// Natural log; every input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.node(x)?.value.values().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary("ln", x, Op::Ln(x.index), f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x.index), f64::tanh)
    }

    /// `max(x, floor)` elementwise; the adjoint passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", x, Op::ClampMin(x.index, floor), |v| v.max(floor))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s = n.value.values().iter().sum();
        let rg = n.requires_grad;
        self.push("sum", Tensor::scalar(s), Op::SumAll(x.index), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let len = self.node(x)?.value.len();
        if len == 0 {
            return Err(Error::Empty("mean of empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum of each row, shape `[r, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let (r, _) = n.value.dims();
        let vals = (0..r).map(|i| n.value.row(i).iter().sum()).collect();
        let rg = n.requires_grad;
        self.push("row_sum", Tensor::matrix(r, 1, vals)?, Op::RowSum(x.index), rg)
    }

    /// Sum of each column, shape `[1, c]`.
    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let (r, c) = n.value.dims();
        let mut vals = vec![0.0; c];
        for i in 0..r {
            for (acc, v) in vals.iter_mut().zip(n.value.row(i)) {
                *acc += v;
            }
        }
        let rg = n.requires_grad;
        self.push("col_sum", Tensor::matrix(1, c, vals)?, Op::ColSum(x.index), rg)
    }

    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let c = self.node(x)?.value.cols();
        if c == 0 {
            return Err(Error::Empty("row_mean of zero columns"));
        }
        let s = self.row_sum(x)?;
        self.scale(s, 1.0 / c as f64)
    }

    /// Maximum of each row, shape `[r, 1]`; the adjoint routes to the first
    /// maximal entry.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let arg = n.value.argmax_rows();
        let vals = arg.iter().enumerate().map(|(i, &j)| n.value.get(i, j)).collect();
        let rows = n.value.rows();
        let rg = n.requires_grad;
        self.push("row_max", Tensor::matrix(rows, 1, vals)?, Op::RowMax(x.index, arg), rg)
    }

    fn check_temperature(op: &'static str, temperature: f64) -> Result<()> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain {
                op,
                detail: format!("temperature must be positive, got {temperature}"),
            })
        }
    }

    /// Row-wise `softmax(x / temperature)`, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature("softmax", temperature)?;
        let n = self.node(x)?;
        let (r, c) = n.value.dims();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(softmax_row(n.value.row(i), temperature));
        }
        let rg = n.requires_grad;
        self.push("softmax", Tensor::matrix(r, c, out)?, Op::Softmax(x.index, temperature), rg)
    }

    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature("log_softmax", temperature)?;
        let n = self.node(x)?;
        let (r, c) = n.value.dims();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = n.value.row(i);
            let lse = log_sum_exp(row.iter().map(|v| v / temperature));
            out.extend(row.iter().map(|v| v / temperature - lse));
        }
        let rg = n.requires_grad;
        self.push(
            "log_softmax",
            Tensor::matrix(r, c, out)?,
            Op::LogSoftmax(x.index, temperature),
            rg,
        )
    }

    /// Scales every row to unit Euclidean norm. A zero row is a domain error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let (r, c) = n.value.dims();
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = n.value.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Domain {
                    op: "l2_normalize_rows",
                    detail: format!("row {i} has zero norm"),
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let rg = n.requires_grad;
        self.push(
            "l2_normalize_rows",
            Tensor::matrix(r, c, out)?,
            Op::L2NormalizeRows(x.index, norms),
            rg,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (r, ca) = na.value.dims();
        let (rb, cb) = nb.value.dims();
        if r != rb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: na.value.shape().to_vec(),
                rhs: nb.value.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(na.value.row(i));
            out.extend_from_slice(nb.value.row(i));
        }
        let rg = na.requires_grad || nb.requires_grad;
        self.push(
            "concat_cols",
            Tensor::matrix(r, ca + cb, out)?,
            Op::ConcatCols(a.index, b.index),
            rg,
        )
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let n = self.node(x)?;
        let (r, c) = n.value.dims();
        if start > end || end > c {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{end} out of bounds for {c} columns"
            )));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&n.value.row(i)[start..end]);
        }
        let rg = n.requires_grad;
        self.push(
            "slice_cols",
            Tensor::matrix(r, end - start, out)?,
            Op::SliceCols(x.index, start),
            rg,
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        let r = n.value.rows();
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of bounds for {r} rows"
            )));
        }
        let value = n.value.select_rows(rows);
        let rg = n.requires_grad;
        self.push("gather_rows", value, Op::GatherRows(x.index, rows.to_vec()), rg)
    }

    /// Reverse sweep from a one-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if root.requires_grad {
            adj[loss.index] = Some(vec![1.0]);
        }
        for i in (0..=loss.index).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        // Only expose adjoints of nodes that participate in differentiation.
        for (a, n) in adj.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *a = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            adjoints: adj,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |p: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[p].requires_grad {
                return;
            }
            let buf = adj[p].get_or_insert_with(|| vec![0.0; nodes[p].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let av = nodes[*a].value.values();
                let bv = nodes[*b].value.values();
                let (m, k) = nodes[*a].value.dims();
                let n = nodes[*b].value.cols();
                acc(*a, &mut |da| {
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = av[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += arp * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = out.dims();
                acc(*x, &mut |dx| {
                    for a in 0..r {
                        for b in 0..c {
                            dx[b * r + a] += g[a * c + b];
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let av = nodes[*a].value.values();
                let bv = nodes[*b].value.values();
                let (r, c) = out.dims();
                let rd = nodes[*b].value.dims();
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            let y = bv[broadcast_index(rd, i, j)];
                            da[k] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => g[k],
                                BinaryKind::Mul => g[k] * y,
                                BinaryKind::Div => g[k] / y,
                            };
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            let bi = broadcast_index(rd, i, j);
                            let x = av[k];
                            let y = bv[bi];
                            db[bi] += match kind {
                                BinaryKind::Add => g[k],
                                BinaryKind::Sub => -g[k],
                                BinaryKind::Mul => g[k] * x,
                                BinaryKind::Div => -g[k] * x / (y * y),
                            };
                        }
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv * f;
                }
            }),
            Op::Exp(x) => acc(*x, &mut |dx| {
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.values()) {
                    *d += gv * y;
                }
            }),
            Op::Ln(x) => {
                let xv = nodes[*x].value.values();
                acc(*x, &mut |dx| {
                    for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv / v;
                    }
                })
            }
            Op::Tanh(x) => acc(*x, &mut |dx| {
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.values()) {
                    *d += gv * (1.0 - y * y);
                }
            }),
            Op::ClampMin(x, floor) => {
                let xv = nodes[*x].value.values();
                acc(*x, &mut |dx| {
                    for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > floor {
                            *d += gv;
                        }
                    }
                })
            }
            Op::SumAll(x) => acc(*x, &mut |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::RowSum(x) => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |dx| {
                    for (k, d) in dx.iter_mut().enumerate() {
                        *d += g[k / c];
                    }
                })
            }
            Op::ColSum(x) => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |dx| {
                    for (k, d) in dx.iter_mut().enumerate() {
                        *d += g[k % c];
                    }
                })
            }
            Op::RowMax(x, arg) => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |dx| {
                    for (i, &j) in arg.iter().enumerate() {
                        dx[i * c + j] += g[i];
                    }
                })
            }
            Op::Softmax(x, temp) => {
                let (r, c) = out.dims();
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        let y = out.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] += y[j] * (gr[j] - dot) / temp;
                        }
                    }
                })
            }
            Op::LogSoftmax(x, temp) => {
                let (r, c) = out.dims();
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        let y = out.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            dx[i * c + j] += (gr[j] - y[j].exp() * total) / temp;
                        }
                    }
                })
            }
            Op::L2NormalizeRows(x, norms) => {
                let (r, c) = out.dims();
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        let y = out.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] += (gr[j] - y[j] * dot) / norms[i];
                        }
                    }
                })
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[*a].value.cols();
                let cb = nodes[*b].value.cols();
                let r = out.rows();
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..ca {
                            da[i * ca + j] += g[i * (ca + cb) + j];
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..r {
                        for j in 0..cb {
                            db[i * cb + j] += g[i * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let c = nodes[*x].value.cols();
                let (r, w) = out.dims();
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..w {
                            dx[i * c + start + j] += g[i * w + j];
                        }
                    }
                })
            }
            Op::GatherRows(x, rows) => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |dx| {
                    for (k, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[k * c + j];
                        }
                    }
                })
            }
        }
    }
}

/// `ln Σ exp(v)` without overflow.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Stabilized softmax of one row at the given temperature.
pub fn softmax_row(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let exps: Vec<f64> = row.iter().map(|v| (v / temperature - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
