//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward operation appends a node to a [`Tape`]; a node's inputs
//! always precede it, so the node list is already in topological order and
//! [`Tape::backward`] is a single reverse sweep. Values are immutable once
//! recorded. Reductions run in a fixed left-to-right order, so a forward and
//! backward pass is bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_at_b_acc, matmul_kernel, Tensor};

/// Norms below this are treated as degenerate rather than normalised.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        x: Var,
        scale: f64,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ClampUnit(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    GatherEntries {
        x: Var,
        pos: Vec<(usize, usize)>,
    },
    MeanAxis1(Var),
    AddBroadcastMid(Var, Var),
    WeightedSumMid {
        alpha: Var,
        v: Var,
    },
    RowDot(Var, Var),
    StackMid(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when no gradient
    /// reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::wrt`] but materialises zeros for unreached nodes.
    pub fn wrt_or_zeros(&self, v: Var, numel: usize) -> Vec<f64> {
        self.wrt(v)
            .map_or_else(|| vec![0.0; numel], <[f64]>::to_vec)
    }
}

fn dim2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!(
            "{what} expects a 2-D tensor, got {s:?}"
        ))),
    }
}

fn dim3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::Dimension(format!(
            "{what} expects a 3-D tensor, got {s:?}"
        ))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of `scale * row` for every row of width `n`.
pub(crate) fn softmax_rows(data: &[f64], n: usize, scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let max = row
            .iter()
            .map(|&v| scale * v)
            .fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (scale * v - max).exp();
            total += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= total;
        }
    }
    out
}

/// Numerically stable `log(softmax(row))`.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

fn accumulate(slot: &mut Option<Vec<f64>>, numel: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; numel])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Only leaves created with `requires_grad`
    /// receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} produced {} at entry {i}",
                op_name(&op),
                data[i]
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A copy of `x` cut off from gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dim2(self.value(a), "matmul")?;
        let (k2, n) = dim2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(shape, data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(shape, data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(shape, data, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[K]` vector to every last-axis row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let k = self.value(x).last_dim();
        if self.shape(bias) != [k] {
            return Err(Error::Dimension(format!(
                "add_row: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(k)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        self.push(
            self.shape(x).to_vec(),
            data,
            Op::AddRow(x, bias),
            &[x, bias],
        )
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), data, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Clamps into `[-1, 1]` to absorb rounding in cosine similarities. The
    /// gradient passes through unchanged.
    pub fn clamp_unit(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::ClampUnit(x), |v| v.clamp(-1.0, 1.0))
    }

    /// Softmax of `scale * x` over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !scale.is_finite() {
            return Err(Error::Contract(format!(
                "softmax scale {scale} is not finite"
            )));
        }
        let n = match self.shape(x).last() {
            Some(&n) => n,
            None => {
                return Err(Error::Dimension(
                    "softmax over a scalar has no last axis".into(),
                ))
            }
        };
        let data = softmax_rows(self.value(x).data(), n, scale);
        self.push(self.shape(x).to_vec(), data, Op::Softmax { x, scale }, &[x])
    }

    /// Scales every last-axis row to unit L2 norm. Rows with norm below
    /// [`NORM_EPS`] are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let k = self.value(x).last_dim();
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(self.value(x).numel());
        for (r, row) in self.value(x).data().chunks(k).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                return Err(Error::Degenerate(format!("row {r} has zero norm")));
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        self.push(
            self.shape(x).to_vec(),
            data,
            Op::NormalizeRows { x, norms },
            &[x],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dim2(self.value(x), "transpose")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], data, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let (rows, _) = dim2(self.value(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dim2(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {rows} and {r} differ"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            vec![rows, total],
            data,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dim2(self.value(x), "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        self.push(vec![rows, len], data, Op::SliceCols { x, start }, &[x])
    }

    /// Row lookup into a `[N,D]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = dim2(self.value(table), "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            vec![idx.len(), d],
            data,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    /// Picks `x[r, c]` for every `(r, c)` in `pos`, giving a 1-D tensor.
    pub fn gather_entries(&mut self, x: Var, pos: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = dim2(self.value(x), "gather_entries")?;
        if pos.is_empty() {
            return Err(Error::Contract("gather_entries with no positions".into()));
        }
        if let Some(&(r, c)) = pos.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::Dimension(format!(
                "gather_entries ({r},{c}) out of range for [{rows},{cols}]"
            )));
        }
        let src = self.value(x).data();
        let data = pos.iter().map(|&(r, c)| src[r * cols + c]).collect();
        self.push(
            vec![pos.len()],
            data,
            Op::GatherEntries {
                x,
                pos: pos.to_vec(),
            },
            &[x],
        )
    }

    /// Mean over the middle axis of a `[B,T,D]` tensor.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let (b, t, d) = dim3(self.value(x), "mean_axis1")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; b * d];
        for i in 0..b {
            let out = &mut data[i * d..(i + 1) * d];
            for s in 0..t {
                let row = &src[(i * t + s) * d..(i * t + s + 1) * d];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= t as f64;
            }
        }
        self.push(vec![b, d], data, Op::MeanAxis1(x), &[x])
    }

    /// `x[b,t,:] + y[b,:]` for a `[B,T,K]` tensor and a `[B,K]` tensor.
    pub fn add_broadcast_mid(&mut self, x: Var, y: Var) -> Result<Var> {
        let (b, t, k) = dim3(self.value(x), "add_broadcast_mid")?;
        if self.shape(y) != [b, k] {
            return Err(Error::Dimension(format!(
                "add_broadcast_mid: {:?} cannot broadcast over {:?}",
                self.shape(y),
                self.shape(x)
            )));
        }
        let xs = self.value(x).data();
        let ys = self.value(y).data();
        let mut data = Vec::with_capacity(b * t * k);
        for i in 0..b {
            let yrow = &ys[i * k..(i + 1) * k];
            for s in 0..t {
                let xrow = &xs[(i * t + s) * k..(i * t + s + 1) * k];
                data.extend(xrow.iter().zip(yrow).map(|(a, c)| a + c));
            }
        }
        self.push(vec![b, t, k], data, Op::AddBroadcastMid(x, y), &[x, y])
    }

    /// `out[b,:] = sum_t alpha[b,t] * v[b,t,:]`.
    pub fn weighted_sum_mid(&mut self, alpha: Var, v: Var) -> Result<Var> {
        let (b, t, d) = dim3(self.value(v), "weighted_sum_mid")?;
        if self.shape(alpha) != [b, t] {
            return Err(Error::Dimension(format!(
                "weighted_sum_mid: weights {:?} do not match values {:?}",
                self.shape(alpha),
                self.shape(v)
            )));
        }
        let a = self.value(alpha).data();
        let vs = self.value(v).data();
        let mut data = vec![0.0; b * d];
        for i in 0..b {
            let out = &mut data[i * d..(i + 1) * d];
            for s in 0..t {
                let w = a[i * t + s];
                let row = &vs[(i * t + s) * d..(i * t + s + 1) * d];
                for (o, x) in out.iter_mut().zip(row) {
                    *o += w * x;
                }
            }
        }
        self.push(
            vec![b, d],
            data,
            Op::WeightedSumMid { alpha, v },
            &[alpha, v],
        )
    }

    /// Row-wise dot product of two `[N,D]` tensors, giving `[N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = dim2(self.value(a), "row_dot")?;
        same_shape(self.value(a), self.value(b), "row_dot")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|i| {
                av[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bv[i * d..(i + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        self.push(vec![n], data, Op::RowDot(a, b), &[a, b])
    }

    /// Stacks `S` tensors of shape `[B,V]` into `[B,S,V]`.
    pub fn stack_mid(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("stack_mid of nothing".into()))?;
        let (b, v) = dim2(self.value(first), "stack_mid")?;
        for &p in parts {
            if self.shape(p) != [b, v] {
                return Err(Error::Dimension(format!(
                    "stack_mid: {:?} differs from {:?}",
                    self.shape(p),
                    [b, v]
                )));
            }
        }
        let s = parts.len();
        let mut data = Vec::with_capacity(b * s * v);
        for i in 0..b {
            for &p in parts {
                data.extend_from_slice(&self.value(p).data()[i * v..(i + 1) * v]);
            }
        }
        self.push(vec![b, s, v], data, Op::StackMid(parts.to_vec()), parts)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Vec::new(), vec![total], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Vec::new(), vec![mean], Op::MeanAll(x), &[x])
    }

    /// Weighted mean negative log-likelihood of `targets` under row-wise
    /// softmax of `logits [N,V]`. Rows with weight 0 do not contribute.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (n, v) = dim2(self.value(logits), "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} rows but {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(Error::Degenerate(
                "cross_entropy with every position masked".into(),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * v);
        let mut loss = 0.0;
        for (i, row) in src.chunks(v).enumerate() {
            let t = targets[i];
            if t >= v {
                return Err(Error::Dimension(format!(
                    "target {t} out of range for {v} classes"
                )));
            }
            let lp = log_softmax(row);
            if weights[i] != 0.0 {
                loss -= weights[i] * lp[t];
            }
            probs.extend(lp.iter().map(|l| l.exp()));
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
            total_weight,
        };
        self.push(Vec::new(), vec![loss / total_weight], op, &[logits])
    }

    /// Reverse sweep from a single-element `loss`. Gradients are returned for
    /// every node that depends on a `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let da = accumulate(&mut grads[a.0], m * k);
                    matmul_a_bt_acc(g, self.value(*b).data(), da, m, k, n);
                }
                if wants(*b) {
                    let db = accumulate(&mut grads[b.0], k * n);
                    matmul_at_b_acc(self.value(*a).data(), g, db, m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if wants(*a) {
                    let da = accumulate(&mut grads[a.0], g.len());
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if wants(*b) {
                    let db = accumulate(&mut grads[b.0], g.len());
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d += sign * gv);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = self.value(*b).data();
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if wants(*b) {
                    let av = self.value(*a).data();
                    let db = accumulate(&mut grads[b.0], g.len());
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if wants(*bias) {
                    let k = numel(*bias);
                    let db = accumulate(&mut grads[bias.0], k);
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::ClampUnit(x) => {
                if wants(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Square(x) => {
                if wants(*x) {
                    let xv = self.value(*x).data();
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += 2.0 * v * gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = self.value(*x).data();
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, scale } => {
                if wants(*x) {
                    let n = node.value.last_dim();
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += scale * y * (gv - dot);
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if wants(*x) {
                    let k = node.value.last_dim();
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for (r, ((drow, grow), yrow)) in dx
                        .chunks_mut(k)
                        .zip(g.chunks(k))
                        .zip(out.chunks(k))
                        .enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gv - y * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let dx = accumulate(&mut grads[x.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if wants(p) {
                        let dp = accumulate(&mut grads[p.0], rows * w);
                        for i in 0..rows {
                            let src = &g[i * total + offset..i * total + offset + w];
                            dp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, gv)| *d += gv);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let len = node.value.shape()[1];
                    let dx = accumulate(&mut grads[x.0], rows * cols);
                    for i in 0..rows {
                        dx[i * cols + start..i * cols + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if wants(*table) {
                    let d = self.shape(*table)[1];
                    let dt = accumulate(&mut grads[table.0], numel(*table));
                    for (r, &i) in idx.iter().enumerate() {
                        dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(dv, gv)| *dv += gv);
                    }
                }
            }
            Op::GatherEntries { x, pos } => {
                if wants(*x) {
                    let cols = self.shape(*x)[1];
                    let dx = accumulate(&mut grads[x.0], numel(*x));
                    for (&(r, c), gv) in pos.iter().zip(g) {
                        dx[r * cols + c] += gv;
                    }
                }
            }
            Op::MeanAxis1(x) => {
                if wants(*x) {
                    let (b, t, d) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                    let dx = accumulate(&mut grads[x.0], b * t * d);
                    for i in 0..b {
                        let grow = &g[i * d..(i + 1) * d];
                        for s in 0..t {
                            dx[(i * t + s) * d..(i * t + s + 1) * d]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(dv, gv)| *dv += gv / t as f64);
                        }
                    }
                }
            }
            Op::AddBroadcastMid(x, y) => {
                let (b, t, k) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                if wants(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if wants(*y) {
                    let dy = accumulate(&mut grads[y.0], b * k);
                    for i in 0..b {
                        for s in 0..t {
                            dy[i * k..(i + 1) * k]
                                .iter_mut()
                                .zip(&g[(i * t + s) * k..(i * t + s + 1) * k])
                                .for_each(|(d, gv)| *d += gv);
                        }
                    }
                }
            }
            Op::WeightedSumMid { alpha, v } => {
                let (b, t, d) = (self.shape(*v)[0], self.shape(*v)[1], self.shape(*v)[2]);
                if wants(*alpha) {
                    let vs = self.value(*v).data();
                    let da = accumulate(&mut grads[alpha.0], b * t);
                    for i in 0..b {
                        let grow = &g[i * d..(i + 1) * d];
                        for s in 0..t {
                            let row = &vs[(i * t + s) * d..(i * t + s + 1) * d];
                            da[i * t + s] += grow.iter().zip(row).map(|(a, c)| a * c).sum::<f64>();
                        }
                    }
                }
                if wants(*v) {
                    let a = self.value(*alpha).data();
                    let dv = accumulate(&mut grads[v.0], b * t * d);
                    for i in 0..b {
                        let grow = &g[i * d..(i + 1) * d];
                        for s in 0..t {
                            let w = a[i * t + s];
                            dv[(i * t + s) * d..(i * t + s + 1) * d]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(dd, gv)| *dd += w * gv);
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let d = self.shape(*a)[1];
                for (target, other) in [(*a, *b), (*b, *a)] {
                    if wants(target) {
                        let ov = self.value(other).data();
                        let dt = accumulate(&mut grads[target.0], ov.len());
                        for (n, gv) in g.iter().enumerate() {
                            dt[n * d..(n + 1) * d]
                                .iter_mut()
                                .zip(&ov[n * d..(n + 1) * d])
                                .for_each(|(dv, o)| *dv += gv * o);
                        }
                    }
                }
            }
            Op::StackMid(parts) => {
                let (b, s, v) = (
                    node.value.shape()[0],
                    node.value.shape()[1],
                    node.value.shape()[2],
                );
                for (j, &p) in parts.iter().enumerate() {
                    if wants(p) {
                        let dp = accumulate(&mut grads[p.0], b * v);
                        for i in 0..b {
                            dp[i * v..(i + 1) * v]
                                .iter_mut()
                                .zip(&g[(i * s + j) * v..(i * s + j + 1) * v])
                                .for_each(|(d, gv)| *d += gv);
                        }
                    }
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                if wants(*x) {
                    let n = numel(*x);
                    let per = if matches!(node.op, Op::MeanAll(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    let dx = accumulate(&mut grads[x.0], n);
                    dx.iter_mut().for_each(|d| *d += per);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                if wants(*logits) {
                    let v = self.shape(*logits)[1];
                    let dl = accumulate(&mut grads[logits.0], probs.len());
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = g[0] * w / total_weight;
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[i * v + j] += c * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Square(..) => "square",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Softmax { .. } => "softmax",
        Op::NormalizeRows { .. } => "normalize_rows",
        Op::ClampUnit(..) => "clamp_unit",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::GatherEntries { .. } => "gather_entries",
        Op::MeanAxis1(..) => "mean_axis1",
        Op::AddBroadcastMid(..) => "add_broadcast_mid",
        Op::WeightedSumMid { .. } => "weighted_sum_mid",
        Op::RowDot(..) => "row_dot",
        Op::StackMid(..) => "stack_mid",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

/// `S[i,j] = cos(a_i, b_j)` for two `[B,d]` tensors.
pub fn cosine_similarity_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (na, da) = dim2(tape.value(a), "cosine_similarity_matrix")?;
    let (nb, db) = dim2(tape.value(b), "cosine_similarity_matrix")?;
    if da != db {
        return Err(Error::Dimension(format!(
            "cosine_similarity_matrix: feature sizes {da} and {db} differ ({na} vs {nb} rows)"
        )));
    }
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let bt = tape.transpose(bn)?;
    let s = tape.matmul(an, bt)?;
    tape.clamp_unit(s)
}

/// `cos(a_i, b_i)` for every row pair of two `[B,d]` tensors, giving `[B]`.
pub fn paired_cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let dot = tape.row_dot(an, bn)?;
    tape.clamp_unit(dot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.5, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let i2 = tape.constant(Tensor::identity(2));
        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia), tape.value(a));
        let az = tape.matmul(a, z).unwrap();
        assert!(tape.value(az).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax_lastdim(x, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[3], &[0.3, -1.2, 2.0]));
        let xs = tape.constant(t(&[3], &[100.3, 98.8, 102.0]));
        let a = tape.softmax_lastdim(x, 1.0).unwrap();
        let b = tape.softmax_lastdim(xs, 1.0).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);

        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.softmax_lastdim(x, 1e4).unwrap();
        assert!(tape.value(y).data()[0] < 1e-12);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-12);

        let s = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(
            tape.softmax_lastdim(s, 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cosine_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, -3.0, 0.5]));
        let neg = tape.constant(t(&[2, 2], &[-1.0, -2.0, 3.0, -0.5]));
        let s = cosine_similarity_matrix(&mut tape, a, a).unwrap();
        assert!((tape.value(s).get(&[0, 0]) - 1.0).abs() < 1e-15);
        assert!((tape.value(s).get(&[1, 1]) - 1.0).abs() < 1e-15);
        let s = cosine_similarity_matrix(&mut tape, a, neg).unwrap();
        assert!((tape.value(s).get(&[0, 0]) + 1.0).abs() < 1e-15);
        let x = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let y = tape.constant(t(&[1, 2], &[0.0, 2.0]));
        let s = cosine_similarity_matrix(&mut tape, x, y).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0]);
    }

    #[test]
    fn cosine_zero_row_names_index() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]));
        let err = cosine_similarity_matrix(&mut tape, a, a).unwrap_err();
        assert!(
            matches!(err, Error::Degenerate(ref m) if m.contains("row 1")),
            "{err}"
        );
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Contract(_))));
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 16]));
        let ce = tape
            .cross_entropy(logits, &[0, 5, 15], &[1.0, 1.0, 1.0])
            .unwrap();
        assert!((tape.value(ce).item().unwrap() - 16f64.ln()).abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 1, 2], &[0.0; 3]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0]);
    }
}
