//! Define-by-run reverse-mode tape.
//!
//! A tape is rebuilt for every forward pass: stochastic gating changes
//! the graph topology per step, so nothing is cached across steps. Nodes
//! are stored in topological order by construction; `backward` sweeps
//! them in reverse and populates gradients for exactly the ancestors
//! reachable from the loss.

use super::kernel::{
    cross_entropy_kernel, gelu_prime, gelu_scalar, layer_norm_kernel, mm, mm_nt, mm_tn,
    softmax_rows_kernel, transpose_kernel,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor on a tape.
pub type VarId = usize;

/// Whether a tape records backward rules.
///
/// `Eval` tapes compute identical forward values but keep no
/// differentiation state, so `backward` is rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapeMode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: VarId, b: VarId },
    Transpose { x: VarId },
    Add { a: VarId, b: VarId },
    AddBias { x: VarId, bias: VarId },
    Sub { a: VarId, b: VarId },
    Hadamard { a: VarId, b: VarId },
    Scale { x: VarId, c: f64 },
    SoftmaxRows { x: VarId },
    LayerNorm { x: VarId, gain: VarId, bias: VarId, eps: f64 },
    Gelu { x: VarId },
    NarrowCols { x: VarId, start: usize, len: usize },
    ConcatCols { parts: Vec<VarId> },
    NarrowRows { x: VarId, start: usize, len: usize },
    ConcatRows { parts: Vec<VarId> },
    SumAll { x: VarId },
    CrossEntropy { logits: VarId, labels: Vec<usize> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Recorded computation: an arena of tensors plus, in `Train` mode, the
/// operations that produced them.
pub struct Tape {
    nodes: Vec<Node>,
    mode: TapeMode,
    /// Attention-sublayer evaluations recorded by the attention builders;
    /// read by cost instrumentation.
    pub attn_evals: u64,
}

impl Tape {
    pub fn new(mode: TapeMode) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
            attn_evals: 0,
        }
    }

    pub fn train() -> Self {
        Tape::new(TapeMode::Train)
    }

    pub fn eval() -> Self {
        Tape::new(TapeMode::Eval)
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].tensor
    }

    /// Gradient of a node, present only if the node was reachable from
    /// the loss in the last `backward`.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id].tensor.grad()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, name: &'static str) -> Result<VarId> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let mut tensor = Tensor::new(shape, values)?;
        let id = self.nodes.len();
        tensor.set_node(id);
        let op = if self.mode == TapeMode::Eval { Op::Leaf } else { op };
        self.nodes.push(Node { tensor, op });
        Ok(id)
    }

    /// Lift a tensor onto the tape as a leaf (parameter or constant).
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<VarId> {
        self.push(tensor.shape().to_vec(), tensor.values().to_vec(), Op::Leaf, "leaf")
    }

    fn dims2(&self, id: VarId, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[id].tensor.dims2(op)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let values = mm(self.value(a).values(), self.value(b).values(), m, k, n);
        self.push(vec![m, n], values, Op::Matmul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let values = transpose_kernel(self.value(x).values(), rows, cols);
        self.push(vec![cols, rows], values, Op::Transpose { x }, "transpose")
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let values: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        self.push(sa, values, Op::Add { a, b }, "add")
    }

    /// `[n, d] + [d]` broadcast along rows; the only broadcast in the crate.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (rows, cols) = self.dims2(x, "add_bias")?;
        if self.value(bias).numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let xv = self.value(x).values();
        let bv = self.value(bias).values();
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(xv[i * cols + j] + bv[j]);
            }
        }
        self.push(vec![rows, cols], values, Op::AddBias { x, bias }, "add_bias")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "sub", lhs: sa, rhs: sb });
        }
        let values: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        self.push(sa, values, Op::Sub { a, b }, "sub")
    }

    pub fn hadamard(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "hadamard", lhs: sa, rhs: sb });
        }
        let values: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        self.push(sa, values, Op::Hadamard { a, b }, "hadamard")
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> Result<VarId> {
        let shape = self.value(x).shape().to_vec();
        let values: Vec<f64> = self.value(x).values().iter().map(|v| v * c).collect();
        self.push(shape, values, Op::Scale { x, c }, "scale")
    }

    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let (rows, cols) = self.dims2(x, "softmax_rows")?;
        let values = softmax_rows_kernel(self.value(x).values(), rows, cols);
        self.push(vec![rows, cols], values, Op::SoftmaxRows { x }, "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> Result<VarId> {
        let (rows, cols) = self.dims2(x, "layer_norm")?;
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let values = layer_norm_kernel(
            self.value(x).values(),
            rows,
            cols,
            self.value(gain).values(),
            self.value(bias).values(),
            eps,
        );
        self.push(vec![rows, cols], values, Op::LayerNorm { x, gain, bias, eps }, "layer_norm")
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        let shape = self.value(x).shape().to_vec();
        let values: Vec<f64> = self.value(x).values().iter().map(|&v| gelu_scalar(v)).collect();
        self.push(shape, values, Op::Gelu { x }, "gelu")
    }

    pub fn narrow_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (rows, cols) = self.dims2(x, "narrow_cols")?;
        if start + len > cols || len == 0 {
            return Err(Error::IndexOutOfRange {
                what: "column range",
                index: start + len,
                bound: cols,
            });
        }
        let xv = self.value(x).values();
        let mut values = Vec::with_capacity(rows * len);
        for i in 0..rows {
            values.extend_from_slice(&xv[i * cols + start..i * cols + start + len]);
        }
        self.push(vec![rows, len], values, Op::NarrowCols { x, start, len }, "narrow_cols")
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no parts"));
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total_cols += c;
        }
        let mut values = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.value(p).shape()[1];
                let pv = self.value(p).values();
                values.extend_from_slice(&pv[i * c..(i + 1) * c]);
            }
        }
        self.push(
            vec![rows, total_cols],
            values,
            Op::ConcatCols { parts: parts.to_vec() },
            "concat_cols",
        )
    }

    pub fn narrow_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (rows, cols) = self.dims2(x, "narrow_rows")?;
        if start + len > rows || len == 0 {
            return Err(Error::IndexOutOfRange {
                what: "row range",
                index: start + len,
                bound: rows,
            });
        }
        let values = self.value(x).values()[start * cols..(start + len) * cols].to_vec();
        self.push(vec![len, cols], values, Op::NarrowRows { x, start, len }, "narrow_rows")
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no parts"));
        }
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total_rows += r;
        }
        let mut values = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            values.extend_from_slice(self.value(p).values());
        }
        self.push(
            vec![total_rows, cols],
            values,
            Op::ConcatRows { parts: parts.to_vec() },
            "concat_rows",
        )
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let s: f64 = self.value(x).values().iter().sum();
        self.push(vec![1, 1], vec![s], Op::SumAll { x }, "sum_all")
    }

    /// Mean over rows of `-log softmax(row)[label]` as a `[1, 1]` scalar.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        for &l in labels {
            if l >= cols {
                return Err(Error::IndexOutOfRange {
                    what: "class label",
                    index: l,
                    bound: cols,
                });
            }
        }
        let loss = cross_entropy_kernel(self.value(logits).values(), rows, cols, labels);
        self.push(
            vec![1, 1],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every node
    /// reachable from the loss; unreachable nodes keep `grad = None`.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.mode != TapeMode::Train {
            return Err(Error::contract("backward on an eval-mode tape"));
        }
        if loss >= self.nodes.len() {
            return Err(Error::IndexOutOfRange {
                what: "tape node",
                index: loss,
                bound: self.nodes.len(),
            });
        }
        if self.nodes[loss].tensor.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].tensor.shape()
            )));
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss] = Some(vec![1.0]);

        for i in (0..=loss).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &g, &mut grads)?;
            self.nodes[i].tensor.set_grad(g);
        }
        Ok(())
    }

    fn accumulate_inputs(
        &self,
        i: VarId,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let touch = |grads: &mut [Option<Vec<f64>>], id: VarId, contribution: Vec<f64>| {
            match &mut grads[id] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contribution) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[*a].tensor.dims2("matmul")?;
                let n = self.nodes[*b].tensor.shape()[1];
                let da = mm_nt(g, self.nodes[*b].tensor.values(), m, n, k);
                let db = mm_tn(self.nodes[*a].tensor.values(), g, m, k, n);
                touch(grads, *a, da);
                touch(grads, *b, db);
            }

            Op::Transpose { x } => {
                let (rows, cols) = self.nodes[i].tensor.dims2("transpose")?;
                touch(grads, *x, transpose_kernel(g, rows, cols));
            }

            Op::Add { a, b } => {
                touch(grads, *a, g.to_vec());
                touch(grads, *b, g.to_vec());
            }

            Op::AddBias { x, bias } => {
                let (rows, cols) = self.nodes[*x].tensor.dims2("add_bias")?;
                touch(grads, *x, g.to_vec());
                let mut db = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        db[j] += g[i * cols + j];
                    }
                }
                touch(grads, *bias, db);
            }

            Op::Sub { a, b } => {
                touch(grads, *a, g.to_vec());
                touch(grads, *b, g.iter().map(|v| -v).collect());
            }

            Op::Hadamard { a, b } => {
                let av = self.nodes[*a].tensor.values();
                let bv = self.nodes[*b].tensor.values();
                touch(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                touch(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }

            Op::Scale { x, c } => {
                touch(grads, *x, g.iter().map(|v| v * c).collect());
            }

            Op::SoftmaxRows { x } => {
                let (rows, cols) = self.nodes[i].tensor.dims2("softmax_rows")?;
                let s = self.nodes[i].tensor.values();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let srow = &s[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = srow[c] * (grow[c] - dot);
                    }
                }
                touch(grads, *x, dx);
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let (rows, cols) = self.nodes[*x].tensor.dims2("layer_norm")?;
                let xv = self.nodes[*x].tensor.values();
                let gv = self.nodes[*gain].tensor.values();
                let d = cols as f64;
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    for j in 0..cols {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let dxhat: Vec<f64> = grow.iter().zip(gv).map(|(g, gn)| g * gn).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] =
                            inv_std / d * (d * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                touch(grads, *x, dx);
                touch(grads, *gain, dgain);
                touch(grads, *bias, dbias);
            }

            Op::Gelu { x } => {
                let xv = self.nodes[*x].tensor.values();
                touch(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(g, &x)| g * gelu_prime(x)).collect(),
                );
            }

            Op::NarrowCols { x, start, len } => {
                let (rows, cols) = self.nodes[*x].tensor.dims2("narrow_cols")?;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..*len {
                        dx[r * cols + start + j] = g[r * len + j];
                    }
                }
                touch(grads, *x, dx);
            }

            Op::ConcatCols { parts } => {
                let rows = self.nodes[i].tensor.shape()[0];
                let total = self.nodes[i].tensor.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].tensor.shape()[1];
                    let mut dp = vec![0.0; rows * c];
                    for r in 0..rows {
                        dp[r * c..(r + 1) * c]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    touch(grads, p, dp);
                    offset += c;
                }
            }

            Op::NarrowRows { x, start, len } => {
                let (rows, cols) = self.nodes[*x].tensor.dims2("narrow_rows")?;
                let mut dx = vec![0.0; rows * cols];
                dx[start * cols..(start + len) * cols].copy_from_slice(g);
                touch(grads, *x, dx);
            }

            Op::ConcatRows { parts } => {
                let cols = self.nodes[i].tensor.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p].tensor.shape()[0];
                    touch(grads, p, g[offset * cols..(offset + r) * cols].to_vec());
                    offset += r;
                }
            }

            Op::SumAll { x } => {
                let n = self.nodes[*x].tensor.numel();
                touch(grads, *x, vec![g[0]; n]);
            }

            Op::CrossEntropy { logits, labels } => {
                let (rows, cols) = self.nodes[*logits].tensor.dims2("cross_entropy")?;
                let lv = self.nodes[*logits].tensor.values();
                let mut dl = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = &lv[r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for c in 0..cols {
                        let softmax = exps[c] / sum;
                        let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                        dl[r * cols + c] = g[0] * (softmax - onehot) / rows as f64;
                    }
                }
                touch(grads, *logits, dl);
            }
        }
        Ok(())
    }
}
