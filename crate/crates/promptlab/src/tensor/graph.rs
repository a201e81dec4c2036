//! Define-by-run computation record with reverse-mode backward.
//!
//! Every primitive application is appended to the record in call order, so
//! operands always precede results and the reverse sweep visits nodes in a
//! fixed, deterministic order.

use super::{Tensor, TensorError, MASK_THRESHOLD};

const LAYER_NORM_EPS: f64 = 1e-8;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    /// c = a · bᵀ
    MatmulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRowBroadcast { mat: usize, vec: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Gelu { a: usize },
    SoftmaxRowsBias { logits: usize },
    LayerNorm { x: usize, gain: usize, shift: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, ignore: Vec<bool> },
    GatherRows { table: usize, ids: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    SumAll { a: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications (a Wengert list).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers an external tensor as a graph input (data is copied).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t.clone(), Op::Leaf, needs)
    }

    /// Registers a non-trainable input from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a.0].value.shape().to_vec(),
                right: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            ka,
            n,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul { a: a.0, b: b.0 },
            needs,
        ))
    }

    /// Matrix product against a transposed right operand: `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.dims2(a);
        let (n, kb) = self.dims2(b);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.nodes[a.0].value.shape().to_vec(),
                right: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_raw(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            ka,
            n,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatmulNt { a: a.0, b: b.0 },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.nodes[a.0].value.shape().to_vec(),
                right: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a: a.0, b: b.0 }, needs))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row_broadcast(&mut self, mat: Var, vec: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(mat);
        if self.nodes[vec.0].value.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.nodes[mat.0].value.shape().to_vec(),
                right: self.nodes[vec.0].value.shape().to_vec(),
            });
        }
        let v = self.nodes[vec.0].value.data();
        let mut data = Vec::with_capacity(m * n);
        for row in self.nodes[mat.0].value.data().chunks(n) {
            data.extend(row.iter().zip(v).map(|(x, y)| x + y));
        }
        let needs = self.needs(mat) || self.needs(vec);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::AddRowBroadcast {
                mat: mat.0,
                vec: vec.0,
            },
            needs,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: self.nodes[a.0].value.shape().to_vec(),
                right: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a: a.0, b: b.0 }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| x * factor).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            Op::Scale { a: a.0, factor },
            needs,
        )
    }

    /// GELU activation (tanh approximation), elementwise.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| gelu_val(x)).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            Op::Gelu { a: a.0 },
            needs,
        )
    }

    /// Row-wise softmax of `logits + bias`.
    ///
    /// Bias entries at or below [`MASK_THRESHOLD`](super::MASK_THRESHOLD) mark
    /// masked cells: those positions get probability exactly 0 and every row
    /// sums to 1 over the surviving cells. The bias itself is a constant; no
    /// gradient flows into it.
    pub fn softmax_rows_with_bias(&mut self, logits: Var, bias: &Tensor) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(logits);
        if bias.shape() != self.nodes[logits.0].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_rows_with_bias",
                left: self.nodes[logits.0].value.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = self.nodes[logits.0].value.row(i);
            let brow = bias.row(i);
            softmax_row_with_bias(row, brow, &mut data[i * n..(i + 1) * n])
                .map_err(|_| TensorError::DegenerateRow { row: i })?;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::SoftmaxRowsBias { logits: logits.0 },
            needs,
        ))
    }

    /// Per-row normalization to zero mean and unit variance, then an affine
    /// map by `gain` and `shift` (both length `d`, the last axis of `x`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var, TensorError> {
        let (m, d) = self.dims2(x);
        if d == 0 {
            return Err(TensorError::EmptyDimension { op: "layer_norm" });
        }
        if self.nodes[gain.0].value.len() != d || self.nodes[shift.0].value.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.nodes[x.0].value.shape().to_vec(),
                right: self.nodes[gain.0].value.shape().to_vec(),
            });
        }
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[shift.0].value.data();
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = self.nodes[x.0].value.row(i);
            let (mean, inv_std) = row_moments(row);
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(
            Tensor::new(vec![m, d], data)?,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                shift: shift.0,
            },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise logits,
    /// skipping positions where `ignore` is true.
    pub fn cross_entropy_next_token(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: &[bool],
    ) -> Result<Var, TensorError> {
        let (m, v) = self.dims2(logits);
        if targets.len() != m || ignore.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_next_token",
                left: vec![m, v],
                right: vec![targets.len(), ignore.len()],
            });
        }
        let count = ignore.iter().filter(|&&x| !x).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let mut total = 0.0;
        for i in 0..m {
            if ignore[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(TensorError::TargetOutOfRange {
                    target: targets[i],
                    vocab: v,
                });
            }
            let row = self.nodes[logits.0].value.row(i);
            total += log_sum_exp(row) - row[targets[i]];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore: ignore.to_vec(),
            },
            needs,
        ))
    }

    /// Selects rows of `table` by index; duplicate ids accumulate gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, d) = self.dims2(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::TargetOutOfRange {
                    target: id,
                    vocab: rows,
                });
            }
            data.extend_from_slice(self.nodes[table.0].value.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Stacks matrices vertically; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let d = self.dims2(parts[0]).1;
        let mut data = Vec::new();
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![total_rows, d],
                    right: self.nodes[p.0].value.shape().to_vec(),
                });
            }
            total_rows += r;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![total_rows, d], data)?,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            needs,
        ))
    }

    /// Takes columns `start..start+len` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(a);
        if start + len > n {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: vec![m, n],
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            let row = self.nodes[a.0].value.row(i);
            data.extend_from_slice(&row[start..start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![m, len], data)?,
            Op::SliceCols { a: a.0, start, len },
            needs,
        ))
    }

    /// Concatenates matrices horizontally; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let m = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
        for &p in parts {
            if self.dims2(p).0 != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![m],
                    right: self.nodes[p.0].value.shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            needs,
        ))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 }, needs)
    }

    /// Reverse sweep from a scalar loss. Gradients are accumulated in record
    /// order, so repeated runs are bit-identical.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.needs_grad {
                    vec![0.0; n.value.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.grads[idx].is_empty() {
                continue;
            }
            self.propagate(idx);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize) {
        let out_grad = std::mem::take(&mut self.grads[idx]);
        match &self.nodes[idx].op {
            Op::Leaf => {
                self.grads[idx] = out_grad;
                return;
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.cols();
                if self.nodes[a].needs_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_raw(&out_grad, self.nodes[b].value.data(), m, n, k, &mut da);
                    add_into(&mut self.grads[a], &da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_raw(self.nodes[a].value.data(), &out_grad, m, k, n, &mut db);
                    add_into(&mut self.grads[b], &db);
                }
            }
            Op::MatmulNt { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.rows();
                if self.nodes[a].needs_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_raw(&out_grad, self.nodes[b].value.data(), m, n, k, &mut da);
                    add_into(&mut self.grads[a], &da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_raw(&out_grad, self.nodes[a].value.data(), m, n, k, &mut db);
                    add_into(&mut self.grads[b], &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    add_into(&mut self.grads[a], &out_grad);
                }
                if self.nodes[b].needs_grad {
                    add_into(&mut self.grads[b], &out_grad);
                }
            }
            Op::AddRowBroadcast { mat, vec } => {
                let (mat, vec) = (*mat, *vec);
                let n = self.nodes[vec].value.len();
                if self.nodes[mat].needs_grad {
                    add_into(&mut self.grads[mat], &out_grad);
                }
                if self.nodes[vec].needs_grad {
                    for row in out_grad.chunks(n) {
                        for (g, d) in self.grads[vec].iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let bv: Vec<f64> = self.nodes[b]
                        .value
                        .data()
                        .iter()
                        .zip(&out_grad)
                        .map(|(x, d)| x * d)
                        .collect();
                    add_into(&mut self.grads[a], &bv);
                }
                if self.nodes[b].needs_grad {
                    let av: Vec<f64> = self.nodes[a]
                        .value
                        .data()
                        .iter()
                        .zip(&out_grad)
                        .map(|(x, d)| x * d)
                        .collect();
                    add_into(&mut self.grads[b], &av);
                }
            }
            Op::Scale { a, factor } => {
                let (a, factor) = (*a, *factor);
                if self.nodes[a].needs_grad {
                    for (g, d) in self.grads[a].iter_mut().zip(&out_grad) {
                        *g += factor * d;
                    }
                }
            }
            Op::Gelu { a } => {
                let a = *a;
                if self.nodes[a].needs_grad {
                    let xv = self.nodes[a].value.data();
                    for i in 0..out_grad.len() {
                        self.grads[a][i] += gelu_grad(xv[i]) * out_grad[i];
                    }
                }
            }
            Op::SoftmaxRowsBias { logits } => {
                let logits = *logits;
                if self.nodes[logits].needs_grad {
                    let n = self.nodes[idx].value.cols();
                    let p = self.nodes[idx].value.data();
                    for (r, drow) in out_grad.chunks(n).enumerate() {
                        let prow = &p[r * n..(r + 1) * n];
                        let dot: f64 = drow.iter().zip(prow).map(|(d, q)| d * q).sum();
                        let grow = &mut self.grads[logits][r * n..(r + 1) * n];
                        for j in 0..n {
                            grow[j] += prow[j] * (drow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, shift } => {
                let (x, gain, shift) = (*x, *gain, *shift);
                let d = self.nodes[x].value.cols();
                let m = self.nodes[x].value.rows();
                let g = self.nodes[gain].value.data().to_vec();
                for i in 0..m {
                    let row: Vec<f64> = self.nodes[x].value.row(i).to_vec();
                    let (mean, inv_std) = row_moments(&row);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dy = &out_grad[i * d..(i + 1) * d];
                    if self.nodes[shift].needs_grad {
                        for (gr, dv) in self.grads[shift].iter_mut().zip(dy) {
                            *gr += dv;
                        }
                    }
                    if self.nodes[gain].needs_grad {
                        for j in 0..d {
                            self.grads[gain][j] += dy[j] * xhat[j];
                        }
                    }
                    if self.nodes[x].needs_grad {
                        let h: Vec<f64> = dy.iter().zip(&g).map(|(dv, gv)| dv * gv).collect();
                        let mean_h: f64 = h.iter().sum::<f64>() / d as f64;
                        let mean_hx: f64 =
                            h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let gx = &mut self.grads[x][i * d..(i + 1) * d];
                        for j in 0..d {
                            gx[j] += inv_std * (h[j] - mean_h - xhat[j] * mean_hx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let ignore = ignore.clone();
                if self.nodes[logits].needs_grad {
                    let v = self.nodes[logits].value.cols();
                    let count = ignore.iter().filter(|&&x| !x).count() as f64;
                    let s = out_grad[0] / count;
                    for (i, (&t, &skip)) in targets.iter().zip(&ignore).enumerate() {
                        if skip {
                            continue;
                        }
                        let row: Vec<f64> = self.nodes[logits].value.row(i).to_vec();
                        let lse = log_sum_exp(&row);
                        let grow = &mut self.grads[logits][i * v..(i + 1) * v];
                        for j in 0..v {
                            let p = (row[j] - lse).exp();
                            grow[j] += s * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.nodes[table].needs_grad {
                    let d = self.nodes[idx].value.cols();
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &out_grad[i * d..(i + 1) * d];
                        let dst = &mut self.grads[table][id * d..(id + 1) * d];
                        for (g, v) in dst.iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p].value.len();
                    if self.nodes[p].needs_grad {
                        let src = &out_grad[offset..offset + len];
                        add_into(&mut self.grads[p], src);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                if self.nodes[a].needs_grad {
                    let n = self.nodes[a].value.cols();
                    let m = self.nodes[a].value.rows();
                    for i in 0..m {
                        let src = &out_grad[i * len..(i + 1) * len];
                        let dst = &mut self.grads[a][i * n + start..i * n + start + len];
                        for (g, v) in dst.iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let m = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p].value.cols();
                    if self.nodes[p].needs_grad {
                        for i in 0..m {
                            let src = &out_grad[i * total + offset..i * total + offset + w];
                            let dst = &mut self.grads[p][i * w..(i + 1) * w];
                            for (g, v) in dst.iter_mut().zip(src) {
                                *g += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SumAll { a } => {
                let a = *a;
                if self.nodes[a].needs_grad {
                    let d = out_grad[0];
                    for g in self.grads[a].iter_mut() {
                        *g += d;
                    }
                }
            }
        }
        self.grads[idx] = out_grad;
    }

    /// Gradient of a node after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    /// Accumulates a leaf's gradient into the external parameter tensor.
    pub fn write_grad_into(&self, v: Var, target: &mut Tensor) {
        target.accumulate_grad(&self.grads[v.0]);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *o += s;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut out[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

fn gelu_val(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row softmax under an additive bias. Fails when every cell is masked.
fn softmax_row_with_bias(logits: &[f64], bias: &[f64], out: &mut [f64]) -> Result<(), ()> {
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (x, b) in logits.iter().zip(bias) {
        if *b > MASK_THRESHOLD {
            any = true;
            let v = x + b;
            if v > max {
                max = v;
            }
        }
    }
    if !any {
        return Err(());
    }
    let mut sum = 0.0;
    for ((x, b), o) in logits.iter().zip(bias).zip(out.iter_mut()) {
        if *b > MASK_THRESHOLD {
            *o = (x + b - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    for ((_, b), o) in logits.iter().zip(bias).zip(out.iter_mut()) {
        if *b > MASK_THRESHOLD {
            *o /= sum;
        } else {
            // Masked cells are pinned to exactly zero after normalization.
            *o = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::MASK_NEG_INF;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(&t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_checked() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![1, 2], vec![1.0, 2.0]));
        let b = g.leaf(&t(vec![2, 1], vec![3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![2, 3], vec![0.0; 6]));
        let b = g.leaf(&t(vec![2, 2], vec![0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let l = g.leaf(&t(vec![1, 2], vec![0.0, 0.0]));
        let bias = t(vec![1, 2], vec![0.0, 0.0]);
        let p = g.softmax_rows_with_bias(l, &bias).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_mask_forces_exact_zero() {
        let mut g = Graph::new();
        let l = g.leaf(&t(vec![1, 2], vec![5.0, 1.0]));
        let bias = t(vec![1, 2], vec![0.0, MASK_NEG_INF]);
        let p = g.softmax_rows_with_bias(l, &bias).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_reference_values() {
        // ln-space oracle: softmax([1,2,3]) computed independently.
        let mut g = Graph::new();
        let l = g.leaf(&t(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let bias = Tensor::zeros(vec![1, 3]);
        let p = g.softmax_rows_with_bias(l, &bias).unwrap();
        let expect = [0.0900, 0.2447, 0.6652];
        for (got, want) in g.value(p).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_degenerate_row_errors() {
        let mut g = Graph::new();
        let l = g.leaf(&t(vec![1, 2], vec![0.0, 0.0]));
        let bias = t(vec![1, 2], vec![MASK_NEG_INF, MASK_NEG_INF]);
        let err = g.softmax_rows_with_bias(l, &bias).unwrap_err();
        assert!(matches!(err, TensorError::DegenerateRow { row: 0 }));
    }

    #[test]
    fn layer_norm_constant_vector_is_zeroed() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![1, 3], vec![1.0, 1.0, 1.0]));
        let gain = g.leaf(&t(vec![3], vec![1.0, 1.0, 1.0]));
        let shift = g.leaf(&t(vec![3], vec![0.0, 0.0, 0.0]));
        let y = g.layer_norm(x, gain, shift).unwrap();
        for v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![1, 2], vec![1.0, -1.0]));
        let gain = g.leaf(&t(vec![2], vec![1.0, 1.0]));
        let shift = g.leaf(&t(vec![2], vec![0.0, 0.0]));
        let y = g.layer_norm(x, gain, shift).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-6);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_empty_dimension_errors() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(vec![1, 0]));
        let gain = g.leaf(&Tensor::zeros(vec![0]));
        let shift = g.leaf(&Tensor::zeros(vec![0]));
        let err = g.layer_norm(x, gain, shift).unwrap_err();
        assert!(matches!(err, TensorError::EmptyDimension { .. }));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::new();
        let l = g.leaf(&Tensor::zeros(vec![1, 4]));
        let loss = g
            .cross_entropy_next_token(l, &[2], &[false])
            .unwrap();
        assert!((g.value(loss).value() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_one_hot_limit() {
        let mut g = Graph::new();
        let mut data = vec![0.0; 4];
        data[1] = 1e6;
        let l = g.leaf(&t(vec![1, 4], data));
        let loss = g.cross_entropy_next_token(l, &[1], &[false]).unwrap();
        assert!(g.value(loss).value().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        // Independent oracle: direct log-sum-exp per row, summed by hand.
        let rows = 3;
        let v = 5;
        let data: Vec<f64> = (0..rows * v).map(|i| ((i * 37 % 11) as f64) / 3.0 - 1.5).collect();
        let targets = [4usize, 0, 2];
        let mut expect = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            let row = &data[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            expect += lse - row[tgt];
        }
        expect /= rows as f64;

        let mut g = Graph::new();
        let l = g.leaf(&t(vec![rows, v], data));
        let loss = g
            .cross_entropy_next_token(l, &targets, &[false, false, false])
            .unwrap();
        assert!((g.value(loss).value() - expect).abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_all_ignored_errors() {
        let mut g = Graph::new();
        let l = g.leaf(&Tensor::zeros(vec![2, 3]));
        let err = g
            .cross_entropy_next_token(l, &[0, 1], &[true, true])
            .unwrap_err();
        assert!(matches!(err, TensorError::EmptyLoss));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2, 3], vec![0.3; 6]).with_requires_grad());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_is_2x() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![1], vec![3.0]).with_requires_grad());
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2], vec![1.0, 2.0]).with_requires_grad());
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(
                &t(vec![3, 3], (0..9).map(|i| (i as f64).sin()).collect()).with_requires_grad(),
            );
            let w = g.leaf(
                &t(vec![3, 3], (0..9).map(|i| (i as f64).cos()).collect()).with_requires_grad(),
            );
            let y = g.matmul(x, w).unwrap();
            let z = g.gelu(y);
            let loss = g.sum_all(z);
            g.backward(loss).unwrap();
            (g.grad(x).to_vec(), g.grad(w).to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gather_accumulates_duplicate_ids() {
        let mut g = Graph::new();
        let table = g.leaf(&t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_requires_grad());
        let rows = g.gather_rows(table, &[1, 1, 2]).unwrap();
        let s = g.sum_all(rows);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }
}
