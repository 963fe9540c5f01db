//! Reverse-mode differentiation over row-major [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! walks the records in reverse and accumulates vector-Jacobian products.
//! Only the operations the classifier needs are implemented.

use std::sync::Arc;

use super::tensor::{dot, Tensor};
use crate::attention::RopeTable;
use crate::sparsify::{soft_threshold, soft_threshold_backward, soft_threshold_topk, ActivationKind};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Activation(Var, ActivationKind),
    SoftThresholdRows(Var),
    Transpose(Var),
    MeanRows(Var),
    SumRows(Var),
    NormalizeCols(Var, f64),
    Reciprocal(Var, f64),
    RepeatCols(Var, usize),
    SumColGroups(Var, usize),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    Rope(Var, Arc<RopeTable>),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
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

    /// Total floats held by recorded values.
    pub fn activation_floats(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; with `b` a `(out × in)` weight this is a linear layer.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Tensor::from_vec(x.rows(), x.cols(), data).expect("shape");
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        assert_eq!(r.len(), v.cols(), "add_row shape mismatch");
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        assert_eq!(r.len(), v.cols(), "mul_row shape mismatch");
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    /// Multiplies every column of `a` by an `r × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col).data().to_vec();
        let mut v = self.value(a).clone();
        assert_eq!(c.len(), v.rows(), "mul_col shape mismatch");
        for (i, &s) in c.iter().enumerate() {
            for x in v.row_mut(i) {
                *x *= s;
            }
        }
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Elementwise activation. Soft thresholding is handled by [`Tape::soft_threshold_rows`].
    pub fn activation(&mut self, a: Var, kind: ActivationKind) -> Var {
        assert!(kind != ActivationKind::SoftThreshold, "soft threshold is not elementwise");
        let v = self.value(a).map(|x| kind.apply_scalar(x).expect("elementwise"));
        self.push(v, Op::Activation(a, kind))
    }

    /// Simplex projection of each row; with `topk` the projection is restricted
    /// to the row's `k` largest entries.
    pub fn soft_threshold_rows(&mut self, a: Var, topk: Option<usize>) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let projected = match topk {
                Some(k) => soft_threshold_topk(x.row(i), k),
                None => soft_threshold(x.row(i)),
            }
            .expect("finite, non-empty row");
            v.row_mut(i).copy_from_slice(&projected.values);
        }
        self.push(v, Op::SoftThresholdRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Column means, `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = column_sums(x);
        v.scale_assign(1.0 / x.rows() as f64);
        self.push(v, Op::MeanRows(a))
    }

    /// Column sums, `1 × c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = column_sums(self.value(a));
        self.push(v, Op::SumRows(a))
    }

    /// `a_ij / (Σ_i a_ij + eps)`.
    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let sums = column_sums(x);
        let v = Tensor::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / (sums.get(0, j) + eps));
        self.push(v, Op::NormalizeCols(a, eps))
    }

    /// `s / (1 + s·x)`, the derivative of `log(1 + s·x)`.
    pub fn reciprocal(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| s / (1.0 + s * x));
        self.push(v, Op::Reciprocal(a, s))
    }

    /// Repeats each column `p` times: `(r × K) → (r × K·p)`.
    pub fn repeat_cols(&mut self, a: Var, p: usize) -> Var {
        let x = self.value(a);
        let v = Tensor::from_fn(x.rows(), x.cols() * p, |i, j| x.get(i, j / p));
        self.push(v, Op::RepeatCols(a, p))
    }

    /// Sums consecutive groups of `p` columns: `(r × K·p) → (r × K)`.
    pub fn sum_col_groups(&mut self, a: Var, p: usize) -> Var {
        let x = self.value(a);
        let groups = x.cols() / p;
        let v = Tensor::from_fn(x.rows(), groups, |i, k| x.row(i)[k * p..(k + 1) * p].iter().sum());
        self.push(v, Op::SumColGroups(a, p))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with a `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let cols = xv.cols();
        let mut xhat = Tensor::zeros(xv.rows(), cols);
        let mut out = Tensor::zeros(xv.rows(), cols);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..cols {
                let h = (row[j] - mean) * inv;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Rotates row `i` (token at position `i`) by the rotary table.
    pub fn rope(&mut self, a: Var, table: Arc<RopeTable>) -> Var {
        let mut v = self.value(a).clone();
        assert!(v.rows() <= table.max_len(), "sequence longer than rotary table");
        for i in 0..v.rows() {
            table.rotate(v.row_mut(i), i, false);
        }
        self.push(v, Op::Rope(a, table))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "concat_rows shape mismatch");
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let v = Tensor::from_vec(x.rows() + y.rows(), x.cols(), data).expect("shape");
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows, "concat_cols shape mismatch");
            for i in 0..rows {
                v.row_mut(i)[offset..offset + x.cols()].copy_from_slice(x.row(i));
            }
            offset += x.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let v = Tensor::from_vec(len, x.cols(), x.data()[start * x.cols()..(start + len) * x.cols()].to_vec())
            .expect("shape");
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let v = Tensor::from_fn(x.rows(), len, |i, j| x.get(i, start + j));
        self.push(v, Op::SliceCols(a, start))
    }

    /// Softmax cross-entropy of a `1 × C` logit row against `label`; returns a `1 × 1` loss.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let mut probs = self.value(logits).data().to_vec();
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - probs[label];
        softmax_in_place(&mut probs);
        self.push(Tensor::full(1, 1, loss), Op::CrossEntropy { logits, label, probs })
    }

    /// Gradients of the `1 × 1` value `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_bt(val(*b)));
                accumulate(grads, *b, val(*a).matmul_at(g));
            }
            Op::MatMulBt(a, b) => {
                accumulate(grads, *a, g.matmul(val(*b)));
                accumulate(grads, *b, g.matmul_at(val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, zip_map(g, val(*b), |x, y| x * y));
                accumulate(grads, *b, zip_map(g, val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let r = val(*row).data();
                let x = val(*a);
                let ga = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * r[j]);
                let gr = Tensor::from_fn(1, g.cols(), |_, j| (0..g.rows()).map(|i| g.get(i, j) * x.get(i, j)).sum());
                accumulate(grads, *a, ga);
                accumulate(grads, *row, gr);
            }
            Op::MulCol(a, col) => {
                let c = val(*col).data();
                let x = val(*a);
                let ga = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * c[i]);
                let gc = Tensor::from_fn(g.rows(), 1, |i, _| dot(g.row(i), x.row(i)));
                accumulate(grads, *a, ga);
                accumulate(grads, *col, gc);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::Activation(a, kind) => {
                let x = val(*a);
                accumulate(
                    grads,
                    *a,
                    zip_map(g, x, |gv, xv| gv * kind.derivative_scalar(xv).expect("elementwise")),
                );
            }
            Op::SoftThresholdRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    ga.row_mut(i).copy_from_slice(&soft_threshold_backward(y.row(i), g.row(i)));
                }
                accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::MeanRows(a) => {
                let rows = val(*a).rows();
                let s = 1.0 / rows as f64;
                accumulate(grads, *a, Tensor::from_fn(rows, g.cols(), |_, j| g.get(0, j) * s));
            }
            Op::SumRows(a) => {
                let rows = val(*a).rows();
                accumulate(grads, *a, Tensor::from_fn(rows, g.cols(), |_, j| g.get(0, j)));
            }
            Op::NormalizeCols(a, eps) => {
                let x = val(*a);
                let sums = column_sums(x);
                let cross: Vec<f64> = (0..x.cols())
                    .map(|j| (0..x.rows()).map(|i| g.get(i, j) * x.get(i, j)).sum())
                    .collect();
                let ga = Tensor::from_fn(x.rows(), x.cols(), |i, j| {
                    let denom = sums.get(0, j) + eps;
                    g.get(i, j) / denom - cross[j] / (denom * denom)
                });
                accumulate(grads, *a, ga);
            }
            Op::Reciprocal(a, s) => {
                let x = val(*a);
                accumulate(
                    grads,
                    *a,
                    zip_map(g, x, |gv, xv| {
                        let d = 1.0 + s * xv;
                        -gv * s * s / (d * d)
                    }),
                );
            }
            Op::RepeatCols(a, p) => {
                let x = val(*a);
                let ga = Tensor::from_fn(x.rows(), x.cols(), |i, k| g.row(i)[k * p..(k + 1) * p].iter().sum());
                accumulate(grads, *a, ga);
            }
            Op::SumColGroups(a, p) => {
                let x = val(*a);
                accumulate(grads, *a, Tensor::from_fn(x.rows(), x.cols(), |i, j| g.get(i, j / p)));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s = dot(g.row(i), y.row(i));
                    for (j, out) in ga.row_mut(i).iter_mut().enumerate() {
                        *out = y.get(i, j) * (g.get(i, j) - s);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain).data();
                let cols = xhat.cols();
                let mut gx = Tensor::zeros(xhat.rows(), cols);
                let mut ggain = Tensor::zeros(1, cols);
                let mut gbias = Tensor::zeros(1, cols);
                for i in 0..xhat.rows() {
                    let (gr, hr) = (g.row(i), xhat.row(i));
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..cols {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        ggain.data_mut()[j] += gr[j] * hr[j];
                        gbias.data_mut()[j] += gr[j];
                    }
                    let n = cols as f64;
                    for j in 0..cols {
                        let dh = gr[j] * gv[j];
                        gx.set(i, j, inv_std[i] / n * (n * dh - sum_dh - hr[j] * sum_dh_h));
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, ggain);
                accumulate(grads, *bias, gbias);
            }
            Op::Rope(a, table) => {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    table.rotate(ga.row_mut(i), i, true);
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(a, b) => {
                let ra = val(*a).rows();
                let cols = g.cols();
                let ga = Tensor::from_vec(ra, cols, g.data()[..ra * cols].to_vec()).expect("shape");
                let gb = Tensor::from_vec(g.rows() - ra, cols, g.data()[ra * cols..].to_vec()).expect("shape");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let gp = Tensor::from_fn(g.rows(), c, |i, j| g.get(i, offset + j));
                    accumulate(grads, p, gp);
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                let cols = x.cols();
                ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for i in 0..g.rows() {
                    ga.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let s = g.get(0, 0);
                let mut gl = probs.clone();
                gl[*label] -= 1.0;
                for v in &mut gl {
                    *v *= s;
                }
                accumulate(grads, *logits, Tensor::from_vec(1, gl.len(), gl).expect("shape"));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shape")
}

fn column_sums(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, x.cols());
    for i in 0..x.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at every entry of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            g.data_mut()[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        diff / a.norm().max(b.norm()).max(1e-12)
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Builds a scalar from `x` through `build`, checks the tape gradient against differences.
    fn check(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let scalarize = |t: &mut Tape, v: Var| {
            let val = t.value(v).clone();
            let weights = t.leaf(sample(val.rows(), val.cols(), 99));
            let prod = t.mul(v, weights);
            let s = t.sum_rows(prod);
            let ones = t.leaf(Tensor::full(s_cols(t, s), 1, 1.0));
            t.matmul(s, ones)
        };
        fn s_cols(t: &Tape, v: Var) -> usize {
            t.value(v).cols()
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = build(&mut tape, xv);
        let root = scalarize(&mut tape, out);
        let mut grads = tape.backward(root);
        let analytic = grads.take_or_zeros(xv, x.shape());
        let numeric = numeric_grad(&x, |p| {
            let mut t = Tape::new();
            let v = t.leaf(p.clone());
            let o = build(&mut t, v);
            let r = scalarize(&mut t, o);
            t.value(r).get(0, 0)
        });
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn elementwise_and_reduction_ops() {
        let x = sample(4, 6, 1);
        check(x.clone(), |t, v| t.activation(v, ActivationKind::Sigmoid));
        check(x.clone(), |t, v| t.activation(v, ActivationKind::Gelu));
        check(x.clone(), |t, v| t.softmax_rows(v));
        check(x.clone(), |t, v| t.mean_rows(v));
        check(x.clone(), |t, v| t.transpose(v));
        check(x.clone(), |t, v| t.repeat_cols(v, 3));
        check(x.clone(), |t, v| t.sum_col_groups(v, 2));
        check(x.map(|v| v.abs() + 0.1), |t, v| t.normalize_cols(v, 1e-8));
        check(x.map(|v| v.abs()), |t, v| t.reciprocal(v, 2.5));
        check(x.clone(), |t, v| {
            let sq = t.mul(v, v);
            t.scale(sq, -0.5)
        });
    }

    #[test]
    fn structural_ops() {
        let x = sample(5, 4, 2);
        check(x.clone(), |t, v| {
            let a = t.slice_rows(v, 1, 3);
            let b = t.slice_rows(v, 0, 1);
            t.concat_rows(b, a)
        });
        check(x.clone(), |t, v| {
            let a = t.slice_cols(v, 0, 2);
            let b = t.slice_cols(v, 2, 2);
            t.concat_cols(&[b, a])
        });
        let table = Arc::new(crate::attention::rope_precompute(8, 4).unwrap());
        check(x.clone(), move |t, v| t.rope(v, table.clone()));
    }

    #[test]
    fn linear_and_norm_ops() {
        let x = sample(3, 4, 3);
        let w = sample(5, 4, 4);
        check(x.clone(), |t, v| {
            let wv = t.leaf(w.clone());
            t.matmul_bt(v, wv)
        });
        check(w.clone(), |t, v| {
            let xv = t.leaf(x.clone());
            t.matmul_bt(xv, v)
        });
        check(x.clone(), |t, v| {
            let wv = t.leaf(w.transpose());
            t.matmul(v, wv)
        });
        let row = sample(1, 4, 5);
        check(x.clone(), |t, v| {
            let r = t.leaf(row.clone());
            let a = t.add_row(v, r);
            t.mul_row(a, r)
        });
        check(row.clone(), |t, v| {
            let xv = t.leaf(x.clone());
            let a = t.add_row(xv, v);
            t.mul_row(a, v)
        });
        let col = sample(3, 1, 6);
        check(col, |t, v| {
            let xv = t.leaf(x.clone());
            t.mul_col(xv, v)
        });
        check(x.clone(), |t, v| {
            let g = t.leaf(Tensor::from_fn(1, 4, |_, j| 1.0 + 0.1 * j as f64));
            let b = t.leaf(Tensor::from_fn(1, 4, |_, j| 0.05 * j as f64));
            t.layer_norm(v, g, b, 1e-5)
        });
    }

    #[test]
    fn soft_threshold_active_set_jacobian() {
        let x = Tensor::from_vec(2, 4, vec![0.9, 0.8, 0.1, 0.05, 0.3, 0.35, 0.2, 0.1]).unwrap();
        check(x.clone(), |t, v| t.soft_threshold_rows(v, None));
        check(x, |t, v| t.soft_threshold_rows(v, Some(2)));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = Tensor::from_vec(1, 3, vec![0.2, -1.0, 2.0]).unwrap();
        let mut t = Tape::new();
        let l = t.leaf(logits.clone());
        let loss = t.cross_entropy(l, 1);
        let mut g = t.backward(loss);
        let grad = g.take_or_zeros(l, (1, 3));
        let mut p = logits.data().to_vec();
        softmax_in_place(&mut p);
        p[1] -= 1.0;
        for (a, b) in grad.data().iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
