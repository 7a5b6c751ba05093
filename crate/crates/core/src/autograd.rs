//! A small tape-based reverse-mode differentiator over [`Mat`] values.
//!
//! A [`Graph`] is built fresh for every training example: each op evaluates
//! eagerly and records enough to push gradients back. [`Graph::backward`]
//! walks the tape in reverse and deposits parameter gradients into a
//! [`GradStore`]. Ops panic on shape mismatches; callers that take outside
//! input validate shapes before building the graph.

use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{dot, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Recip(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var, Option<Vec<bool>>),
    Normalize(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    MaskRows(Var, Vec<bool>),
    RowDot(Var, Var),
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
    Norm(Var),
    BceMean(Var, Vec<f64>, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- leaves ----

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Rows of an embedding table.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let value = self.params.get(id).select_rows(rows);
        self.push(value, Op::Gather(id, rows.to_vec()))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + 1·b` where `b` is a single row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(bm.rows(), 1, "add_row expects a 1xC bias");
        assert_eq!(am.cols(), bm.cols(), "add_row width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(bm.row(0)) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    /// Elementwise product of every row of `a` with the single row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(bm.rows(), 1, "mul_row expects a 1xC scale");
        assert_eq!(am.cols(), bm.cols(), "mul_row width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(bm.row(0)) {
                *x *= y;
            }
        }
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// `a * s` for a 1x1 variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    // ---- nonlinearities ----

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Row-wise softmax restricted to `mask` (row-major, same shape as `a`).
    /// Masked entries come out exactly zero; a row with nothing allowed is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let v = masked_softmax_rows(self.value(a), mask);
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise log-sum-exp restricted to `mask`; output is Rx1.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let m = self.value(a);
        if let Some(mask) = &mask {
            assert_eq!(mask.len(), m.data().len(), "logsumexp mask shape");
        }
        let mut out = Mat::zeros(m.rows(), 1);
        for r in 0..m.rows() {
            let allowed = |c: usize| mask.as_ref().is_none_or(|mk| mk[r * m.cols() + c]);
            let mx = (0..m.cols()).filter(|&c| allowed(c)).map(|c| m.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            assert!(mx.is_finite(), "logsumexp over an empty or non-finite row");
            let s: f64 = (0..m.cols()).filter(|&c| allowed(c)).map(|c| (m.get(r, c) - mx).exp()).sum();
            out.set(r, 0, mx + s.ln());
        }
        self.push(out, Op::LogSumExpRows(a, mask))
    }

    /// Zero-mean, unit-variance rows (the affine part of layer norm is separate).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let cols = m.cols() as f64;
        let mut out = m.clone();
        let mut inv_std = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::Normalize(a, inv_std))
    }

    // ---- reshaping ----

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start <= end && end <= m.cols(), "slice_cols out of range");
        let mut out = Mat::zeros(m.rows(), end - start);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_rows(idx);
        self.push(v, Op::SelectRows(a, idx.to_vec()))
    }

    /// Zeroes rows whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(mask.len(), v.rows(), "mask_rows length");
        for (r, &keep) in mask.iter().enumerate() {
            if !keep {
                v.row_mut(r).fill(0.0);
            }
        }
        self.push(v, Op::MaskRows(a, mask.to_vec()))
    }

    /// Per-row dot products of two equally shaped matrices; output is Rx1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "row_dot shape mismatch");
        let v = Mat::from_vec(am.rows(), 1, (0..am.rows()).map(|r| dot(am.row(r), bm.row(r))).collect());
        self.push(v, Op::RowDot(a, b))
    }

    /// Repeats a 1xC row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), 1, "broadcast_rows expects a single row");
        let mut data = Vec::with_capacity(n * m.cols());
        for _ in 0..n {
            data.extend_from_slice(m.row(0));
        }
        let v = Mat::from_vec(n, m.cols(), data);
        self.push(v, Op::BroadcastRows(a))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::scalar(m.sum() / m.data().len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Frobenius (Euclidean for vectors) norm.
    pub fn norm(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum_squares().sqrt());
        self.push(v, Op::Norm(a))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1-eps]`.
    pub fn bce_mean(&mut self, probs: Var, labels: &[f64], eps: f64) -> Var {
        let p = self.value(probs);
        assert_eq!(p.data().len(), labels.len(), "bce_mean label count");
        let n = labels.len() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(labels)
            .map(|(&q, &y)| {
                let q = q.clamp(eps, 1.0 - eps);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        self.push(Mat::scalar(total / n), Op::BceMean(probs, labels.to_vec(), eps))
    }

    // ---- backward ----

    /// Back-propagates from the scalar `loss`, scaled by `seed`, and adds
    /// parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, seed: f64, grads: &mut GradStore) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut g: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(Mat::scalar(seed));

        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            let val = &node.value;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.add_dense(*id, &gi),
                Op::Gather(id, rows) => grads.add_rows(*id, rows, &gi),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut g, *a, gi.matmul_t(bv));
                    acc(&mut g, *b, av.t_matmul(&gi));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut g, *a, gi.matmul(bv));
                    acc(&mut g, *b, gi.t_matmul(av));
                }
                Op::Transpose(a) => acc(&mut g, *a, gi.transpose()),
                Op::Add(a, b) => {
                    acc(&mut g, *b, gi.clone());
                    acc(&mut g, *a, gi);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, gi.map(|x| -x));
                    acc(&mut g, *a, gi);
                }
                Op::Mul(a, b) => {
                    let ga = gi.zip_map(self.value(*b), |x, y| x * y);
                    let gb = gi.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::AddRow(a, b) => {
                    acc(&mut g, *b, gi.col_sums());
                    acc(&mut g, *a, gi);
                }
                Op::MulRow(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = gi.clone();
                    let mut gb = Mat::zeros(1, bv.cols());
                    for r in 0..ga.rows() {
                        for c in 0..ga.cols() {
                            let d = gi.get(r, c);
                            ga.set(r, c, d * bv.get(0, c));
                            gb.data_mut()[c] += d * av.get(r, c);
                        }
                    }
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut g, *a, gi.map(|x| x * s)),
                Op::MulScalar(a, s) => {
                    let k = self.scalar(*s);
                    let gs = dot(gi.data(), self.value(*a).data());
                    acc(&mut g, *a, gi.map(|x| x * k));
                    acc(&mut g, *s, Mat::scalar(gs));
                }
                Op::Recip(a) => {
                    let ga = gi.zip_map(val, |d, y| -d * y * y);
                    acc(&mut g, *a, ga);
                }
                Op::Tanh(a) => acc(&mut g, *a, gi.zip_map(val, |d, y| d * (1.0 - y * y))),
                Op::Relu(a) => {
                    let ga = gi.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                    acc(&mut g, *a, ga);
                }
                Op::Sigmoid(a) => acc(&mut g, *a, gi.zip_map(val, |d, y| d * y * (1.0 - y))),
                Op::SoftmaxRows(a) => {
                    let mut ga = Mat::zeros(val.rows(), val.cols());
                    for r in 0..val.rows() {
                        let y = val.row(r);
                        let dy = gi.row(r);
                        let inner = dot(y, dy);
                        for (o, (yy, d)) in ga.row_mut(r).iter_mut().zip(y.iter().zip(dy)) {
                            *o = yy * (d - inner);
                        }
                    }
                    acc(&mut g, *a, ga);
                }
                Op::LogSumExpRows(a, mask) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let lse = val.get(r, 0);
                        let d = gi.get(r, 0);
                        for c in 0..x.cols() {
                            if mask.as_ref().is_none_or(|mk| mk[r * x.cols() + c]) {
                                ga.set(r, c, d * (x.get(r, c) - lse).exp());
                            }
                        }
                    }
                    acc(&mut g, *a, ga);
                }
                Op::Normalize(a, inv_std) => {
                    let n = val.cols() as f64;
                    let mut ga = Mat::zeros(val.rows(), val.cols());
                    for r in 0..val.rows() {
                        let y = val.row(r);
                        let dy = gi.row(r);
                        let mean_dy = dy.iter().sum::<f64>() / n;
                        let mean_dy_y = dot(dy, y) / n;
                        for (o, (yy, d)) in ga.row_mut(r).iter_mut().zip(y.iter().zip(dy)) {
                            *o = inv_std[r] * (d - mean_dy - yy * mean_dy_y);
                        }
                    }
                    acc(&mut g, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + gi.cols()].copy_from_slice(gi.row(r));
                    }
                    acc(&mut g, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut gp = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&gi.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut g, p, gp);
                    }
                }
                Op::SelectRows(a, idx) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Mat::zeros(rows, cols);
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, d) in ga.row_mut(r).iter_mut().zip(gi.row(k)) {
                            *o += d;
                        }
                    }
                    acc(&mut g, *a, ga);
                }
                Op::MaskRows(a, mask) => {
                    let mut ga = gi;
                    for (r, &keep) in mask.iter().enumerate() {
                        if !keep {
                            ga.row_mut(r).fill(0.0);
                        }
                    }
                    acc(&mut g, *a, ga);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    let mut gb = Mat::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let d = gi.get(r, 0);
                        for c in 0..av.cols() {
                            ga.set(r, c, d * bv.get(r, c));
                            gb.set(r, c, d * av.get(r, c));
                        }
                    }
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::BroadcastRows(a) => acc(&mut g, *a, gi.col_sums()),
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut g, *a, Mat::filled(rows, cols, gi.item()));
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut g, *a, Mat::filled(rows, cols, gi.item() / (rows * cols) as f64));
                }
                Op::Norm(a) => {
                    let y = val.item();
                    if y > 0.0 {
                        let k = gi.item() / y;
                        acc(&mut g, *a, self.value(*a).map(|x| x * k));
                    }
                }
                Op::BceMean(p, labels, eps) => {
                    let pv = self.value(*p);
                    let n = labels.len() as f64;
                    let d = gi.item();
                    let gp = Mat::from_vec(
                        pv.rows(),
                        pv.cols(),
                        pv.data()
                            .iter()
                            .zip(labels)
                            .map(|(&q, &y)| {
                                if q < *eps || q > 1.0 - eps {
                                    0.0
                                } else {
                                    -d / n * (y / q - (1.0 - y) / (1.0 - q))
                                }
                            })
                            .collect(),
                    );
                    acc(&mut g, *p, gp);
                }
            }
        }
    }
}

fn acc(g: &mut [Option<Mat>], v: Var, delta: Mat) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over each row, restricted to the `true` entries of `mask`.
pub fn masked_softmax_rows(m: &Mat, mask: Option<&[bool]>) -> Mat {
    if let Some(mask) = mask {
        assert_eq!(mask.len(), m.data().len(), "softmax mask shape");
    }
    let cols = m.cols();
    let mut out = Mat::zeros(m.rows(), cols);
    for r in 0..m.rows() {
        let allowed = |c: usize| mask.is_none_or(|mk| mk[r * cols + c]);
        let mx = (0..cols).filter(|&c| allowed(c)).map(|c| m.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for c in 0..cols {
            if allowed(c) {
                let e = (m.get(r, c) - mx).exp();
                out.set(r, c, e);
                total += e;
            }
        }
        for x in out.row_mut(r) {
            *x /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    /// Central-difference check of d(loss)/d(param) for a graph builder.
    fn check<F>(store: &ParamStore, build: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let mut grads = store.zeros_like();
        {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss, 1.0, &mut grads);
        }
        let h = 1e-6;
        for (id, p) in store.iter() {
            for k in 0..p.value.data().len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[k] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[k] -= h;
                let fp = {
                    let mut g = Graph::new(&plus);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                let fm = {
                    let mut g = Graph::new(&minus);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads.get(id).data()[k];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "{}[{k}]: numeric {numeric} vs analytic {analytic}",
                    p.name
                );
            }
        }
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", ParamKind::Dense, Mat::from_rows(&[vec![0.3, -0.2, 0.5], vec![0.1, 0.4, -0.7]]));
        s.add("b", ParamKind::Dense, Mat::from_rows(&[vec![0.2, -0.1], vec![0.6, 0.3], vec![-0.4, 0.9]]));
        s.add("r", ParamKind::Dense, Mat::from_rows(&[vec![1.2, -0.3, 0.8]]));
        s.add("e", ParamKind::Embedding, Mat::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.5, 0.1, -0.3], vec![-0.2, 0.7, 0.4]]));
        s
    }

    #[test]
    fn gradients_of_linear_ops() {
        let s = store();
        check(&s, |g| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let r = g.param(ParamId(2));
            let ab = g.matmul(a, b);
            let t = g.transpose(ab);
            let abt = g.matmul_t(ab, t);
            let x = g.add_row(a, r);
            let y = g.mul_row(x, r);
            let z = g.sub(y, a);
            let w = g.mul(z, a);
            let s1 = g.sum(w);
            let s2 = g.mean(abt);
            let s3 = g.mul_scalar(s1, s2);
            let rr = g.recip(s2);
            let s4 = g.scale(rr, 0.01);
            g.add(s3, s4)
        });
    }

    #[test]
    fn gradients_of_nonlinear_ops() {
        let s = store();
        let mask = vec![true, false, true, true, true, false];
        check(&s, |g| {
            let a = g.param(ParamId(0));
            let e = g.gather(ParamId(3), &[2, 1, 2]);
            let t = g.tanh(a);
            let sm = g.softmax_rows(t, Some(&mask));
            let lse = g.logsumexp_rows(a, Some(mask.clone()));
            let nr = g.normalize_rows(e);
            let sl = g.slice_cols(nr, 1, 3);
            let cc = g.concat_cols(&[sl, e]);
            let sel = g.select_rows(cc, &[0, 2, 2]);
            let mk = g.mask_rows(sel, &[true, false, true]);
            let rd = g.row_dot(mk, mk);
            let sg = g.sigmoid(rd);
            let bce = g.bce_mean(sg, &[1.0, 0.0, 1.0], 1e-7);
            let relu = g.relu(a);
            let nrm = g.norm(relu);
            let r = g.param(ParamId(2));
            let br = g.broadcast_rows(r, 2);
            let p = g.mul(br, sm);
            let s1 = g.sum(p);
            let s2 = g.sum(lse);
            let x = g.add(s1, s2);
            let y = g.add(x, bce);
            g.add(y, nrm)
        });
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_entries() {
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]);
        let out = masked_softmax_rows(&m, Some(&[true, false, true, false, false, false]));
        assert_eq!(out.get(0, 1), 0.0);
        assert!((out.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.row(1).iter().all(|&v| v == 0.0));
    }
}
