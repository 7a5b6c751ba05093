//! Named parameter tensors and their gradient accumulators.

use crate::tensor::Mat;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Embedding tables are looked up row-wise and only the rows a batch touches
/// are weight-decayed. Row 0 of every table is the padding row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Embedding,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Mat,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

pub const INIT_STD: f64 = 0.02;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Mat) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter name {name}");
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    /// Adds a tensor drawn from N(0, std²). Embedding tables get a zero padding row.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, kind: ParamKind, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let mut m = Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect());
        if kind == ParamKind::Embedding && rows > 0 {
            m.row_mut(0).fill(0.0);
        }
        self.add(name, kind, m)
    }

    /// Adds a square `scale·I + N(0, std²)` matrix.
    pub fn add_identity_normal<R: Rng>(&mut self, name: impl Into<String>, n: usize, scale: f64, std: f64, rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let mut m = Mat::from_vec(n, n, (0..n * n).map(|_| normal.sample(rng)).collect());
        for i in 0..n {
            m.set(i, i, m.get(i, i) + scale);
        }
        self.add(name, ParamKind::Dense, m)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    /// Same names, kinds and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.shape() == b.value.shape())
    }

    pub fn zeros_like(&self) -> GradStore {
        GradStore {
            grads: self.params.iter().map(|p| Mat::zeros(p.value.rows(), p.value.cols())).collect(),
            touched: self.params.iter().map(|_| BTreeSet::new()).collect(),
        }
    }
}

/// Dense gradient buffers plus the set of embedding rows each table received
/// gradient through.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    grads: Vec<Mat>,
    touched: Vec<BTreeSet<usize>>,
}

impl GradStore {
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.grads[id.0]
    }

    pub fn add_dense(&mut self, id: ParamId, g: &Mat) {
        self.grads[id.0].add_assign(g);
    }

    pub fn add_rows(&mut self, id: ParamId, rows: &[usize], g: &Mat) {
        let target = &mut self.grads[id.0];
        for (k, &r) in rows.iter().enumerate() {
            for (t, v) in target.row_mut(r).iter_mut().zip(g.row(k)) {
                *t += v;
            }
            self.touched[id.0].insert(r);
        }
    }

    pub fn touched(&self, id: ParamId) -> &BTreeSet<usize> {
        &self.touched[id.0]
    }

    pub fn mark_touched(&mut self, id: ParamId, row: usize) {
        self.touched[id.0].insert(row);
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn merge(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
        for (a, b) in self.touched.iter_mut().zip(&other.touched) {
            a.extend(b.iter().copied());
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Mat::sum_squares).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_padding_row_starts_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.add_normal("items", ParamKind::Embedding, 5, 3, INIT_STD, &mut rng);
        assert!(store.get(id).row(0).iter().all(|&v| v == 0.0));
        assert!(store.get(id).row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn row_gradients_record_touched_rows() {
        let mut store = ParamStore::new();
        let id = store.add("t", ParamKind::Embedding, Mat::zeros(4, 2));
        let mut g = store.zeros_like();
        g.add_rows(id, &[3, 1, 3], &Mat::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![1.0, 0.0]]));
        assert_eq!(g.get(id).row(3), &[2.0, 1.0]);
        assert_eq!(g.touched(id).iter().copied().collect::<Vec<_>>(), vec![1, 3]);
    }
}
