//! Candidate-conditioned interest extraction, the prediction MLP and the
//! per-example objective pieces.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, INIT_STD};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.001, lambda: 1e-6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.lambda].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterestHead {
    pub w_d_rec: ParamId,
    pub w_d_search: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub multi_interest: bool,
    pub d: usize,
    pub d_item: usize,
}

impl InterestHead {
    pub fn new<R: Rng>(d: usize, d_item: usize, d_user: usize, hidden: usize, multi_interest: bool, store: &mut ParamStore, rng: &mut R) -> Self {
        let per = if multi_interest { 3 * d } else { d };
        let input = 2 * per + d_item + d_user;
        let dense = ParamKind::Dense;
        Self {
            w_d_rec: store.add_normal("head.w_d_rec", dense, d, d_item, INIT_STD, rng),
            w_d_search: store.add_normal("head.w_d_search", dense, d, d_item, INIT_STD, rng),
            w1: store.add_normal("head.mlp.w1", dense, input, hidden, INIT_STD, rng),
            b1: store.add("head.mlp.b1", dense, Mat::zeros(1, hidden)),
            w2: store.add_normal("head.mlp.w2", dense, hidden, 1, INIT_STD, rng),
            b2: store.add("head.mlp.b2", dense, Mat::zeros(1, 1)),
            multi_interest,
            d,
            d_item,
        }
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.get(self.w1).rows()
    }

    /// Interest rows for every candidate: `C x 3d` (or `C x d` without MIE).
    pub fn interests(&self, g: &mut Graph, h: Var, real: &[bool], sets: Option<(&[usize], &[usize])>, cands: Var, rec_side: bool) -> Var {
        let w_d = g.param(if rec_side { self.w_d_rec } else { self.w_d_search });
        let all = target_attention(g, h, real, cands, w_d);
        match (self.multi_interest, sets) {
            (true, Some((p, n))) => {
                let t = real.len();
                let sim = target_attention(g, h, &index_mask(t, p), cands, w_d);
                let diff = target_attention(g, h, &index_mask(t, n), cands, w_d);
                g.concat_cols(&[all, sim, diff])
            }
            (true, None) => panic!("multi-interest head needs P/N sets"),
            (false, _) => all,
        }
    }

    /// `sigmoid(MLP(u_r ‖ u_s ‖ e_v ‖ e_u))`, one probability per candidate row.
    pub fn predict(&self, g: &mut Graph, u_r: Var, u_s: Var, cands: Var, user: Var) -> Var {
        let c = g.shape(cands).0;
        let eu = g.broadcast_rows(user, c);
        let x = g.concat_cols(&[u_r, u_s, cands, eu]);
        mlp(g, x, self.w1, self.b1, self.w2, self.b2)
    }
}

fn mlp(g: &mut Graph, x: Var, w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId) -> Var {
    let (w1, b1, w2, b2) = (g.param(w1), g.param(b1), g.param(w2), g.param(b2));
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.relu(h);
    let o = g.matmul(h, w2);
    let o = g.add_row(o, b2);
    g.sigmoid(o)
}

pub fn index_mask(t: usize, idx: &[usize]) -> Vec<bool> {
    let mut m = vec![false; t];
    for &j in idx {
        m[j] = true;
    }
    m
}

/// `Σ_{j∈S} softmax_S(h_jᵀ W_d e_v) h_j` for each candidate row of `cands`
/// (`C x d_i`); `set` marks `S`. An empty `S` yields zero rows.
pub fn target_attention(g: &mut Graph, h: Var, set: &[bool], cands: Var, w_d: Var) -> Var {
    let c = g.shape(cands).0;
    let ew = g.matmul_t(cands, w_d);
    let logits = g.matmul_t(ew, h);
    let mask: Vec<bool> = (0..c).flat_map(|_| set.iter().copied()).collect();
    let p = g.softmax_rows(logits, Some(&mask));
    g.matmul(p, h)
}

// ---- value-level operations ----

fn check_attention(h: &Mat, e_v: &[f64], w_d: &Mat) -> Result<()> {
    if w_d.shape() != (h.cols(), e_v.len()) {
        return Err(Error::shape("target_attention", format!("W_d {}x{}", h.cols(), e_v.len()), format!("{:?}", w_d.shape())));
    }
    Ok(())
}

pub fn target_attention_values(h: &Mat, set: &[usize], e_v: &[f64], w_d: &Mat) -> Result<Vec<f64>> {
    check_attention(h, e_v, w_d)?;
    if set.is_empty() {
        return Err(Error::Invalid("target attention over an empty set".into()));
    }
    if let Some(&j) = set.iter().find(|&&j| j >= h.rows()) {
        return Err(Error::Invalid(format!("target attention index {j} outside {} rows", h.rows())));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (hv, cv, wv) = (g.constant(h.clone()), g.constant(Mat::row_vector(e_v)), g.constant(w_d.clone()));
    let u = target_attention(&mut g, hv, &index_mask(h.rows(), set), cv, wv);
    Ok(g.value(u).row(0).to_vec())
}

/// `u_all ‖ u_sim ‖ u_diff`; an empty `N` gives a zero `u_diff`.
pub fn extract_interests(h: &Mat, full: &[usize], p: &[usize], n: &[usize], e_v: &[f64], w_d: &Mat) -> Result<Vec<f64>> {
    let mut out = target_attention_values(h, full, e_v, w_d)?;
    out.extend(target_attention_values(h, p, e_v, w_d)?);
    if n.is_empty() {
        out.extend(std::iter::repeat_n(0.0, h.cols()));
    } else {
        out.extend(target_attention_values(h, n, e_v, w_d)?);
    }
    Ok(out)
}

/// Two-layer MLP with a sigmoid output, given explicit weights.
pub fn predict_values(u_r: &[f64], u_s: &[f64], e_v: &[f64], e_u: &[f64], w1: &Mat, b1: &[f64], w2: &Mat, b2: f64) -> Result<f64> {
    let width = u_r.len() + u_s.len() + e_v.len() + e_u.len();
    if w1.rows() != width || b1.len() != w1.cols() || w2.shape() != (w1.cols(), 1) {
        return Err(Error::shape("predict", format!("W1 with {width} rows"), format!("W1 {:?}, b1 {}, W2 {:?}", w1.shape(), b1.len(), w2.shape())));
    }
    let mut store = ParamStore::new();
    let ids = (
        store.add("w1", ParamKind::Dense, w1.clone()),
        store.add("b1", ParamKind::Dense, Mat::row_vector(b1)),
        store.add("w2", ParamKind::Dense, w2.clone()),
        store.add("b2", ParamKind::Dense, Mat::scalar(b2)),
    );
    let mut x = u_r.to_vec();
    x.extend_from_slice(u_s);
    x.extend_from_slice(e_v);
    x.extend_from_slice(e_u);
    let mut g = Graph::new(&store);
    let xv = g.constant(Mat::row_vector(&x));
    let y = mlp(&mut g, xv, ids.0, ids.1, ids.2, ids.3);
    Ok(g.scalar(y))
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn rec_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("rec_loss", "equal, non-zero score and label counts", format!("{} vs {}", scores.len(), labels.len())));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let p = g.constant(Mat::from_vec(scores.len(), 1, scores.to_vec()));
    let l = g.bce_mean(p, labels, BCE_EPS);
    Ok(g.scalar(l))
}

/// `L_rec + α L_ali + β L_con + λ Σθ²`, given the squared-norm sum.
pub fn total_loss(rec: f64, ali: f64, con: f64, squared_norm: f64, w: &LossWeights) -> f64 {
    rec + w.alpha * ali + w.beta * con + w.lambda * squared_norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        let n = Normal::new(0.0, 1.0).unwrap();
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect())
    }

    fn oracle(h: &Mat, set: &[usize], e: &[f64], w: &Mat) -> Vec<f64> {
        let logit = |j: usize| (0..h.cols()).map(|a| h.get(j, a) * (0..e.len()).map(|b| w.get(a, b) * e[b]).sum::<f64>()).sum::<f64>();
        let z: f64 = set.iter().map(|&j| logit(j).exp()).sum();
        (0..h.cols()).map(|c| set.iter().map(|&j| logit(j).exp() / z * h.get(j, c)).sum()).collect()
    }

    #[test]
    fn target_attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random(3, 4, &mut rng);
        let w = random(4, 5, &mut rng);
        let e = random(1, 5, &mut rng);
        assert_eq!(target_attention_values(&h, &[1], e.row(0), &w).unwrap(), h.row(1).to_vec());
        let got = target_attention_values(&h, &[0, 1, 2], e.row(0), &w).unwrap();
        for (a, b) in got.iter().zip(oracle(&h, &[0, 1, 2], e.row(0), &w)) {
            assert!((a - b).abs() < 1e-12);
        }
        let same = Mat::from_rows(&[h.row(0).to_vec(), h.row(0).to_vec()]);
        let u = target_attention_values(&same, &[0, 1], e.row(0), &w).unwrap();
        for (a, b) in u.iter().zip(h.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(target_attention_values(&h, &[], e.row(0), &w).is_err());
        assert!(target_attention_values(&h, &[0], &[1.0], &w).is_err());
    }

    #[test]
    fn interest_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = random(4, 3, &mut rng);
        let w = random(3, 2, &mut rng);
        let e = [0.4, -0.9];
        let u = extract_interests(&h, &[0, 1, 2, 3], &[0, 1, 2, 3], &[0, 1, 2, 3], &e, &w).unwrap();
        assert_eq!(u.len(), 9);
        assert_eq!(u[0..3], u[3..6]);
        assert_eq!(u[0..3], u[6..9]);
        let u = extract_interests(&h, &[0, 1, 2, 3], &[1, 3], &[], &e, &w).unwrap();
        assert!(u[6..].iter().all(|&x| x == 0.0));
        let expect = [oracle(&h, &[0, 1, 2, 3], &e, &w), oracle(&h, &[1, 3], &e, &w)].concat();
        for (a, b) in u[..6].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_cases() {
        let (w1, w2) = (Mat::zeros(5, 3), Mat::zeros(3, 1));
        assert_eq!(predict_values(&[1.0], &[2.0], &[3.0, 4.0], &[5.0], &w1, &[0.0; 3], &w2, 0.0).unwrap(), 0.5);
        let lo = predict_values(&[1.0], &[2.0], &[3.0, 4.0], &[5.0], &w1, &[0.0; 3], &w2, 0.1).unwrap();
        let hi = predict_values(&[1.0], &[2.0], &[3.0, 4.0], &[5.0], &w1, &[0.0; 3], &w2, 0.2).unwrap();
        assert!(hi > lo);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w1, b1, w2) = (random(5, 3, &mut rng), random(1, 3, &mut rng), random(3, 1, &mut rng));
        let x = [0.3, -0.2, 0.8, 0.1, -0.5];
        let hidden: Vec<f64> = (0..3).map(|j| ((0..5).map(|i| x[i] * w1.get(i, j)).sum::<f64>() + b1.get(0, j)).max(0.0)).collect();
        let out = sigmoid((0..3).map(|j| hidden[j] * w2.get(j, 0)).sum::<f64>() + 0.7);
        let got = predict_values(&x[..1], &x[1..2], &x[2..4], &x[4..], &w1, b1.row(0), &w2, 0.7).unwrap();
        assert!((got - out).abs() < 1e-12);
        assert!(predict_values(&x, &[], &[], &[], &Mat::zeros(4, 3), &[0.0; 3], &w2, 0.0).is_err());
    }

    #[test]
    fn rec_loss_cases() {
        assert!((rec_loss(&[0.5], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(rec_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
        let scores = [0.9, 0.2, 0.35, 0.05, 0.6];
        let labels = [1.0, 0.0, 0.0, 0.0, 0.0];
        let hand = -(0.9f64.ln() + 0.8f64.ln() + 0.65f64.ln() + 0.95f64.ln() + 0.4f64.ln()) / 5.0;
        assert!((rec_loss(&scores, &labels).unwrap() - hand).abs() < 1e-12);
        assert!(rec_loss(&scores, &labels[..2]).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let zero = LossWeights { alpha: 0.0, beta: 0.0, lambda: 0.0 };
        assert_eq!(total_loss(0.7, 5.0, 9.0, 100.0, &zero), 0.7);
        assert_eq!(total_loss(0.7, 2.5, 9.0, 100.0, &LossWeights { alpha: 1.0, ..zero }), 3.2);
        let w = LossWeights::default();
        assert!((total_loss(0.5, 2.0, 3.0, 10.0, &w) - (0.5 + 0.2 + 0.003 + 1e-5)).abs() < 1e-15);
        assert!(LossWeights { alpha: -1.0, ..w }.validate().is_err());
    }
}
