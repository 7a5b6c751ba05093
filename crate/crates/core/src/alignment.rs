//! Query-item alignment: a bilinear tanh similarity and the two InfoNCE
//! directions (query→item over sampled items, item→query over sampled queries).

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, INIT_STD};
use crate::tensor::Mat;
use rand::Rng;

pub const MIN_TAU: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub w_a: ParamId,
    pub tau: ParamId,
}

/// Per-example inputs to the alignment loss: projected query and clicked-item
/// rows for every (query, clicked item) pair, plus the sampled negatives.
pub struct AlignInputs {
    /// `P x d`, the query of each pair
    pub queries: Var,
    /// `P x d`, the clicked item of each pair
    pub items: Var,
    /// `K x d`
    pub neg_items: Var,
    /// `K x d`
    pub neg_queries: Var,
    /// `P x K` row-major; false where a sampled item equals the pair's item
    pub neg_item_mask: Option<Vec<bool>>,
    /// `P x K` row-major; false where a sampled query equals the pair's query
    pub neg_query_mask: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug)]
pub struct AlignVars {
    pub q2i: Var,
    pub i2q: Var,
    pub loss: Var,
}

impl Alignment {
    pub fn new<R: Rng>(d: usize, tau_init: f64, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            w_a: store.add_identity_normal("align.w_a", d, 1.0, INIT_STD, rng),
            tau: store.add("align.tau", ParamKind::Dense, Mat::scalar(tau_init.max(MIN_TAU))),
        }
    }

    pub fn loss(&self, g: &mut Graph, inputs: &AlignInputs) -> AlignVars {
        let w_a = g.param(self.w_a);
        let tau = g.param(self.tau);
        align_vars(g, w_a, tau, inputs)
    }

    /// Keeps the temperature positive after an update.
    pub fn clamp_tau(&self, store: &mut ParamStore) {
        let t = store.get_mut(self.tau);
        t.data_mut()[0] = t.data()[0].max(MIN_TAU);
    }
}

/// `tanh(p W_A qᵀ)` for every row of `p` against every row of `q`.
pub fn similarity_matrix(g: &mut Graph, p: Var, w_a: Var, q: Var) -> Var {
    let pw = g.matmul(p, w_a);
    let s = g.matmul_t(pw, q);
    g.tanh(s)
}

/// `tanh(p_k W_A q_k)` for paired rows; `P x 1`.
pub fn paired_similarity(g: &mut Graph, p: Var, w_a: Var, q: Var) -> Var {
    let pw = g.matmul(p, w_a);
    let s = g.row_dot(pw, q);
    g.tanh(s)
}

/// Mean over rows of `−log(exp(pos/τ) / (exp(pos/τ) + Σ exp(neg/τ)))`.
pub fn infonce(g: &mut Graph, pos: Var, neg: Var, tau: Var, neg_mask: Option<Vec<bool>>) -> Var {
    let (p, k) = g.shape(neg);
    let inv = g.recip(tau);
    let logits = g.concat_cols(&[pos, neg]);
    let logits = g.mul_scalar(logits, inv);
    let mask = neg_mask.map(|m| {
        let mut full = Vec::with_capacity(p * (k + 1));
        for r in 0..p {
            full.push(true);
            full.extend_from_slice(&m[r * k..(r + 1) * k]);
        }
        full
    });
    let lse = g.logsumexp_rows(logits, mask);
    let pos_scaled = g.mul_scalar(pos, inv);
    let per_pair = g.sub(lse, pos_scaled);
    g.mean(per_pair)
}

pub fn align_vars(g: &mut Graph, w_a: Var, tau: Var, x: &AlignInputs) -> AlignVars {
    let pos = paired_similarity(g, x.queries, w_a, x.items);
    let neg_i = similarity_matrix(g, x.queries, w_a, x.neg_items);
    let q2i = infonce(g, pos, neg_i, tau, x.neg_item_mask.clone());
    // s(q_f, i_k) for sampled queries f: rows are pairs
    let qw = g.matmul(x.neg_queries, w_a);
    let neg_q = g.matmul_t(x.items, qw);
    let neg_q = g.tanh(neg_q);
    let i2q = infonce(g, pos, neg_q, tau, x.neg_query_mask.clone());
    let sum = g.add(q2i, i2q);
    let loss = g.scale(sum, 0.5);
    AlignVars { q2i, i2q, loss }
}

fn width_check(op: &'static str, w_a: &Mat, mats: &[&Mat]) -> Result<()> {
    let d = w_a.rows();
    if w_a.cols() != d {
        return Err(Error::shape(op, "square W_A", format!("{:?}", w_a.shape())));
    }
    for m in mats {
        if m.cols() != d {
            return Err(Error::shape(op, format!("width {d}"), format!("width {}", m.cols())));
        }
    }
    Ok(())
}

/// `s(p, q) = tanh(pᵀ W_A q)`.
pub fn pair_similarity(w_a: &Mat, p: &[f64], q: &[f64]) -> Result<f64> {
    let (pm, qm) = (Mat::row_vector(p), Mat::row_vector(q));
    width_check("pair_similarity", w_a, &[&pm, &qm])?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (pv, wv, qv) = (g.constant(pm), g.constant(w_a.clone()), g.constant(qm));
    let s = paired_similarity(&mut g, pv, wv, qv);
    Ok(g.scalar(s))
}

fn pairs_checked(op: &'static str, n_rows: usize, pairing: &[usize]) -> Result<()> {
    if let Some(&j) = pairing.iter().find(|&&j| j >= n_rows) {
        return Err(Error::Invalid(format!("{op}: pair refers to row {j} of {n_rows}")));
    }
    Ok(())
}

/// Query→item InfoNCE. `pairing[k]` is the query row owning clicked item row `k`.
/// Returns 0 for an empty pair set.
pub fn infonce_q2i(w_a: &Mat, tau: f64, queries: &Mat, items: &Mat, pairing: &[usize], neg_items: &Mat) -> Result<f64> {
    directional(true, w_a, tau, queries, items, pairing, neg_items)
}

/// Item→query InfoNCE over sampled queries.
pub fn infonce_i2q(w_a: &Mat, tau: f64, queries: &Mat, items: &Mat, pairing: &[usize], neg_queries: &Mat) -> Result<f64> {
    directional(false, w_a, tau, queries, items, pairing, neg_queries)
}

fn directional(q2i: bool, w_a: &Mat, tau: f64, queries: &Mat, items: &Mat, pairing: &[usize], negs: &Mat) -> Result<f64> {
    let op = if q2i { "infonce_q2i" } else { "infonce_i2q" };
    width_check(op, w_a, &[queries, items, negs])?;
    if negs.rows() == 0 {
        return Err(Error::Invalid(format!("{op}: empty negative set")));
    }
    if pairing.len() != items.rows() {
        return Err(Error::shape(op, format!("{} pair owners", items.rows()), pairing.len()));
    }
    pairs_checked(op, queries.rows(), pairing)?;
    if tau <= 0.0 {
        return Err(Error::Invalid(format!("{op}: temperature must be positive")));
    }
    if pairing.is_empty() {
        log::warn!("{op}: no query-item pairs, loss is 0");
        return Ok(0.0);
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let q = g.constant(queries.select_rows(pairing));
    let i = g.constant(items.clone());
    let n = g.constant(negs.clone());
    let w = g.constant(w_a.clone());
    let t = g.constant(Mat::scalar(tau));
    let pos = paired_similarity(&mut g, q, w, i);
    let neg = if q2i {
        similarity_matrix(&mut g, q, w, n)
    } else {
        let nw = g.matmul(n, w);
        let s = g.matmul_t(i, nw);
        g.tanh(s)
    };
    let l = infonce(&mut g, pos, neg, t, None);
    Ok(g.scalar(l))
}

/// `(q2i + i2q) / 2`.
pub fn align_loss(q2i: f64, i2q: f64) -> f64 {
    (q2i + i2q) / 2.0
}
