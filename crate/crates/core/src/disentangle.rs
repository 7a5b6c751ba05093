//! Co-attention between the two behavior sequences, hard selection of
//! similar (`P`) and dissimilar (`N`) positions, and the triplet contrast loss.

use crate::autograd::{masked_softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, INIT_STD};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How the selection threshold γ is chosen for a score vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ThresholdStrategy {
    /// `1 / T` over real positions
    Mean,
    Median,
    Constant(f64),
}

impl ThresholdStrategy {
    /// The four strategies compared in the threshold study.
    pub fn study_set() -> [ThresholdStrategy; 4] {
        [Self::Constant(1.0 / 16.0), Self::Constant(1.0 / 8.0), Self::Median, Self::Mean]
    }

    pub fn gamma(&self, real_scores: &[f64]) -> f64 {
        match *self {
            Self::Mean => 1.0 / real_scores.len() as f64,
            Self::Median => {
                let mut s = real_scores.to_vec();
                s.sort_by(f64::total_cmp);
                let n = s.len();
                if n % 2 == 1 {
                    s[n / 2]
                } else {
                    (s[n / 2 - 1] + s[n / 2]) / 2.0
                }
            }
            Self::Constant(c) => c,
        }
    }
}

impl fmt::Display for ThresholdStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mean => write!(f, "mean"),
            Self::Median => write!(f, "median"),
            Self::Constant(c) if (*c - 0.0625).abs() < 1e-15 => write!(f, "1/16"),
            Self::Constant(c) if (*c - 0.125).abs() < 1e-15 => write!(f, "1/8"),
            Self::Constant(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for ThresholdStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "mean" => return Ok(Self::Mean),
            "median" => return Ok(Self::Median),
            _ => {}
        }
        let body = s.strip_prefix("const:").or_else(|| s.strip_prefix("constant:")).unwrap_or(&s);
        let value = match body.split_once('/') {
            Some((a, b)) => {
                let a: f64 = a.trim().parse().map_err(|_| format!("bad threshold {s:?}"))?;
                let b: f64 = b.trim().parse().map_err(|_| format!("bad threshold {s:?}"))?;
                a / b
            }
            None => body.parse().map_err(|_| format!("unknown threshold strategy {s:?}"))?,
        };
        if !(value.is_finite() && value > 0.0) {
            return Err(format!("threshold must be positive, got {s:?}"));
        }
        Ok(Self::Constant(value))
    }
}

/// Similar / dissimilar index sets over the real positions of one sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Disentangle {
    pub w_l: ParamId,
    pub w_r: ParamId,
    pub w_s: ParamId,
}

/// Graph handles for one user's co-attention pass.
#[derive(Clone, Debug)]
pub struct DisentangleVars {
    pub affinity: Var,
    pub a_s: Var,
    pub a_r: Var,
    pub part_s: Partition,
    pub part_r: Partition,
}

/// Anchor, positive and (when `N` is non-empty) negative vectors.
#[derive(Clone, Copy, Debug)]
pub struct ContrastVars {
    pub anchor: Var,
    pub positive: Var,
    pub negative: Option<Var>,
}

impl Disentangle {
    pub fn new<R: Rng>(d: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            w_l: store.add_identity_normal("dis.w_l", d, 1.0 / d as f64, INIT_STD, rng),
            w_r: store.add_normal("dis.w_r", ParamKind::Dense, 1, d, INIT_STD, rng),
            w_s: store.add_normal("dis.w_s", ParamKind::Dense, 1, d, INIT_STD, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, h_s: Var, h_r: Var, s_mask: &[bool], r_mask: &[bool], strategy: ThresholdStrategy) -> DisentangleVars {
        let w_l = g.param(self.w_l);
        let w_r = g.param(self.w_r);
        let w_s = g.param(self.w_s);
        let affinity = affinity(g, h_s, h_r, w_l, s_mask, r_mask);
        let (a_s, a_r) = similarity_scores(g, affinity, h_s, h_r, w_r, w_s, s_mask, r_mask);
        let part_s = select(g.value(a_s).row(0), s_mask, strategy);
        let part_r = select(g.value(a_r).row(0), r_mask, strategy);
        DisentangleVars { affinity, a_s, a_r, part_s, part_r }
    }

    /// `L_con` for a forward pass, with the margin `m`.
    pub fn contrast(&self, g: &mut Graph, h_s: Var, h_r: Var, vars: &DisentangleVars, margin: f64) -> Var {
        let cs = contrast_vectors(g, h_s, vars.a_s, &vars.part_s);
        let cr = contrast_vectors(g, h_r, vars.a_r, &vars.part_r);
        let ts = triplet(g, cs, margin);
        let tr = triplet(g, cr, margin);
        g.add(tr, ts)
    }
}

fn pair_mask(s_mask: &[bool], r_mask: &[bool]) -> Mat {
    let mut m = Mat::zeros(s_mask.len(), r_mask.len());
    for (i, &a) in s_mask.iter().enumerate() {
        for (j, &b) in r_mask.iter().enumerate() {
            if a && b {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

/// `A = tanh(H_s W_l H_rᵀ)` with rows and columns of padded positions zeroed.
pub fn affinity(g: &mut Graph, h_s: Var, h_r: Var, w_l: Var, s_mask: &[bool], r_mask: &[bool]) -> Var {
    let hw = g.matmul(h_s, w_l);
    let raw = g.matmul_t(hw, h_r);
    let a = g.tanh(raw);
    let m = g.constant(pair_mask(s_mask, r_mask));
    g.mul(a, m)
}

/// `a_s = softmax(W_r H_rᵀ Aᵀ)`, `a_r = softmax(W_s H_sᵀ A)`, each `1 x T`,
/// normalized over real positions.
#[allow(clippy::too_many_arguments)]
pub fn similarity_scores(g: &mut Graph, a: Var, h_s: Var, h_r: Var, w_r: Var, w_s: Var, s_mask: &[bool], r_mask: &[bool]) -> (Var, Var) {
    let wr_hr = g.matmul_t(w_r, h_r);
    let logits_s = g.matmul_t(wr_hr, a);
    let a_s = g.softmax_rows(logits_s, Some(s_mask));
    let ws_hs = g.matmul_t(w_s, h_s);
    let logits_r = g.matmul(ws_hs, a);
    let a_r = g.softmax_rows(logits_r, Some(r_mask));
    (a_s, a_r)
}

fn select(scores: &[f64], mask: &[bool], strategy: ThresholdStrategy) -> Partition {
    let real: Vec<f64> = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(&s, _)| s).collect();
    hard_select(scores, mask, strategy.gamma(&real))
}

/// `P = {j : a_j > γ}`, `N = {j : a_j ≤ γ}` over real positions, then the
/// fallback: an empty `P` takes the argmax, an empty `N` (with at least two
/// real positions) takes the argmin. Ties go to the lowest index.
pub fn hard_select(a: &[f64], mask: &[bool], gamma: f64) -> Partition {
    assert_eq!(a.len(), mask.len(), "hard_select mask length");
    let real: Vec<usize> = (0..a.len()).filter(|&j| mask[j]).collect();
    let (mut positive, mut negative): (Vec<usize>, Vec<usize>) = real.iter().copied().partition(|&j| a[j] > gamma);
    if real.is_empty() {
        return Partition::default();
    }
    if positive.is_empty() {
        let best = real.iter().copied().fold(real[0], |b, j| if a[j] > a[b] { j } else { b });
        negative.retain(|&j| j != best);
        positive.push(best);
    }
    if negative.is_empty() && real.len() >= 2 {
        let worst = real.iter().copied().fold(real[0], |b, j| if a[j] < a[b] { j } else { b });
        positive.retain(|&j| j != worst);
        negative.push(worst);
    }
    Partition { positive, negative }
}

fn selection_row(t: usize, idx: &[usize]) -> Mat {
    let mut m = Mat::zeros(1, t);
    for &j in idx {
        m.set(0, j, 1.0 / idx.len() as f64);
    }
    m
}

/// Anchor `Σ a_j h_j`, positive `mean(P)`, negative `mean(N)` (absent when `N` is empty).
pub fn contrast_vectors(g: &mut Graph, h: Var, a: Var, part: &Partition) -> ContrastVars {
    let t = g.shape(h).0;
    let anchor = g.matmul(a, h);
    let sel_p = g.constant(selection_row(t, &part.positive));
    let positive = g.matmul(sel_p, h);
    let negative = (!part.negative.is_empty()).then(|| {
        let sel_n = g.constant(selection_row(t, &part.negative));
        g.matmul(sel_n, h)
    });
    ContrastVars { anchor, positive, negative }
}

/// `max(‖a − p‖ − ‖a − n‖ + m, 0)`; zero when the negative is absent.
pub fn triplet(g: &mut Graph, v: ContrastVars, margin: f64) -> Var {
    let Some(n) = v.negative else {
        return g.constant(Mat::scalar(0.0));
    };
    let ap = g.sub(v.anchor, v.positive);
    let d_ap = g.norm(ap);
    let an = g.sub(v.anchor, n);
    let d_an = g.norm(an);
    let diff = g.sub(d_ap, d_an);
    let m = g.constant(Mat::scalar(margin));
    let hinge = g.add(diff, m);
    if g.scalar(hinge) > 0.0 {
        hinge
    } else {
        g.constant(Mat::scalar(0.0))
    }
}

// ---- value-level operations ----

/// Everything the co-attention pass produces for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangleResult {
    pub affinity: Mat,
    pub a_s: Vec<f64>,
    pub a_r: Vec<f64>,
    pub part_s: Partition,
    pub part_r: Partition,
    pub search: ContrastValues,
    pub rec: ContrastValues,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastValues {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Option<Vec<f64>>,
}

fn check_inputs(op: &'static str, h_s: &Mat, h_r: &Mat, w_l: &Mat, s_mask: &[bool], r_mask: &[bool]) -> Result<()> {
    let d = h_s.cols();
    if h_r.cols() != d || w_l.shape() != (d, d) {
        return Err(Error::shape(op, format!("H_s, H_r of width {d} and W_l {d}x{d}"), format!("H_r width {}, W_l {:?}", h_r.cols(), w_l.shape())));
    }
    if s_mask.len() != h_s.rows() || r_mask.len() != h_r.rows() {
        return Err(Error::shape(op, "one mask entry per row", format!("{} and {}", s_mask.len(), r_mask.len())));
    }
    Ok(())
}

pub fn affinity_values(h_s: &Mat, h_r: &Mat, w_l: &Mat, s_mask: &[bool], r_mask: &[bool]) -> Result<Mat> {
    check_inputs("affinity", h_s, h_r, w_l, s_mask, r_mask)?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (s, r, w) = (g.constant(h_s.clone()), g.constant(h_r.clone()), g.constant(w_l.clone()));
    let a = affinity(&mut g, s, r, w, s_mask, r_mask);
    Ok(g.value(a).clone())
}

/// Score vectors `(a_s, a_r)` for a given affinity matrix.
pub fn similarity_scores_values(a: &Mat, h_s: &Mat, h_r: &Mat, w_r: &[f64], w_s: &[f64], s_mask: &[bool], r_mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = h_s.cols();
    if a.shape() != (h_s.rows(), h_r.rows()) || w_r.len() != d || w_s.len() != d || h_r.cols() != d {
        return Err(Error::shape("similarity_scores", format!("A {}x{}, projections of width {d}", h_s.rows(), h_r.rows()), format!("A {:?}", a.shape())));
    }
    if !s_mask.iter().any(|&m| m) || !r_mask.iter().any(|&m| m) {
        return Err(Error::Invalid("similarity_scores: a sequence has no real positions".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let av = g.constant(a.clone());
    let (s, r) = (g.constant(h_s.clone()), g.constant(h_r.clone()));
    let (wr, ws) = (g.constant(Mat::row_vector(w_r)), g.constant(Mat::row_vector(w_s)));
    let (a_s, a_r) = similarity_scores(&mut g, av, s, r, wr, ws, s_mask, r_mask);
    Ok((g.value(a_s).row(0).to_vec(), g.value(a_r).row(0).to_vec()))
}

pub fn build_contrast_vectors(h: &Mat, a: &[f64], part: &Partition) -> Result<ContrastValues> {
    if a.len() != h.rows() {
        return Err(Error::shape("build_contrast_vectors", format!("{} scores", h.rows()), a.len()));
    }
    if part.positive.is_empty() || part.positive.iter().chain(&part.negative).any(|&j| j >= h.rows()) {
        return Err(Error::Invalid("build_contrast_vectors: P must be non-empty and index real rows".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let hv = g.constant(h.clone());
    let av = g.constant(Mat::row_vector(a));
    let c = contrast_vectors(&mut g, hv, av, part);
    Ok(ContrastValues {
        anchor: g.value(c.anchor).row(0).to_vec(),
        positive: g.value(c.positive).row(0).to_vec(),
        negative: c.negative.map(|n| g.value(n).row(0).to_vec()),
    })
}

pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], m: f64) -> f64 {
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    (dist(a, p) - dist(a, n) + m).max(0.0)
}

/// Sum of the two triplet terms; a side without a negative contributes 0.
pub fn contrast_loss(search: &ContrastValues, rec: &ContrastValues, m: f64) -> f64 {
    let side = |c: &ContrastValues| c.negative.as_ref().map_or(0.0, |n| triplet_loss(&c.anchor, &c.positive, n, m));
    side(rec) + side(search)
}

/// Full co-attention pass on fixed encoder outputs.
#[allow(clippy::too_many_arguments)]
pub fn disentangle_values(h_s: &Mat, h_r: &Mat, w_l: &Mat, w_r: &[f64], w_s: &[f64], s_mask: &[bool], r_mask: &[bool], strategy: ThresholdStrategy) -> Result<DisentangleResult> {
    let a = affinity_values(h_s, h_r, w_l, s_mask, r_mask)?;
    let (a_s, a_r) = similarity_scores_values(&a, h_s, h_r, w_r, w_s, s_mask, r_mask)?;
    let part_s = select(&a_s, s_mask, strategy);
    let part_r = select(&a_r, r_mask, strategy);
    let search = build_contrast_vectors(h_s, &a_s, &part_s)?;
    let rec = build_contrast_vectors(h_r, &a_r, &part_r)?;
    Ok(DisentangleResult { affinity: a, a_s, a_r, part_s, part_r, search, rec })
}

/// Masked softmax of a single logit row; exposed for oracle tests.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    masked_softmax_rows(&Mat::row_vector(logits), Some(mask)).row(0).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        let n = Normal::new(0.0, 1.0).unwrap();
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect())
    }

    #[test]
    fn affinity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (hs, hr, w) = (random(3, 4, &mut rng), random(5, 4, &mut rng), random(4, 4, &mut rng));
        let all = |n| vec![true; n];
        assert!(affinity_values(&hs, &hr, &Mat::zeros(4, 4), &all(3), &all(5)).unwrap().data().iter().all(|&x| x == 0.0));
        let a = affinity_values(&hs, &hr, &w, &all(3), &all(5)).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for p in 0..4 {
                    for q in 0..4 {
                        acc += hs.get(i, p) * w.get(p, q) * hr.get(j, q);
                    }
                }
                assert!((a.get(i, j) - acc.tanh()).abs() < 1e-12);
            }
        }
        let hs1 = Mat::from_rows(&[vec![1.0, 0.0]]);
        let hr1 = Mat::from_rows(&[vec![0.0, 2.0], vec![0.0, -1.0]]);
        assert!(affinity_values(&hs1, &hr1, &Mat::identity(2), &[true], &[true, true]).unwrap().data().iter().all(|&x| x == 0.0));
        let masked = affinity_values(&hs, &hr, &w, &[true, false, true], &[true, true, false, true, true]).unwrap();
        assert!(masked.row(1).iter().all(|&x| x == 0.0));
        assert!((0..3).all(|i| masked.get(i, 2) == 0.0));
        assert!(affinity_values(&hs, &random(5, 3, &mut rng), &w, &all(3), &all(5)).is_err());
    }

    #[test]
    fn scores_match_chained_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (hs, hr, w) = (random(3, 4, &mut rng), random(4, 4, &mut rng), random(4, 4, &mut rng));
        let (wr, ws) = (random(1, 4, &mut rng), random(1, 4, &mut rng));
        let sm = [true, true, false];
        let rm = [true; 4];
        let a = affinity_values(&hs, &hr, &w, &sm, &rm).unwrap();
        let (a_s, a_r) = similarity_scores_values(&a, &hs, &hr, wr.row(0), ws.row(0), &sm, &rm).unwrap();
        let logit_s: Vec<f64> = (0..3).map(|i| (0..4).map(|j| (0..4).map(|k| wr.get(0, k) * hr.get(j, k)).sum::<f64>() * a.get(i, j)).sum()).collect();
        let logit_r: Vec<f64> = (0..4).map(|j| (0..3).map(|i| (0..4).map(|k| ws.get(0, k) * hs.get(i, k)).sum::<f64>() * a.get(i, j)).sum()).collect();
        let softmax = |l: &[f64], m: &[bool]| {
            let z: f64 = l.iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| x.exp()).sum();
            l.iter().zip(m).map(|(x, &k)| if k { x.exp() / z } else { 0.0 }).collect::<Vec<_>>()
        };
        for (x, y) in a_s.iter().zip(softmax(&logit_s, &sm)) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a_r.iter().zip(softmax(&logit_r, &rm)) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a_s[2], 0.0);
        let single = Mat::from_rows(&[hs.row(0).to_vec()]);
        let a1 = affinity_values(&single, &hr, &w, &[true], &rm).unwrap();
        let (s1, _) = similarity_scores_values(&a1, &single, &hr, wr.row(0), ws.row(0), &[true], &rm).unwrap();
        assert_eq!(s1, vec![1.0]);
    }

    #[test]
    fn hard_select_examples() {
        let p = hard_select(&[0.7, 0.2, 0.1], &[true; 3], 1.0 / 3.0);
        assert_eq!(p, Partition { positive: vec![0], negative: vec![1, 2] });
        let u = hard_select(&[0.25; 4], &[true; 4], 0.25);
        assert_eq!(u, Partition { positive: vec![0], negative: vec![1, 2, 3] });
        let one = hard_select(&[1.0], &[true], 1.0);
        assert_eq!(one, Partition { positive: vec![0], negative: vec![] });
        // everything above a small constant: argmin moves to N
        let all = hard_select(&[0.5, 0.3, 0.2], &[true; 3], 0.01);
        assert_eq!(all, Partition { positive: vec![0, 1], negative: vec![2] });
        let padded = hard_select(&[0.6, 0.0, 0.4], &[true, false, true], 0.5);
        assert_eq!(padded, Partition { positive: vec![0], negative: vec![2] });
    }

    #[test]
    fn thresholds() {
        assert_eq!(ThresholdStrategy::Mean.gamma(&[0.5, 0.3, 0.2]), 1.0 / 3.0);
        assert_eq!(ThresholdStrategy::Median.gamma(&[0.5, 0.3, 0.2]), 0.3);
        assert_eq!(ThresholdStrategy::Median.gamma(&[0.4, 0.1, 0.3, 0.2]), 0.25);
        assert_eq!(ThresholdStrategy::Constant(0.125).gamma(&[1.0]), 0.125);
        for s in ThresholdStrategy::study_set() {
            assert_eq!(s.to_string().parse::<ThresholdStrategy>().unwrap(), s);
        }
        assert_eq!("const:0.2".parse::<ThresholdStrategy>().unwrap(), ThresholdStrategy::Constant(0.2));
        assert!("bogus".parse::<ThresholdStrategy>().is_err());
        assert!("0".parse::<ThresholdStrategy>().is_err());
    }

    #[test]
    fn contrast_vector_cases() {
        let h = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let part = Partition { positive: vec![1], negative: vec![0, 2] };
        let c = build_contrast_vectors(&h, &[0.0, 1.0, 0.0], &part).unwrap();
        assert_eq!(c.anchor, vec![3.0, 4.0]);
        assert_eq!(c.negative, Some(vec![3.0, 4.0]));
        let all = Partition { positive: vec![0, 1, 2], negative: vec![] };
        let c = build_contrast_vectors(&h, &[0.2, 0.3, 0.5], &all).unwrap();
        assert_eq!(c.positive, vec![3.0, 4.0]);
        assert!(c.negative.is_none());
        assert!((c.anchor[0] - (0.2 + 0.9 + 2.5)).abs() < 1e-12);
    }

    #[test]
    fn triplet_and_contrast_cases() {
        assert_eq!(triplet_loss(&[0.0, 0.0], &[3.0, 4.0], &[6.0, 8.0], 0.1), 0.0);
        assert_eq!(triplet_loss(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], 0.1), 0.1);
        assert_eq!(triplet_loss(&[0.0], &[0.0], &[1.0], 0.1), 0.0);
        let side = |a: f64, p: f64, n: Option<f64>| ContrastValues { anchor: vec![a], positive: vec![p], negative: n.map(|x| vec![x]) };
        let s = side(0.0, 1.0, Some(0.5));
        let r = side(0.0, 0.0, None);
        assert!((contrast_loss(&s, &r, 0.1) - 0.6).abs() < 1e-12);
        assert_eq!(contrast_loss(&side(0.0, 0.0, Some(1.0)), &side(0.0, 0.0, Some(1.0)), 0.1), 0.0);
    }
}
