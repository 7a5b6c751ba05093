//! Bidirectional transformer layers (multi-head self-attention followed by a
//! two-layer feed-forward network, each wrapped in residual + layer norm).
//! Search and recommendation sequences get separate parameter sets.

use crate::autograd::{masked_softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, INIT_STD};
use crate::tensor::Mat;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderShape {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqEncoder {
    layers: Vec<Layer>,
    shape: EncoderShape,
}

impl SeqEncoder {
    pub fn new<R: Rng>(prefix: &str, shape: EncoderShape, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if shape.n_heads == 0 || !shape.d.is_multiple_of(shape.n_heads) {
            return Err(Error::Config(format!("d = {} is not divisible by n_heads = {}", shape.d, shape.n_heads)));
        }
        let d = shape.d;
        let dense = ParamKind::Dense;
        let layers = (0..shape.n_layers)
            .map(|l| {
                let mut w = |name: &str, rows: usize, cols: usize| store.add_normal(format!("{prefix}.{l}.{name}"), dense, rows, cols, INIT_STD, rng);
                let (wq, wk, wv, wo) = (w("wq", d, d), w("wk", d, d), w("wv", d, d), w("wo", d, d));
                let (w1, w2) = (w("w1", d, shape.ffn_dim), w("w2", shape.ffn_dim, d));
                let mut c = |name: &str, cols: usize, v: f64| store.add(format!("{prefix}.{l}.{name}"), dense, Mat::filled(1, cols, v));
                Layer {
                    wq,
                    bq: c("bq", d, 0.0),
                    wk,
                    bk: c("bk", d, 0.0),
                    wv,
                    bv: c("bv", d, 0.0),
                    wo,
                    bo: c("bo", d, 0.0),
                    ln1_g: c("ln1_g", d, 1.0),
                    ln1_b: c("ln1_b", d, 0.0),
                    w1,
                    b1: c("b1", shape.ffn_dim, 0.0),
                    w2,
                    b2: c("b2", d, 0.0),
                    ln2_g: c("ln2_g", d, 1.0),
                    ln2_b: c("ln2_b", d, 0.0),
                }
            })
            .collect();
        Ok(Self { layers, shape })
    }

    pub fn shape(&self) -> EncoderShape {
        self.shape
    }

    fn affine(g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = g.param(w);
        let b = g.param(b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn layer_norm(g: &mut Graph, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let n = g.normalize_rows(x);
        let gm = g.param(gamma);
        let bt = g.param(beta);
        let y = g.mul_row(n, gm);
        g.add_row(y, bt)
    }

    /// Per-head attention probabilities, each `T x T` with zero columns at padding.
    fn attention(&self, g: &mut Graph, layer: &Layer, x: Var, mask: &[bool]) -> (Var, Vec<Var>) {
        let t = mask.len();
        let dh = self.shape.d / self.shape.n_heads;
        let key_mask: Vec<bool> = (0..t * t).map(|k| mask[k % t]).collect();
        let q = Self::affine(g, x, layer.wq, layer.bq);
        let k = Self::affine(g, x, layer.wk, layer.bk);
        let v = Self::affine(g, x, layer.wv, layer.bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.shape.n_heads);
        let mut probs = Vec::with_capacity(self.shape.n_heads);
        for h in 0..self.shape.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, scale);
            let p = g.softmax_rows(logits, Some(&key_mask));
            heads.push(g.matmul(p, vh));
            probs.push(p);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        (Self::affine(g, cat, layer.wo, layer.bo), probs)
    }

    /// Contextual representations `H` for `E` (`T x d`); padded rows come out zero.
    /// Panics on an all-padding mask; use [`SeqEncoder::encode_checked`] for outside input.
    pub fn encode(&self, g: &mut Graph, e: Var, mask: &[bool]) -> Var {
        assert!(mask.iter().any(|&m| m), "encode on an all-padding sequence");
        assert_eq!(g.shape(e), (mask.len(), self.shape.d), "encoder input shape");
        let mut x = e;
        for layer in &self.layers {
            let (att, _) = self.attention(g, layer, x, mask);
            let r1 = g.add(x, att);
            let f = Self::layer_norm(g, r1, layer.ln1_g, layer.ln1_b);
            let h1 = Self::affine(g, f, layer.w1, layer.b1);
            let h1 = g.relu(h1);
            let h2 = Self::affine(g, h1, layer.w2, layer.b2);
            let r2 = g.add(f, h2);
            let out = Self::layer_norm(g, r2, layer.ln2_g, layer.ln2_b);
            x = g.mask_rows(out, mask);
        }
        x
    }

    pub fn encode_checked(&self, store: &ParamStore, e: &Mat, mask: &[bool]) -> Result<Mat> {
        self.check(e, mask)?;
        let mut g = Graph::new(store);
        let x = g.constant(e.clone());
        let h = self.encode(&mut g, x, mask);
        Ok(g.value(h).clone())
    }

    fn check(&self, e: &Mat, mask: &[bool]) -> Result<()> {
        if e.cols() != self.shape.d || e.rows() != mask.len() {
            return Err(Error::shape("encode", format!("{}x{}", mask.len(), self.shape.d), format!("{}x{}", e.rows(), e.cols())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Invalid("sequence has no real positions".into()));
        }
        Ok(())
    }

    /// First-layer attention matrices, one `T x T` per head.
    pub fn attention_weights(&self, store: &ParamStore, e: &Mat, mask: &[bool]) -> Result<Vec<Mat>> {
        self.check(e, mask)?;
        let Some(layer) = self.layers.first() else {
            return Ok(Vec::new());
        };
        let mut g = Graph::new(store);
        let x = g.constant(e.clone());
        let (_, probs) = self.attention(&mut g, layer, x, mask);
        Ok(probs.into_iter().map(|p| g.value(p).clone()).collect())
    }
}

/// Scaled dot-product attention probabilities computed directly from
/// projection matrices, for cross-checking [`SeqEncoder::attention_weights`].
pub fn reference_attention(q: &Mat, k: &Mat, mask: &[bool]) -> Mat {
    let t = mask.len();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let logits = q.matmul_t(k).map(|x| x * scale);
    let key_mask: Vec<bool> = (0..t * t).map(|i| mask[i % t]).collect();
    masked_softmax_rows(&logits, Some(&key_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn encoder(d: usize, heads: usize) -> (ParamStore, SeqEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // larger weights than the training init so attention is far from uniform
        let enc = SeqEncoder::new("enc", EncoderShape { d, n_layers: 2, n_heads: heads, ffn_dim: 2 * d }, &mut store, &mut rng).unwrap();
        let normal = Normal::new(0.0, 0.5).unwrap();
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.value.rows() > 1).map(|(id, _)| id).collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        (store, enc)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect())
    }

    #[test]
    fn single_position_attends_to_itself() {
        let (store, enc) = encoder(4, 2);
        let w = enc.attention_weights(&store, &random(1, 4, 1), &[true]).unwrap();
        for head in w {
            assert_eq!(head, Mat::from_rows(&[vec![1.0]]));
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs_and_uniform_attention() {
        let (store, enc) = encoder(4, 2);
        let row = random(1, 4, 2);
        let e = Mat::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec(), row.row(0).to_vec()]);
        let h = enc.encode_checked(&store, &e, &[true; 3]).unwrap();
        for r in 1..3 {
            for c in 0..4 {
                assert!((h.get(r, c) - h.get(0, c)).abs() < 1e-12);
            }
        }
        for head in enc.attention_weights(&store, &e, &[true; 3]).unwrap() {
            assert!(head.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn attention_rows_normalize_and_padding_columns_vanish() {
        let (store, enc) = encoder(4, 2);
        let mask = [true, false, true, true];
        let w = enc.attention_weights(&store, &random(4, 4, 3), &mask).unwrap();
        for head in w {
            for r in 0..4 {
                assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert_eq!(head.get(r, 1), 0.0);
            }
        }
    }

    #[test]
    fn attention_matches_reference() {
        let (store, enc) = encoder(4, 1);
        let e = random(3, 4, 4);
        let layer = &enc.layers[0];
        let q = e.matmul(store.get(layer.wq));
        let k = e.matmul(store.get(layer.wk));
        let oracle = reference_attention(&q, &k, &[true; 3]);
        let w = enc.attention_weights(&store, &e, &[true; 3]).unwrap();
        assert!(w[0].max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn padding_content_does_not_leak() {
        let (store, enc) = encoder(4, 2);
        let mask = [true, true, false, true, false];
        let mut e = random(5, 4, 5);
        let h1 = enc.encode_checked(&store, &e, &mask).unwrap();
        e.row_mut(2).copy_from_slice(&[9.0, -7.0, 3.0, 1.0]);
        e.row_mut(4).copy_from_slice(&[-5.0, 5.0, 0.5, 2.0]);
        let h2 = enc.encode_checked(&store, &e, &mask).unwrap();
        assert!(h1.max_abs_diff(&h2) < 1e-12);
        assert!(h1.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let (store, enc) = encoder(4, 2);
        let e = random(3, 4, 6);
        let perm = [2, 0, 1];
        let h = enc.encode_checked(&store, &e, &[true; 3]).unwrap();
        let hp = enc.encode_checked(&store, &e.select_rows(&perm), &[true; 3]).unwrap();
        assert!(hp.max_abs_diff(&h.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn errors() {
        let (store, enc) = encoder(4, 2);
        assert!(matches!(enc.encode_checked(&store, &random(2, 4, 1), &[false, false]), Err(Error::Invalid(_))));
        assert!(matches!(enc.encode_checked(&store, &random(2, 3, 1), &[true, true]), Err(Error::Shape { .. })));
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SeqEncoder::new("x", EncoderShape { d: 5, n_layers: 1, n_heads: 2, ffn_dim: 4 }, &mut s, &mut rng).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (store, enc) = encoder(4, 2);
        let e = random(3, 4, 7);
        let weights = random(3, 4, 8);
        let loss_of = |e: &Mat| -> f64 {
            let mut g = Graph::new(&store);
            let x = g.constant(e.clone());
            let h = enc.encode(&mut g, x, &[true; 3]);
            let w = g.constant(weights.clone());
            let p = g.mul(h, w);
            let s = g.sum(p);
            g.scalar(s)
        };
        // analytic gradient w.r.t. the input, exposed through a parameter leaf
        let mut s2 = store.clone();
        let eid = s2.add("input", ParamKind::Dense, e.clone());
        let mut grads = s2.zeros_like();
        {
            let mut g = Graph::new(&s2);
            let x = g.param(eid);
            let h = enc.encode(&mut g, x, &[true; 3]);
            let w = g.constant(weights.clone());
            let p = g.mul(h, w);
            let s = g.sum(p);
            g.backward(s, 1.0, &mut grads);
        }
        let h = 1e-5;
        for k in 0..12 {
            let mut plus = e.clone();
            plus.data_mut()[k] += h;
            let mut minus = e.clone();
            minus.data_mut()[k] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let analytic = grads.get(eid).data()[k];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-4, "entry {k}: numeric {numeric}, analytic {analytic}");
        }
    }
}
