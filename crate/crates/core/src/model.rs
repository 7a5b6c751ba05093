//! The assembled recommender: embeddings, the two sequence encoders,
//! alignment, disentanglement and the interest head.

use crate::alignment::{AlignInputs, Alignment};
use crate::autograd::{Graph, Var};
use crate::config::KeyValues;
use crate::corpus::{DenseCatalog, ModelInput, VocabSizes};
use crate::disentangle::{Disentangle, DisentangleVars, Partition, ThresholdStrategy};
use crate::embeddings::{EmbeddingTables, EncodedInputs};
use crate::error::{Error, Result};
use crate::interest::{InterestHead, LossWeights, BCE_EPS};
use crate::params::{GradStore, ParamKind, ParamStore};
use crate::seq_encoder::{EncoderShape, SeqEncoder};
use crate::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: VocabSizes,
    pub n_sources: usize,
    pub item_id_dim: usize,
    pub item_attr_dim: usize,
    pub query_id_dim: usize,
    pub term_dim: usize,
    pub d: usize,
    pub max_rec_len: usize,
    pub max_search_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub multi_interest: bool,
    pub threshold: ThresholdStrategy,
    pub margin: f64,
    pub tau_init: f64,
}

impl ModelConfig {
    pub fn for_vocab(vocab: VocabSizes) -> Self {
        Self {
            vocab,
            n_sources: 3,
            item_id_dim: 24,
            item_attr_dim: 8,
            query_id_dim: 16,
            term_dim: 16,
            d: 32,
            max_rec_len: 15,
            max_search_len: 15,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 64,
            mlp_hidden: 64,
            dropout: 0.0,
            multi_interest: true,
            threshold: ThresholdStrategy::Mean,
            margin: 0.1,
            tau_init: 0.07,
        }
    }

    /// `d_i`
    pub fn d_item(&self) -> usize {
        self.item_id_dim + self.item_attr_dim
    }

    /// `d_q`
    pub fn d_query(&self) -> usize {
        self.query_id_dim + self.term_dim
    }

    /// Overrides fields from `key = value` entries; `ffn_dim` follows `d`
    /// unless given explicitly.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("item_id_dim", &mut self.item_id_dim)?;
        kv.set("item_attr_dim", &mut self.item_attr_dim)?;
        kv.set("query_id_dim", &mut self.query_id_dim)?;
        kv.set("term_dim", &mut self.term_dim)?;
        if let Some(d) = kv.get::<usize>("d")? {
            self.d = d;
            self.ffn_dim = 2 * d;
        }
        kv.set("max_rec_len", &mut self.max_rec_len)?;
        kv.set("max_search_len", &mut self.max_search_len)?;
        kv.set("n_sources", &mut self.n_sources)?;
        kv.set("n_layers", &mut self.n_layers)?;
        kv.set("n_heads", &mut self.n_heads)?;
        kv.set("ffn_dim", &mut self.ffn_dim)?;
        kv.set("mlp_hidden", &mut self.mlp_hidden)?;
        kv.set("dropout", &mut self.dropout)?;
        kv.set("multi_interest", &mut self.multi_interest)?;
        if let Some(raw) = kv.raw("threshold_strategy") {
            self.threshold = raw.parse().map_err(Error::Config)?;
        }
        kv.set("margin", &mut self.margin)?;
        kv.set("tau_init", &mut self.tau_init)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("item_id_dim", self.item_id_dim),
            ("query_id_dim", self.query_id_dim),
            ("term_dim", self.term_dim),
            ("d", self.d),
            ("max_rec_len", self.max_rec_len),
            ("max_search_len", self.max_search_len),
            ("n_sources", self.n_sources),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d = {} is not divisible by n_heads = {}", self.d, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        if !(self.tau_init.is_finite() && self.tau_init > 0.0) {
            return Err(Error::Config(format!("tau_init must be positive, got {}", self.tau_init)));
        }
        Ok(())
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Samples shared by every example of a batch for the alignment loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignNegatives {
    pub items: Vec<usize>,
    pub queries: Vec<usize>,
}

/// Graph handles for one user prefix.
pub struct UserState {
    pub encoded: EncodedInputs,
    pub h_r: Var,
    pub h_s: Var,
    pub user: Var,
    pub dis: Option<DisentangleVars>,
}

/// Per-example loss components (unweighted) and the weighted graph total.
pub struct Objective {
    pub total: Var,
    pub rec: f64,
    pub ali: f64,
    pub con: f64,
}

/// Everything the co-attention step decided for one prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionDump {
    pub a_s: Vec<f64>,
    pub a_r: Vec<f64>,
    pub part_s: Partition,
    pub part_r: Partition,
}

#[derive(Clone, Debug)]
pub struct SesRec {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub emb: EmbeddingTables,
    pub enc_rec: SeqEncoder,
    pub enc_search: SeqEncoder,
    pub align: Alignment,
    pub dis: Disentangle,
    pub head: InterestHead,
}

impl SesRec {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = EmbeddingTables::new(&config, &mut store, &mut rng);
        let shape = EncoderShape { d: config.d, n_layers: config.n_layers, n_heads: config.n_heads, ffn_dim: config.ffn_dim };
        let enc_rec = SeqEncoder::new("enc_rec", shape, &mut store, &mut rng)?;
        let enc_search = SeqEncoder::new("enc_search", shape, &mut store, &mut rng)?;
        let align = Alignment::new(config.d, config.tau_init, &mut store, &mut rng);
        let dis = Disentangle::new(config.d, &mut store, &mut rng);
        let head = InterestHead::new(config.d, config.d_item(), config.d, config.mlp_hidden, config.multi_interest, &mut store, &mut rng);
        Ok(Self { config, store, emb, enc_rec, enc_search, align, dis, head })
    }

    /// Rebuilds the model skeleton for `config` and installs `store`.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if !m.store.same_layout(&store) {
            return Err(Error::Checkpoint("parameter layout does not match the configuration".into()));
        }
        m.store = store;
        Ok(m)
    }

    fn check_input(&self, input: &ModelInput, catalog: &DenseCatalog) -> Result<()> {
        let v = &self.config.vocab;
        let bad = |kind: &'static str, id: usize| Err(Error::UnknownId { kind, id: id as u64 });
        if input.rec_items.is_empty() || input.queries.is_empty() {
            return Err(Error::Invalid("both behavior sequences need at least one event".into()));
        }
        if input.rec_items.len() > self.config.max_rec_len || input.queries.len() > self.config.max_search_len {
            return Err(Error::Invalid(format!(
                "sequence lengths {}/{} exceed the limits {}/{}",
                input.rec_items.len(),
                input.queries.len(),
                self.config.max_rec_len,
                self.config.max_search_len
            )));
        }
        if input.user == 0 || input.user > v.users {
            return bad("user", input.user);
        }
        for &i in input.rec_items.iter().chain(input.clicks.iter().flatten()) {
            if i == 0 || i > v.items || i >= catalog.item_category.len() {
                return bad("item", i);
            }
        }
        for &q in &input.queries {
            if q == 0 || q > v.queries {
                return bad("query", q);
            }
        }
        if input.query_terms.len() != input.queries.len() || input.sources.len() != input.queries.len() || input.clicks.len() != input.queries.len() {
            return Err(Error::Invalid("search fields have inconsistent lengths".into()));
        }
        for t in &input.query_terms {
            if t.is_empty() {
                return Err(Error::Invalid("query without terms".into()));
            }
            if let Some(&x) = t.iter().find(|&&x| x == 0 || x > v.terms) {
                return bad("term", x);
            }
        }
        if let Some(&s) = input.sources.iter().find(|&&s| s >= self.config.n_sources) {
            return Err(Error::Invalid(format!("search source {s} outside [0, {})", self.config.n_sources)));
        }
        Ok(())
    }

    fn needs_disentangle(&self, beta: f64) -> bool {
        self.config.multi_interest || beta > 0.0
    }

    /// Embeds and encodes one prefix. `dropout_seed` switches on training-time
    /// dropout of the encoder inputs.
    pub fn forward_user(&self, g: &mut Graph, input: &ModelInput, catalog: &DenseCatalog, pad_to: Option<(usize, usize)>, with_dis: bool, dropout_seed: Option<u64>) -> UserState {
        let encoded = self.emb.encode_inputs(g, input, catalog, pad_to);
        let (mut e_r, mut e_s) = (encoded.e_r, encoded.e_s);
        if let (Some(seed), p) = (dropout_seed, self.config.dropout) {
            if p > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut mask = |v: Var, g: &mut Graph| {
                    let (r, c) = g.shape(v);
                    let m = Mat::from_vec(r, c, (0..r * c).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) }).collect());
                    let m = g.constant(m);
                    g.mul(v, m)
                };
                e_r = mask(e_r, g);
                e_s = mask(e_s, g);
            }
        }
        let h_r = self.enc_rec.encode(g, e_r, &encoded.rec_mask);
        let h_s = self.enc_search.encode(g, e_s, &encoded.search_mask);
        let user = self.emb.user_row(g, input.user);
        let dis = with_dis.then(|| self.dis.forward(g, h_s, h_r, &encoded.search_mask, &encoded.rec_mask, self.config.threshold));
        UserState { encoded, h_r, h_s, user, dis }
    }

    /// Click probabilities for `candidates`, `C x 1`.
    pub fn score_state(&self, g: &mut Graph, st: &UserState, candidates: &[usize], catalog: &DenseCatalog) -> Var {
        let cands = self.emb.items(g, candidates, catalog);
        let sets_r = st.dis.as_ref().map(|d| (d.part_r.positive.as_slice(), d.part_r.negative.as_slice()));
        let sets_s = st.dis.as_ref().map(|d| (d.part_s.positive.as_slice(), d.part_s.negative.as_slice()));
        let u_r = self.head.interests(g, st.h_r, &st.encoded.rec_mask, sets_r, cands, true);
        let u_s = self.head.interests(g, st.h_s, &st.encoded.search_mask, sets_s, cands, false);
        self.head.predict(g, u_r, u_s, cands, st.user)
    }

    fn align_inputs(&self, g: &mut Graph, st: &UserState, input: &ModelInput, negs: &AlignNegatives, catalog: &DenseCatalog) -> Option<AlignInputs> {
        let enc = &st.encoded;
        if enc.click_items.is_empty() || negs.items.is_empty() || negs.queries.is_empty() {
            return None;
        }
        let queries = g.select_rows(enc.queries_hat, &enc.click_owner);
        let ni = self.emb.items(g, &negs.items, catalog);
        let neg_items = self.emb.project_items(g, ni);
        let terms: Vec<Vec<usize>> = negs.queries.iter().map(|&q| catalog.query_terms[q].clone()).collect();
        let nq = self.emb.queries(g, &negs.queries, &terms);
        let neg_queries = self.emb.project_queries(g, nq);
        let mask_of = |own: &dyn Fn(usize) -> usize, pool: &[usize]| -> Option<Vec<bool>> {
            let m: Vec<bool> = (0..enc.click_items.len()).flat_map(|k| pool.iter().map(move |&x| x != own(k))).collect();
            m.iter().any(|&b| !b).then_some(m)
        };
        let neg_item_mask = mask_of(&|k| enc.click_items[k], &negs.items);
        let neg_query_mask = mask_of(&|k| input.queries[enc.click_owner[k]], &negs.queries);
        Some(AlignInputs { queries, items: enc.clicks_hat, neg_items, neg_queries, neg_item_mask, neg_query_mask })
    }

    /// Per-example `L_rec + α L_ali + β L_con` (regularization is per batch).
    /// `candidates[0]` is the positive.
    pub fn objective(&self, g: &mut Graph, input: &ModelInput, candidates: &[usize], catalog: &DenseCatalog, negs: &AlignNegatives, w: &LossWeights, dropout_seed: Option<u64>) -> Objective {
        let st = self.forward_user(g, input, catalog, None, self.needs_disentangle(w.beta), dropout_seed);
        let probs = self.score_state(g, &st, candidates, catalog);
        let labels: Vec<f64> = (0..candidates.len()).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect();
        let rec = g.bce_mean(probs, &labels, BCE_EPS);
        let (rec_v, mut ali_v, mut con_v) = (g.scalar(rec), 0.0, 0.0);
        let mut total = rec;
        if w.alpha > 0.0 {
            if let Some(inputs) = self.align_inputs(g, &st, input, negs, catalog) {
                let a = self.align.loss(g, &inputs);
                ali_v = g.scalar(a.loss);
                let scaled = g.scale(a.loss, w.alpha);
                total = g.add(total, scaled);
            }
        }
        if let Some(dv) = &st.dis {
            let con = self.dis.contrast(g, st.h_s, st.h_r, dv, self.config.margin);
            con_v = g.scalar(con);
            if w.beta > 0.0 {
                let scaled = g.scale(con, w.beta);
                total = g.add(total, scaled);
            }
        }
        Objective { total, rec: rec_v, ali: ali_v, con: con_v }
    }

    /// Click probabilities for a prefix and candidate list.
    pub fn score(&self, input: &ModelInput, candidates: &[usize], catalog: &DenseCatalog) -> Result<Vec<f64>> {
        self.check_input(input, catalog)?;
        if let Some(&c) = candidates.iter().find(|&&c| c == 0 || c > self.config.vocab.items) {
            return Err(Error::UnknownId { kind: "item", id: c as u64 });
        }
        let mut g = Graph::new(&self.store);
        let st = self.forward_user(&mut g, input, catalog, None, self.config.multi_interest, None);
        let p = self.score_state(&mut g, &st, candidates, catalog);
        Ok(g.value(p).data().to_vec())
    }

    /// Scores with both sequences right-padded to `pad_to`.
    pub fn score_padded(&self, input: &ModelInput, candidates: &[usize], catalog: &DenseCatalog, pad_to: (usize, usize)) -> Result<Vec<f64>> {
        self.check_input(input, catalog)?;
        if pad_to.0 < input.rec_items.len() || pad_to.1 < input.queries.len() || pad_to.0 > self.config.max_rec_len || pad_to.1 > self.config.max_search_len {
            return Err(Error::Invalid(format!("cannot pad to {pad_to:?}")));
        }
        let mut g = Graph::new(&self.store);
        let st = self.forward_user(&mut g, input, catalog, Some(pad_to), self.config.multi_interest, None);
        let p = self.score_state(&mut g, &st, candidates, catalog);
        Ok(g.value(p).data().to_vec())
    }

    /// Scores and hard selections for one prefix.
    pub fn selection(&self, input: &ModelInput, catalog: &DenseCatalog) -> Result<SelectionDump> {
        self.selection_at(input, catalog, None)
    }

    /// [`SesRec::selection`] with both sequences right-padded; score vectors keep the padded length.
    pub fn selection_padded(&self, input: &ModelInput, catalog: &DenseCatalog, pad_to: (usize, usize)) -> Result<SelectionDump> {
        if pad_to.0 < input.rec_items.len() || pad_to.1 < input.queries.len() {
            return Err(Error::Invalid(format!("cannot pad to {pad_to:?}")));
        }
        self.selection_at(input, catalog, Some(pad_to))
    }

    fn selection_at(&self, input: &ModelInput, catalog: &DenseCatalog, pad_to: Option<(usize, usize)>) -> Result<SelectionDump> {
        self.check_input(input, catalog)?;
        let mut g = Graph::new(&self.store);
        let st = self.forward_user(&mut g, input, catalog, pad_to, true, None);
        let d = st.dis.expect("disentangle requested");
        Ok(SelectionDump { a_s: g.value(d.a_s).row(0).to_vec(), a_r: g.value(d.a_r).row(0).to_vec(), part_s: d.part_s, part_r: d.part_r })
    }

    /// Projected query rows `Ê_q` and clicked-item rows `Ê_c`, one pair per click.
    pub fn projected_pairs(&self, input: &ModelInput, catalog: &DenseCatalog) -> Result<(Mat, Mat)> {
        self.check_input(input, catalog)?;
        let mut g = Graph::new(&self.store);
        let enc = self.emb.encode_inputs(&mut g, input, catalog, None);
        let q = g.value(enc.queries_hat).select_rows(&enc.click_owner);
        Ok((q, g.value(enc.clicks_hat).clone()))
    }

    /// `Σθ²` over dense parameters and the embedding rows recorded in `grads`
    /// (the padding row excluded).
    pub fn squared_norm(&self, grads: &GradStore) -> f64 {
        self.store
            .iter()
            .map(|(id, p)| match p.kind {
                ParamKind::Dense => p.value.sum_squares(),
                ParamKind::Embedding => grads.touched(id).iter().filter(|&&r| r != 0).map(|&r| p.value.row(r).iter().map(|x| x * x).sum::<f64>()).sum(),
            })
            .sum()
    }

    /// Adds `∂(λΣθ²)/∂θ` for the same parameter scope as [`SesRec::squared_norm`].
    pub fn add_regularization_grad(&self, grads: &mut GradStore, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for (id, p) in self.store.iter() {
            match p.kind {
                ParamKind::Dense => grads.get_mut(id).add_scaled(&p.value, 2.0 * lambda),
                ParamKind::Embedding => {
                    let rows: Vec<usize> = grads.touched(id).iter().copied().filter(|&r| r != 0).collect();
                    let g = grads.get_mut(id);
                    for r in rows {
                        for (gv, v) in g.row_mut(r).iter_mut().zip(p.value.row(r)) {
                            *gv += 2.0 * lambda * v;
                        }
                    }
                }
            }
        }
    }

    pub fn input_check(&self, input: &ModelInput, catalog: &DenseCatalog) -> Result<()> {
        self.check_input(input, catalog)
    }
}

/// A random but valid model input for property tests and gradient checks.
pub fn random_input<R: Rng>(rng: &mut R, cfg: &ModelConfig, t_r: usize, t_s: usize, catalog: &DenseCatalog) -> ModelInput {
    let v = &cfg.vocab;
    let queries: Vec<usize> = (0..t_s).map(|_| rng.random_range(1..=v.queries)).collect();
    ModelInput {
        user: rng.random_range(1..=v.users),
        rec_items: (0..t_r).map(|_| rng.random_range(1..=v.items)).collect(),
        query_terms: queries.iter().map(|&q| catalog.query_terms[q].clone()).collect(),
        sources: (0..t_s).map(|_| rng.random_range(0..cfg.n_sources)).collect(),
        clicks: (0..t_s).map(|_| (0..rng.random_range(0..3)).map(|_| rng.random_range(1..=v.items)).collect()).collect(),
        queries,
    }
}

/// A small random catalog: each item gets a category, each query 1–3 terms.
pub fn random_catalog<R: Rng>(rng: &mut R, vocab: &VocabSizes) -> DenseCatalog {
    let mut item_category = vec![0];
    item_category.extend((0..vocab.items).map(|_| rng.random_range(1..=vocab.categories)));
    let mut query_terms = vec![vec![]];
    query_terms.extend((0..vocab.queries).map(|_| (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=vocab.terms)).collect()));
    DenseCatalog { item_category, query_terms }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (SesRec, DenseCatalog, ChaCha8Rng) {
        let vocab = VocabSizes { users: 4, items: 12, queries: 6, terms: 8, categories: 3 };
        let mut cfg = ModelConfig::for_vocab(vocab);
        cfg.item_id_dim = 4;
        cfg.item_attr_dim = 2;
        cfg.query_id_dim = 3;
        cfg.term_dim = 3;
        cfg.d = 4;
        cfg.ffn_dim = 8;
        cfg.mlp_hidden = 6;
        cfg.max_rec_len = 6;
        cfg.max_search_len = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let catalog = random_catalog(&mut rng, &vocab);
        (SesRec::new(cfg, 7).unwrap(), catalog, rng)
    }

    #[test]
    fn scores_are_probabilities() {
        let (m, cat, mut rng) = tiny();
        let input = random_input(&mut rng, &m.config, 4, 3, &cat);
        let s = m.score(&input, &[1, 2, 3, 4, 5], &cat).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn padding_does_not_change_scores() {
        let (m, cat, mut rng) = tiny();
        for _ in 0..5 {
            let input = random_input(&mut rng, &m.config, 3, 2, &cat);
            let a = m.score(&input, &[1, 5, 9], &cat).unwrap();
            let b = m.score_padded(&input, &[1, 5, 9], &cat, (6, 5)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let (m, cat, mut rng) = tiny();
        let mut input = random_input(&mut rng, &m.config, 3, 2, &cat);
        input.rec_items[0] = 99;
        assert!(matches!(m.score(&input, &[1], &cat), Err(Error::UnknownId { .. })));
        let mut input = random_input(&mut rng, &m.config, 3, 2, &cat);
        input.queries.clear();
        assert!(m.score(&input, &[1], &cat).is_err());
        let input = random_input(&mut rng, &m.config, 7, 2, &cat);
        assert!(m.score(&input, &[1], &cat).is_err());
    }

    #[test]
    fn config_round_trip_and_hash() {
        let (m, _, _) = tiny();
        let mut other = m.config.clone();
        assert_eq!(m.config.hash(), other.hash());
        other.d = 8;
        assert_ne!(m.config.hash(), other.hash());
        let kv = KeyValues::parse("d = 8\nthreshold_strategy = 1/16\nmulti_interest = false").unwrap();
        let mut c = m.config.clone();
        c.apply(&kv).unwrap();
        assert_eq!((c.d, c.ffn_dim, c.threshold, c.multi_interest), (8, 16, ThresholdStrategy::Constant(0.0625), false));
        let kv = KeyValues::parse("n_heads = 3").unwrap();
        assert!(matches!(c.apply(&kv), Err(Error::Config(_))));
    }

    #[test]
    fn regularization_scope() {
        let (m, cat, mut rng) = tiny();
        let input = random_input(&mut rng, &m.config, 3, 2, &cat);
        let mut grads = m.store.zeros_like();
        let dense: f64 = m.store.iter().filter(|(_, p)| p.kind == ParamKind::Dense).map(|(_, p)| p.value.sum_squares()).sum();
        assert!((m.squared_norm(&grads) - dense).abs() < 1e-12);
        let mut g = Graph::new(&m.store);
        let o = m.objective(&mut g, &input, &[1, 2], &cat, &AlignNegatives { items: vec![3, 4], queries: vec![1, 2] }, &LossWeights::default(), None);
        g.backward(o.total, 1.0, &mut grads);
        let user_row: f64 = m.store.get(m.emb.user).row(input.user).iter().map(|x| x * x).sum();
        assert!(m.squared_norm(&grads) >= dense + user_row - 1e-15);
    }
}
