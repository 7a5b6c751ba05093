//! Lookup tables, projections into the shared width `d`, and the bias
//! encodings that produce the recommendation matrix `E_r` and the search
//! matrix `E_s`.

use crate::autograd::{Graph, Var};
use crate::corpus::{DenseCatalog, ModelInput};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{ParamId, ParamKind, ParamStore, INIT_STD};
use crate::tensor::Mat;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub user: ParamId,
    pub item_id: ParamId,
    pub item_attr: ParamId,
    pub query_id: ParamId,
    pub term: ParamId,
    pub pos_rec: ParamId,
    pub pos_search: ParamId,
    pub source: ParamId,
    pub w_item: ParamId,
    pub w_query: ParamId,
    pub d_item: usize,
    pub d_query: usize,
    pub d: usize,
    pub n_sources: usize,
}

/// `E_r`, `E_s` with masks plus the projected query and clicked-item rows
/// the alignment loss works on.
pub struct EncodedInputs {
    pub e_r: Var,
    pub e_s: Var,
    pub rec_mask: Vec<bool>,
    pub search_mask: Vec<bool>,
    /// `T_s x d`, projected queries (padded rows zero)
    pub queries_hat: Var,
    /// `|S_c| x d`, projected clicked items in query order
    pub clicks_hat: Var,
    /// query position of each clicked-item row
    pub click_owner: Vec<usize>,
    pub click_items: Vec<usize>,
}

impl EmbeddingTables {
    pub fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let v = &cfg.vocab;
        let d = cfg.d;
        let e = ParamKind::Embedding;
        Self {
            user: store.add_normal("emb.user", e, v.users + 1, d, INIT_STD, rng),
            item_id: store.add_normal("emb.item_id", e, v.items + 1, cfg.item_id_dim, INIT_STD, rng),
            item_attr: store.add_normal("emb.item_category", e, v.categories + 1, cfg.item_attr_dim, INIT_STD, rng),
            query_id: store.add_normal("emb.query_id", e, v.queries + 1, cfg.query_id_dim, INIT_STD, rng),
            term: store.add_normal("emb.term", e, v.terms + 1, cfg.term_dim, INIT_STD, rng),
            pos_rec: store.add_normal("emb.pos_rec", ParamKind::Dense, cfg.max_rec_len, d, INIT_STD, rng),
            pos_search: store.add_normal("emb.pos_search", ParamKind::Dense, cfg.max_search_len, d, INIT_STD, rng),
            source: store.add_normal("emb.search_type", ParamKind::Dense, cfg.n_sources, d, INIT_STD, rng),
            w_item: store.add_normal("proj.w_item", ParamKind::Dense, cfg.d_item(), d, INIT_STD, rng),
            w_query: store.add_normal("proj.w_query", ParamKind::Dense, cfg.d_query(), d, INIT_STD, rng),
            d_item: cfg.d_item(),
            d_query: cfg.d_query(),
            d,
            n_sources: cfg.n_sources,
        }
    }

    /// `[ID ‖ category]` rows for dense item ids.
    pub fn items(&self, g: &mut Graph, items: &[usize], catalog: &DenseCatalog) -> Var {
        let cats: Vec<usize> = items.iter().map(|&i| catalog.item_category[i]).collect();
        let ids = g.gather(self.item_id, items);
        let attrs = g.gather(self.item_attr, &cats);
        g.concat_cols(&[ids, attrs])
    }

    /// `[ID ‖ mean(term rows)]` for each query; every term list must be non-empty.
    pub fn queries(&self, g: &mut Graph, queries: &[usize], terms: &[Vec<usize>]) -> Var {
        debug_assert_eq!(queries.len(), terms.len());
        let flat: Vec<usize> = terms.iter().flatten().copied().collect();
        let mut pool = Mat::zeros(queries.len(), flat.len());
        let mut off = 0;
        for (r, t) in terms.iter().enumerate() {
            assert!(!t.is_empty(), "query without terms");
            for c in off..off + t.len() {
                pool.set(r, c, 1.0 / t.len() as f64);
            }
            off += t.len();
        }
        let ids = g.gather(self.query_id, queries);
        let term_rows = g.gather(self.term, &flat);
        let pool = g.constant(pool);
        let mean = g.matmul(pool, term_rows);
        g.concat_cols(&[ids, mean])
    }

    pub fn user_row(&self, g: &mut Graph, user: usize) -> Var {
        g.gather(self.user, &[user])
    }

    pub fn project_items(&self, g: &mut Graph, e_items: Var) -> Var {
        let w = g.param(self.w_item);
        g.matmul(e_items, w)
    }

    pub fn project_queries(&self, g: &mut Graph, e_queries: Var) -> Var {
        let w = g.param(self.w_query);
        g.matmul(e_queries, w)
    }

    /// Mean of each query's clicked-item rows; zero-click queries get a zero row.
    pub fn group_pool(&self, g: &mut Graph, clicks_hat: Var, counts: &[usize]) -> Var {
        g_group_pool(g, clicks_hat, counts)
    }

    /// `Ê_i + P_r` over the first `rows` positions, zeroing masked rows.
    pub fn rec_bias(&self, g: &mut Graph, items_hat: Var, mask: &[bool]) -> Var {
        let t = g.shape(items_hat).0;
        let pos = g.param(self.pos_rec);
        let pos = g.select_rows(pos, &(0..t).collect::<Vec<_>>());
        let sum = g.add(items_hat, pos);
        g.mask_rows(sum, mask)
    }

    /// `Ê_q + Ẽ_c + P_s + M̂_s`, zeroing masked rows.
    pub fn search_bias(&self, g: &mut Graph, queries_hat: Var, pooled_clicks: Var, sources: &[usize], mask: &[bool]) -> Var {
        let t = g.shape(queries_hat).0;
        let pos = g.param(self.pos_search);
        let pos = g.select_rows(pos, &(0..t).collect::<Vec<_>>());
        let types = g.param(self.source);
        let types = g.select_rows(types, sources);
        let a = g.add(queries_hat, pooled_clicks);
        let b = g.add(a, pos);
        let c = g.add(b, types);
        g.mask_rows(c, mask)
    }

    /// Full embedding pipeline for one user prefix. `pad_to` right-pads both
    /// sequences with masked positions.
    pub fn encode_inputs(&self, g: &mut Graph, input: &ModelInput, catalog: &DenseCatalog, pad_to: Option<(usize, usize)>) -> EncodedInputs {
        let t_r = input.rec_items.len();
        let t_s = input.queries.len();
        let (len_r, len_s) = pad_to.unwrap_or((t_r, t_s));
        assert!(len_r >= t_r && len_s >= t_s, "pad_to shorter than the sequences");

        let mut rec_items = input.rec_items.clone();
        rec_items.resize(len_r, 0);
        let rec_mask: Vec<bool> = (0..len_r).map(|k| k < t_r).collect();
        let e_i = self.items(g, &rec_items, catalog);
        let e_i_hat = self.project_items(g, e_i);
        let e_r = self.rec_bias(g, e_i_hat, &rec_mask);

        let mut queries = input.queries.clone();
        let mut terms = input.query_terms.clone();
        let mut sources = input.sources.clone();
        queries.resize(len_s, 0);
        terms.resize(len_s, vec![0]);
        sources.resize(len_s, 0);
        let search_mask: Vec<bool> = (0..len_s).map(|k| k < t_s).collect();
        let e_q = self.queries(g, &queries, &terms);
        let q_hat = self.project_queries(g, e_q);
        let queries_hat = g.mask_rows(q_hat, &search_mask);

        let click_items: Vec<usize> = input.clicks.iter().flatten().copied().collect();
        let click_owner: Vec<usize> = input.clicks.iter().enumerate().flat_map(|(j, c)| std::iter::repeat_n(j, c.len())).collect();
        let mut counts: Vec<usize> = input.clicks.iter().map(Vec::len).collect();
        counts.resize(len_s, 0);
        let e_c = self.items(g, &click_items, catalog);
        let clicks_hat = self.project_items(g, e_c);
        let pooled = self.group_pool(g, clicks_hat, &counts);
        let e_s = self.search_bias(g, queries_hat, pooled, &sources, &search_mask);

        EncodedInputs { e_r, e_s, rec_mask, search_mask, queries_hat, clicks_hat, click_owner, click_items }
    }

    fn check_item(&self, store: &ParamStore, item: usize) -> Result<()> {
        if item == 0 || item >= store.get(self.item_id).rows() {
            return Err(Error::UnknownId { kind: "item", id: item as u64 });
        }
        Ok(())
    }

    /// Item representation `[ID ‖ attribute]` of width `d_i`.
    pub fn embed_item(&self, store: &ParamStore, item: usize, category: usize) -> Result<Vec<f64>> {
        self.check_item(store, item)?;
        if category >= store.get(self.item_attr).rows() {
            return Err(Error::UnknownId { kind: "category", id: category as u64 });
        }
        let mut g = Graph::new(store);
        let catalog = DenseCatalog { item_category: single_category(item, category), query_terms: vec![] };
        let v = self.items(&mut g, &[item], &catalog);
        Ok(g.value(v).row(0).to_vec())
    }

    /// Query representation `[ID ‖ mean(terms)]` of width `d_q`.
    pub fn embed_query(&self, store: &ParamStore, query: usize, terms: &[usize]) -> Result<Vec<f64>> {
        if terms.is_empty() {
            return Err(Error::Invalid("query has no terms".into()));
        }
        if query == 0 || query >= store.get(self.query_id).rows() {
            return Err(Error::UnknownId { kind: "query", id: query as u64 });
        }
        if let Some(&t) = terms.iter().find(|&&t| t == 0 || t >= store.get(self.term).rows()) {
            return Err(Error::UnknownId { kind: "term", id: t as u64 });
        }
        let mut g = Graph::new(store);
        let v = self.queries(&mut g, &[query], &[terms.to_vec()]);
        Ok(g.value(v).row(0).to_vec())
    }

    /// `(E_i W_i, E_q W_q, E_c W_i)`.
    pub fn project(&self, store: &ParamStore, e_i: &Mat, e_q: &Mat, e_c: &Mat) -> Result<(Mat, Mat, Mat)> {
        for (name, m, w) in [("project items", e_i, self.d_item), ("project queries", e_q, self.d_query), ("project clicks", e_c, self.d_item)] {
            if m.cols() != w {
                return Err(Error::shape(name, format!("width {w}"), format!("width {}", m.cols())));
            }
        }
        let mut g = Graph::new(store);
        let (a, b, c) = (g.constant(e_i.clone()), g.constant(e_q.clone()), g.constant(e_c.clone()));
        let (a, b, c) = (self.project_items(&mut g, a), self.project_queries(&mut g, b), self.project_items(&mut g, c));
        Ok((g.value(a).clone(), g.value(b).clone(), g.value(c).clone()))
    }

    /// `E_r = Ê_i + P_r` for an unpadded sequence.
    pub fn rec_bias_encode(&self, store: &ParamStore, items_hat: &Mat) -> Result<Mat> {
        if items_hat.rows() > store.get(self.pos_rec).rows() {
            return Err(Error::shape("rec_bias_encode", format!("at most {} positions", store.get(self.pos_rec).rows()), items_hat.rows()));
        }
        if items_hat.cols() != self.d {
            return Err(Error::shape("rec_bias_encode", format!("width {}", self.d), items_hat.cols()));
        }
        let mut g = Graph::new(store);
        let x = g.constant(items_hat.clone());
        let v = self.rec_bias(&mut g, x, &vec![true; items_hat.rows()]);
        Ok(g.value(v).clone())
    }

    /// `E_s = Ê_q + Ẽ_c + P_s + M̂_s` for an unpadded sequence.
    pub fn search_bias_encode(&self, store: &ParamStore, queries_hat: &Mat, pooled_clicks: &Mat, sources: &[usize]) -> Result<Mat> {
        let t = queries_hat.rows();
        if pooled_clicks.shape() != queries_hat.shape() || sources.len() != t {
            return Err(Error::shape("search_bias_encode", format!("{t}x{} inputs and {t} sources", self.d), format!("{:?} and {}", pooled_clicks.shape(), sources.len())));
        }
        if queries_hat.cols() != self.d || t > store.get(self.pos_search).rows() {
            return Err(Error::shape("search_bias_encode", format!("width {} and <= {} rows", self.d, store.get(self.pos_search).rows()), format!("{:?}", queries_hat.shape())));
        }
        if let Some(&s) = sources.iter().find(|&&s| s >= self.n_sources) {
            return Err(Error::Invalid(format!("search source {s} outside [0, {})", self.n_sources)));
        }
        let mut g = Graph::new(store);
        let q = g.constant(queries_hat.clone());
        let c = g.constant(pooled_clicks.clone());
        let v = self.search_bias(&mut g, q, c, sources, &vec![true; t]);
        Ok(g.value(v).clone())
    }
}

fn single_category(item: usize, category: usize) -> Vec<usize> {
    let mut v = vec![0; item + 1];
    v[item] = category;
    v
}

fn g_group_pool(g: &mut Graph, clicks_hat: Var, counts: &[usize]) -> Var {
    let total: usize = counts.iter().sum();
    assert_eq!(total, g.shape(clicks_hat).0, "click counts do not cover the clicked rows");
    let mut pool = Mat::zeros(counts.len(), total);
    let mut off = 0;
    for (r, &n) in counts.iter().enumerate() {
        for c in off..off + n {
            pool.set(r, c, 1.0 / n as f64);
        }
        off += n;
    }
    let pool = g.constant(pool);
    g.matmul(pool, clicks_hat)
}

/// Groups projected clicked-item rows by their query and mean-pools each group.
pub fn group_pool_clicked(clicks_hat: &Mat, counts: &[usize]) -> Result<Mat> {
    let total: usize = counts.iter().sum();
    if total != clicks_hat.rows() {
        return Err(Error::shape("group_pool_clicked", format!("{total} clicked rows"), clicks_hat.rows()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(clicks_hat.clone());
    let v = g_group_pool(&mut g, x, counts);
    Ok(g.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VocabSizes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ParamStore, EmbeddingTables) {
        let mut cfg = ModelConfig::for_vocab(VocabSizes { users: 3, items: 6, queries: 4, terms: 5, categories: 2 });
        cfg.item_id_dim = 3;
        cfg.item_attr_dim = 2;
        cfg.query_id_dim = 2;
        cfg.term_dim = 3;
        cfg.d = 4;
        cfg.max_rec_len = 4;
        cfg.max_search_len = 3;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = EmbeddingTables::new(&cfg, &mut store, &mut rng);
        (cfg, store, t)
    }

    #[test]
    fn item_embedding_is_id_then_attribute() {
        let (_, store, t) = setup();
        let v = t.embed_item(&store, 2, 1).unwrap();
        let mut manual = store.get(t.item_id).row(2).to_vec();
        manual.extend_from_slice(store.get(t.item_attr).row(1));
        assert_eq!(v, manual);
        assert!(matches!(t.embed_item(&store, 99, 1), Err(Error::UnknownId { .. })));
    }

    #[test]
    fn zero_tables_give_zero_item() {
        let (_, mut store, t) = setup();
        store.get_mut(t.item_id).data_mut().fill(0.0);
        store.get_mut(t.item_attr).data_mut().fill(0.0);
        assert!(t.embed_item(&store, 3, 2).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn query_embedding_means_terms() {
        let (_, store, t) = setup();
        let v = t.embed_query(&store, 1, &[2, 4]).unwrap();
        let terms = store.get(t.term);
        for k in 0..3 {
            let mean = (terms.get(2, k) + terms.get(4, k)) / 2.0;
            assert!((v[2 + k] - mean).abs() < 1e-15);
        }
        assert_eq!(&v[..2], store.get(t.query_id).row(1));
        let single = t.embed_query(&store, 1, &[3]).unwrap();
        assert_eq!(&single[2..], terms.row(3));
        let same = t.embed_query(&store, 1, &[3, 3, 3]).unwrap();
        for (a, b) in same.iter().zip(&single) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(t.embed_query(&store, 1, &[]).is_err());
    }

    #[test]
    fn projection_matches_matmul_and_checks_width() {
        let (_, mut store, t) = setup();
        let e_i = Mat::from_rows(&[vec![0.1, 0.2, 0.3, 0.4, 0.5], vec![1.0, -1.0, 0.5, 0.0, 2.0], vec![0.3, 0.3, 0.3, -0.3, 0.0]]);
        let e_q = Mat::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        let (a, _, c) = t.project(&store, &e_i, &e_q, &e_i).unwrap();
        let w = store.get(t.w_item);
        for r in 0..3 {
            for col in 0..4 {
                let oracle: f64 = (0..5).map(|k| e_i.get(r, k) * w.get(k, col)).sum();
                assert!((a.get(r, col) - oracle).abs() < 1e-12);
            }
        }
        assert_eq!(a, c);
        store.get_mut(t.w_query).data_mut().fill(0.0);
        let (_, b, _) = t.project(&store, &e_i, &e_q, &e_i).unwrap();
        assert!(b.data().iter().all(|&x| x == 0.0));
        let narrow = Mat::zeros(1, 3);
        assert!(matches!(t.project(&store, &narrow, &e_q, &e_i), Err(Error::Shape { .. })));
        // linearity
        let (a2, _, _) = t.project(&store, &e_i.map(|x| 2.5 * x), &e_q, &e_i).unwrap();
        assert!(a2.max_abs_diff(&a.map(|x| 2.5 * x)) < 1e-12);
    }

    #[test]
    fn group_pooling() {
        let rows = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let out = group_pool_clicked(&rows, &[2, 0, 1]).unwrap();
        assert_eq!(out, Mat::from_rows(&[vec![2.0, 3.0], vec![0.0, 0.0], vec![5.0, 6.0]]));
        assert_eq!(group_pool_clicked(&rows, &[1, 1, 1]).unwrap(), rows);
        assert_eq!(group_pool_clicked(&rows, &[3]).unwrap(), Mat::from_rows(&[vec![3.0, 4.0]]));
        assert!(group_pool_clicked(&rows, &[1, 1]).is_err());
    }

    #[test]
    fn bias_encodings() {
        let (_, mut store, t) = setup();
        let x = Mat::from_rows(&[vec![0.5, -0.5, 1.0, 0.0], vec![0.1, 0.2, 0.3, 0.4]]);
        let e_r = t.rec_bias_encode(&store, &x).unwrap();
        let p = store.get(t.pos_rec);
        for r in 0..2 {
            for c in 0..4 {
                assert_eq!(e_r.get(r, c), x.get(r, c) + p.get(r, c));
            }
        }
        assert!(t.rec_bias_encode(&store, &Mat::zeros(5, 4)).is_err());

        let zero = Mat::zeros(2, 4);
        let e_s = t.search_bias_encode(&store, &x, &zero, &[0, 2]).unwrap();
        let (ps, ms) = (store.get(t.pos_search), store.get(t.source));
        for c in 0..4 {
            assert!((e_s.get(1, c) - (x.get(1, c) + ps.get(1, c) + ms.get(2, c))).abs() < 1e-15);
        }
        assert!(t.search_bias_encode(&store, &x, &zero, &[0, 3]).is_err());

        store.get_mut(t.pos_search).data_mut().fill(0.0);
        store.get_mut(t.source).data_mut().fill(0.0);
        assert_eq!(t.search_bias_encode(&store, &x, &zero, &[1, 2]).unwrap(), x);
        // equal rows, distinct sources: rows differ by the type-row difference
        let ms = Mat::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0], vec![0.0, 0.0, 3.0, 0.0]]);
        *store.get_mut(t.source) = ms.clone();
        let same = Mat::from_rows(&[vec![0.2; 4], vec![0.2; 4]]);
        let e_s = t.search_bias_encode(&store, &same, &zero, &[0, 2]).unwrap();
        for c in 0..4 {
            assert!((e_s.get(0, c) - e_s.get(1, c) - (ms.get(0, c) - ms.get(2, c))).abs() < 1e-15);
        }
    }
}
