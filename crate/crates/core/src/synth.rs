//! Synthetic search-and-recommendation logs with a controlled overlap between
//! the categories users browse and the categories they search for.
//!
//! Each user has a few rec-interest categories and a few search-only
//! categories. A fraction `overlap` of search events target a rec-interest
//! category (and shift the user's current focus to it, so search history is
//! predictive of upcoming rec items); the rest target a search-only category.
//! Queries of one category share a term pool, so query-item alignment is
//! learnable from co-occurrence.

use crate::config::KeyValues;
use crate::data::{CategoryId, ItemId, QueryId, RawRecord, TermId, UserId};
use crate::error::{Error, Result};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_queries: usize,
    pub n_terms: usize,
    /// Fraction of search events drawn from rec-interest categories.
    pub overlap: f64,
    pub rec_len_min: usize,
    pub rec_len_max: usize,
    pub search_len_min: usize,
    pub search_len_max: usize,
    pub max_clicks: usize,
    pub zero_click_prob: f64,
    pub n_sources: u32,
    pub rec_interests_min: usize,
    pub rec_interests_max: usize,
    pub search_interests_min: usize,
    pub search_interests_max: usize,
    /// Probability a rec event comes from the current focus category.
    pub focus_prob: f64,
    pub popularity_exponent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 200,
            n_categories: 10,
            n_queries: 400,
            n_terms: 300,
            overlap: 0.5,
            rec_len_min: 8,
            rec_len_max: 20,
            search_len_min: 4,
            search_len_max: 10,
            max_clicks: 3,
            zero_click_prob: 0.25,
            n_sources: 3,
            rec_interests_min: 2,
            rec_interests_max: 4,
            search_interests_min: 1,
            search_interests_max: 2,
            focus_prob: 0.7,
            popularity_exponent: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.set("n_users", &mut c.n_users)?;
        kv.set("n_items", &mut c.n_items)?;
        kv.set("n_categories", &mut c.n_categories)?;
        kv.set("n_queries", &mut c.n_queries)?;
        kv.set("n_terms", &mut c.n_terms)?;
        kv.set("overlap", &mut c.overlap)?;
        kv.set("rho", &mut c.overlap)?;
        kv.set("rec_len_min", &mut c.rec_len_min)?;
        kv.set("rec_len_max", &mut c.rec_len_max)?;
        kv.set("search_len_min", &mut c.search_len_min)?;
        kv.set("search_len_max", &mut c.search_len_max)?;
        kv.set("max_clicks", &mut c.max_clicks)?;
        kv.set("zero_click_prob", &mut c.zero_click_prob)?;
        kv.set("n_sources", &mut c.n_sources)?;
        kv.set("rec_interests_min", &mut c.rec_interests_min)?;
        kv.set("rec_interests_max", &mut c.rec_interests_max)?;
        kv.set("search_interests_min", &mut c.search_interests_min)?;
        kv.set("search_interests_max", &mut c.search_interests_max)?;
        kv.set("focus_prob", &mut c.focus_prob)?;
        kv.set("popularity_exponent", &mut c.popularity_exponent)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.overlap) {
            return err(format!("overlap must lie in [0,1], got {}", self.overlap));
        }
        if !(0.0..=1.0).contains(&self.zero_click_prob) || !(0.0..=1.0).contains(&self.focus_prob) {
            return err("probabilities must lie in [0,1]".into());
        }
        if self.n_users == 0 || self.n_sources == 0 {
            return err("n_users and n_sources must be positive".into());
        }
        if self.rec_interests_min == 0 || self.rec_interests_min > self.rec_interests_max {
            return err("need 1 <= rec_interests_min <= rec_interests_max".into());
        }
        if self.search_interests_min == 0 || self.search_interests_min > self.search_interests_max {
            return err("need 1 <= search_interests_min <= search_interests_max".into());
        }
        if self.n_categories < self.rec_interests_max + self.search_interests_max {
            return err(format!(
                "n_categories ({}) must cover rec_interests_max + search_interests_max ({})",
                self.n_categories,
                self.rec_interests_max + self.search_interests_max
            ));
        }
        if self.n_items < self.n_categories || self.n_queries < self.n_categories || self.n_terms < self.n_categories {
            return err("n_items, n_queries and n_terms must each be >= n_categories".into());
        }
        if self.rec_len_min == 0 || self.rec_len_min > self.rec_len_max || self.search_len_min > self.search_len_max {
            return err("sequence length ranges must be non-empty and rec_len_min >= 1".into());
        }
        if self.max_clicks == 0 && self.zero_click_prob < 1.0 {
            return err("max_clicks = 0 requires zero_click_prob = 1".into());
        }
        Ok(())
    }
}

/// Ground-truth interests of a generated user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user: UserId,
    pub rec_categories: Vec<CategoryId>,
    pub search_categories: Vec<CategoryId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<RawRecord>,
    pub profiles: Vec<UserProfile>,
}

impl SyntheticData {
    /// Share of search clicks whose category is one of the user's rec interests.
    pub fn measured_overlap(&self) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for r in self.records.iter().filter(|r| r.kind == "search") {
            let profile = &self.profiles[(r.user - 1) as usize];
            for c in r.click_categories.iter().flatten() {
                total += 1;
                hits += usize::from(profile.rec_categories.contains(c));
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

struct Universe {
    /// items per category, most popular first
    items: Vec<Vec<ItemId>>,
    item_weights: Vec<f64>,
    queries: Vec<Vec<QueryId>>,
    query_terms: Vec<Vec<TermId>>,
}

fn build_universe(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Universe {
    let nc = cfg.n_categories;
    let mut item_ids: Vec<ItemId> = (1..=cfg.n_items as ItemId).collect();
    item_ids.shuffle(rng);
    let mut items = vec![Vec::new(); nc];
    for (k, id) in item_ids.into_iter().enumerate() {
        items[k % nc].push(id);
    }
    let max_per_cat = items.iter().map(Vec::len).max().unwrap_or(0);
    let item_weights = (0..max_per_cat).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_exponent)).collect();

    let mut term_pools = vec![Vec::new(); nc];
    for t in 1..=cfg.n_terms as TermId {
        term_pools[(t as usize - 1) % nc].push(t);
    }
    let mut queries = vec![Vec::new(); nc];
    let mut query_terms = vec![Vec::new(); cfg.n_queries + 1];
    for q in 1..=cfg.n_queries as QueryId {
        let c = (q as usize - 1) % nc;
        queries[c].push(q);
        let pool = &term_pools[c];
        let n_terms = rng.random_range(1..=3usize.min(pool.len()));
        query_terms[q as usize] = pool.choose_multiple(rng, n_terms).copied().collect();
    }
    Universe { items, item_weights, queries, query_terms }
}

fn pick_item(u: &Universe, cat: usize, rng: &mut ChaCha8Rng) -> ItemId {
    let pool = &u.items[cat];
    let weights = &u.item_weights[..pool.len()];
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (item, w) in pool.iter().zip(weights) {
        if x < *w {
            return *item;
        }
        x -= w;
    }
    *pool.last().expect("category without items")
}

/// Generates the event stream. Deterministic in `(cfg, seed)`; user ids are
/// `1..=n_users`, timestamps are per-user event indices starting at 1.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let universe = build_universe(cfg, &mut rng);
    let categories: Vec<usize> = (0..cfg.n_categories).collect();

    let mut records = Vec::new();
    let mut profiles = Vec::with_capacity(cfg.n_users);
    for user in 1..=cfg.n_users as UserId {
        let n_rec_cats = rng.random_range(cfg.rec_interests_min..=cfg.rec_interests_max);
        let n_search_cats = rng.random_range(cfg.search_interests_min..=cfg.search_interests_max);
        let mut shuffled = categories.clone();
        shuffled.shuffle(&mut rng);
        let rec_cats: Vec<usize> = shuffled[..n_rec_cats].to_vec();
        let search_cats: Vec<usize> = shuffled[n_rec_cats..n_rec_cats + n_search_cats].to_vec();
        let rec_weights: Vec<f64> = (0..n_rec_cats).map(|_| 0.2 + rng.random::<f64>()).collect();
        let weight_total: f64 = rec_weights.iter().sum();
        let sample_rec_cat = |rng: &mut ChaCha8Rng| {
            let mut x = rng.random::<f64>() * weight_total;
            for (c, w) in rec_cats.iter().zip(&rec_weights) {
                if x < *w {
                    return *c;
                }
                x -= w;
            }
            *rec_cats.last().unwrap()
        };

        let n_rec = rng.random_range(cfg.rec_len_min..=cfg.rec_len_max);
        let n_search = rng.random_range(cfg.search_len_min..=cfg.search_len_max);
        let mut kinds: Vec<bool> = std::iter::repeat_n(true, n_rec).chain(std::iter::repeat_n(false, n_search)).collect();
        kinds.shuffle(&mut rng);

        let mut focus = sample_rec_cat(&mut rng);
        for (k, is_rec) in kinds.into_iter().enumerate() {
            let ts = k as i64 + 1;
            if is_rec {
                let cat = if rng.random::<f64>() < cfg.focus_prob { focus } else { sample_rec_cat(&mut rng) };
                let item = pick_item(&universe, cat, &mut rng);
                records.push(RawRecord {
                    user,
                    kind: "rec".into(),
                    item: Some(item),
                    category: Some(cat as CategoryId),
                    ts,
                    ..Default::default()
                });
            } else {
                let cat = if rng.random::<f64>() < cfg.overlap {
                    let c = *rec_cats.choose(&mut rng).unwrap();
                    focus = c;
                    c
                } else {
                    *search_cats.choose(&mut rng).unwrap()
                };
                let query = *universe.queries[cat].choose(&mut rng).unwrap();
                let n_clicks = if rng.random::<f64>() < cfg.zero_click_prob { 0 } else { rng.random_range(1..=cfg.max_clicks) };
                let clicks: Vec<ItemId> = (0..n_clicks).map(|_| pick_item(&universe, cat, &mut rng)).collect();
                records.push(RawRecord {
                    user,
                    kind: "search".into(),
                    category: Some(cat as CategoryId),
                    query: Some(query),
                    terms: Some(universe.query_terms[query as usize].clone()),
                    click_categories: Some(vec![cat as CategoryId; clicks.len()]),
                    clicks: Some(clicks),
                    source: Some(rng.random_range(0..cfg.n_sources)),
                    ts,
                    ..Default::default()
                });
            }
        }
        profiles.push(UserProfile {
            user,
            rec_categories: rec_cats.iter().map(|&c| c as CategoryId).collect(),
            search_categories: search_cats.iter().map(|&c| c as CategoryId).collect(),
        });
    }
    Ok(SyntheticData { records, profiles })
}

/// Distinct categories per user, for tests and reports.
pub fn category_sets(profiles: &[UserProfile]) -> Vec<(BTreeSet<CategoryId>, BTreeSet<CategoryId>)> {
    profiles
        .iter()
        .map(|p| (p.rec_categories.iter().copied().collect(), p.search_categories.iter().copied().collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(overlap: f64) -> SynthConfig {
        SynthConfig { n_users: 100, overlap, ..Default::default() }
    }

    #[test]
    fn full_overlap_keeps_clicks_in_rec_interests() {
        let data = generate_synthetic(&small(1.0), 1).unwrap();
        for r in data.records.iter().filter(|r| r.kind == "search") {
            let p = &data.profiles[(r.user - 1) as usize];
            assert!(r.click_categories.as_ref().unwrap().iter().all(|c| p.rec_categories.contains(c)));
        }
        assert_eq!(data.measured_overlap(), 1.0);
    }

    #[test]
    fn zero_overlap_keeps_clicks_out_of_rec_interests() {
        let data = generate_synthetic(&small(0.0), 2).unwrap();
        for r in data.records.iter().filter(|r| r.kind == "search") {
            let p = &data.profiles[(r.user - 1) as usize];
            assert!(r.click_categories.as_ref().unwrap().iter().all(|c| !p.rec_categories.contains(c)));
        }
        assert_eq!(data.measured_overlap(), 0.0);
    }

    #[test]
    fn rec_items_follow_rec_interests() {
        let data = generate_synthetic(&small(0.5), 3).unwrap();
        for r in data.records.iter().filter(|r| r.kind == "rec") {
            let p = &data.profiles[(r.user - 1) as usize];
            assert!(p.rec_categories.contains(&r.category.unwrap()));
        }
    }

    #[test]
    fn overlap_outside_unit_interval_is_rejected() {
        assert!(matches!(generate_synthetic(&small(1.5), 0), Err(Error::Config(_))));
        assert!(matches!(SynthConfig::from_key_values(&KeyValues::parse("overlap = -0.1").unwrap()), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(0.5), 9).unwrap();
        let b = generate_synthetic(&small(0.5), 9).unwrap();
        assert_eq!(a.records, b.records);
        assert_ne!(a.records, generate_synthetic(&small(0.5), 10).unwrap().records);
    }
}
