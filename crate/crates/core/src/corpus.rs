//! A preprocessed dataset ready for the model: filtered histories split into
//! examples, dense vocabularies (index 0 reserved for padding) and fixed
//! evaluation negatives.

use crate::config::KeyValues;
use crate::data::{
    build_histories, filter_items, filter_users, leave_one_out_split, sample_eval_negatives, BuildReport, Catalog, CategoryId,
    DatasetSplit, Example, Histories, ItemId, QueryId, RawRecord, TermId, UserId,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    raw: Vec<u32>,
    #[serde(skip)]
    dense: HashMap<u32, usize>,
}

impl IdMap {
    pub fn from_ids(ids: impl IntoIterator<Item = u32>) -> Self {
        let sorted: BTreeSet<u32> = ids.into_iter().collect();
        let raw: Vec<u32> = sorted.into_iter().collect();
        let dense = raw.iter().enumerate().map(|(k, &r)| (r, k + 1)).collect();
        Self { raw, dense }
    }

    /// Dense index in `1..=len()`.
    pub fn dense(&self, raw: u32) -> Option<usize> {
        self.dense.get(&raw).copied()
    }

    pub fn raw(&self, dense: usize) -> u32 {
        self.raw[dense - 1]
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Rows an embedding table needs, including the padding row.
    pub fn table_rows(&self) -> usize {
        self.raw.len() + 1
    }

    pub fn raw_ids(&self) -> &[u32] {
        &self.raw
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub users: IdMap,
    pub items: IdMap,
    pub queries: IdMap,
    pub terms: IdMap,
    pub categories: IdMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub users: usize,
    pub items: usize,
    pub queries: usize,
    pub terms: usize,
    pub categories: usize,
}

impl Vocab {
    pub fn sizes(&self) -> VocabSizes {
        VocabSizes {
            users: self.users.len(),
            items: self.items.len(),
            queries: self.queries.len(),
            terms: self.terms.len(),
            categories: self.categories.len(),
        }
    }
}

/// Dense-index lookups the model needs for candidate items and sampled queries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseCatalog {
    /// item → category (0 when unknown)
    pub item_category: Vec<usize>,
    /// query → terms
    pub query_terms: Vec<Vec<usize>>,
}

/// Dense model input for one user prefix, oldest event first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelInput {
    pub user: usize,
    pub rec_items: Vec<usize>,
    pub queries: Vec<usize>,
    pub query_terms: Vec<Vec<usize>>,
    pub sources: Vec<usize>,
    pub clicks: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub min_interactions: usize,
    pub min_item_count: usize,
    pub max_rec_len: usize,
    pub max_search_len: usize,
    pub n_sources: u32,
    pub eval_negatives: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { min_interactions: 5, min_item_count: 5, max_rec_len: 15, max_search_len: 15, n_sources: 3, eval_negatives: 99 }
    }
}

impl PrepConfig {
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("min_interactions", &mut self.min_interactions)?;
        kv.set("min_item_count", &mut self.min_item_count)?;
        kv.set("max_rec_len", &mut self.max_rec_len)?;
        kv.set("max_search_len", &mut self.max_search_len)?;
        kv.set("n_sources", &mut self.n_sources)?;
        kv.set("eval_negatives", &mut self.eval_negatives)?;
        if self.max_rec_len == 0 || self.max_search_len == 0 || self.n_sources == 0 {
            return Err(Error::Config("max_rec_len, max_search_len and n_sources must be positive".into()));
        }
        Ok(())
    }
}

/// A held-out target with its fixed sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub example: Example,
    pub negatives: Vec<ItemId>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub catalog: Catalog,
    pub dense_catalog: DenseCatalog,
    pub histories: Histories,
    pub train: Vec<Example>,
    pub validation: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
    pub build_report: BuildReport,
    pub split: DatasetSplit,
    pub prep: PrepConfig,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed derivation.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(seed, a.wrapping_add(1), b.wrapping_add(1))
}

impl Corpus {
    /// Builds histories, filters items then users, splits leave-one-out,
    /// truncates prefixes and samples evaluation negatives.
    pub fn prepare(records: &[RawRecord], prep: &PrepConfig, seed: u64) -> Result<Corpus> {
        let (raw_histories, build_report) = build_histories(records, prep.n_sources);
        let histories = filter_users(&filter_items(&raw_histories, prep.min_item_count), prep.min_interactions);
        if histories.is_empty() {
            return Err(Error::Data("no users left after filtering".into()));
        }
        let catalog = Catalog::from_records(records);

        let mut items = BTreeSet::new();
        let mut queries = BTreeSet::new();
        let mut terms = BTreeSet::new();
        for h in histories.values() {
            items.extend(h.rec_events.iter().map(|e| e.item_id));
            for s in &h.search_events {
                items.extend(s.clicked_item_ids.iter().copied());
                queries.insert(s.query.query_id);
                terms.extend(s.query.term_ids.iter().copied());
            }
        }
        let categories: BTreeSet<CategoryId> = items.iter().filter_map(|i| catalog.category(*i)).collect();
        let vocab = Vocab {
            users: IdMap::from_ids(histories.keys().copied()),
            items: IdMap::from_ids(items),
            queries: IdMap::from_ids(queries.iter().copied()),
            terms: IdMap::from_ids(terms),
            categories: IdMap::from_ids(categories),
        };

        let mut item_category = vec![0; vocab.items.table_rows()];
        for (k, &raw) in vocab.items.raw_ids().iter().enumerate() {
            if let Some(c) = catalog.category(raw) {
                item_category[k + 1] = vocab.categories.dense(c).unwrap_or(0);
            }
        }
        let mut query_terms = vec![Vec::new(); vocab.queries.table_rows()];
        for (k, &raw) in vocab.queries.raw_ids().iter().enumerate() {
            let ts = catalog.query_terms.get(&raw).cloned().unwrap_or_default();
            query_terms[k + 1] = ts.iter().filter_map(|t| vocab.terms.dense(*t)).collect();
        }
        let dense_catalog = DenseCatalog { item_category, query_terms };

        let mut split = leave_one_out_split(&histories);
        split.truncate(prep.max_rec_len, prep.max_search_len);
        let pool = vocab.items.raw_ids().to_vec();
        let attach = |examples: &[Example], salt: u64| -> Result<Vec<EvalCase>> {
            examples
                .iter()
                .map(|ex| {
                    let full = &histories[&ex.user_id];
                    let negatives = sample_eval_negatives(full, &pool, prep.eval_negatives, derive_seed(seed, salt, ex.user_id as u64))?;
                    Ok(EvalCase { example: ex.clone(), negatives })
                })
                .collect()
        };
        let validation = attach(&split.validation, 1)?;
        let test = attach(&split.test, 2)?;
        Ok(Corpus {
            vocab,
            catalog,
            dense_catalog,
            histories,
            train: split.train.clone(),
            validation,
            test,
            build_report,
            split,
            prep: prep.clone(),
        })
    }

    pub fn input(&self, ex: &Example) -> ModelInput {
        let v = &self.vocab;
        let item = |i: ItemId| v.items.dense(i).expect("item outside vocabulary");
        let p = &ex.prefix;
        ModelInput {
            user: v.users.dense(ex.user_id).expect("user outside vocabulary"),
            rec_items: p.rec_events.iter().map(|e| item(e.item_id)).collect(),
            queries: p.search_events.iter().map(|s| v.queries.dense(s.query.query_id).expect("query outside vocabulary")).collect(),
            query_terms: p
                .search_events
                .iter()
                .map(|s| s.query.term_ids.iter().map(|t| v.terms.dense(*t).expect("term outside vocabulary")).collect())
                .collect(),
            sources: p.search_events.iter().map(|s| s.query.source_type as usize).collect(),
            clicks: p.search_events.iter().map(|s| s.clicked_item_ids.iter().map(|&i| item(i)).collect()).collect(),
        }
    }

    pub fn dense_item(&self, item: ItemId) -> Result<usize> {
        self.vocab.items.dense(item).ok_or(Error::UnknownId { kind: "item", id: item as u64 })
    }

    pub fn raw_user(&self, dense: usize) -> UserId {
        self.vocab.users.raw(dense)
    }

    pub fn raw_query(&self, dense: usize) -> QueryId {
        self.vocab.queries.raw(dense)
    }

    pub fn raw_term(&self, dense: usize) -> TermId {
        self.vocab.terms.raw(dense)
    }

    /// Category of a raw item, if known.
    pub fn category_of(&self, item: ItemId) -> Option<CategoryId> {
        self.catalog.category(item)
    }
}
