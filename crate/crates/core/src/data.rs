//! Users, items, queries and their behavior logs: ingestion, filtering,
//! leave-one-out splitting, truncation and negative sampling.

use crate::error::{Error, Result};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

pub type UserId = u32;
pub type ItemId = u32;
pub type QueryId = u32;
pub type TermId = u32;
pub type CategoryId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: QueryId,
    pub term_ids: Vec<TermId>,
    pub source_type: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchEvent {
    pub query: Query,
    /// May be empty.
    pub clicked_item_ids: Vec<ItemId>,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecEvent {
    pub item_id: ItemId,
    pub timestamp: i64,
    pub category_id: Option<CategoryId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: UserId,
    pub rec_events: Vec<RecEvent>,
    pub search_events: Vec<SearchEvent>,
}

impl UserHistory {
    pub fn new(user_id: UserId) -> Self {
        Self { user_id, ..Default::default() }
    }

    pub fn rec_len(&self) -> usize {
        self.rec_events.len()
    }

    pub fn search_len(&self) -> usize {
        self.search_events.len()
    }

    pub fn event_count(&self) -> usize {
        self.rec_events.len() + self.search_events.len()
    }

    /// Items the user consumed in recommendation or clicked in search.
    pub fn interacted_items(&self) -> HashSet<ItemId> {
        self.rec_events
            .iter()
            .map(|e| e.item_id)
            .chain(self.search_events.iter().flat_map(|s| s.clicked_item_ids.iter().copied()))
            .collect()
    }

    /// Events with timestamp strictly before `ts`.
    pub fn prefix_before(&self, ts: i64) -> UserHistory {
        UserHistory {
            user_id: self.user_id,
            rec_events: self.rec_events.iter().filter(|e| e.timestamp < ts).cloned().collect(),
            search_events: self.search_events.iter().filter(|e| e.timestamp < ts).cloned().collect(),
        }
    }
}

/// One line of the JSON-lines event file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub user: UserId,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<ItemId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<CategoryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<QueryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<TermId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clicks: Option<Vec<ItemId>>,
    /// Categories of `clicks`, position-aligned. Optional extension key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub click_categories: Option<Vec<CategoryId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<u32>,
    pub ts: i64,
}

pub fn read_events(path: &Path) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_events(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    /// (record index, reason)
    pub rejected: Vec<(usize, String)>,
    pub duplicates: usize,
}

pub type Histories = BTreeMap<UserId, UserHistory>;

/// Groups records by user and sorts each stream by timestamp (stable, so
/// equal timestamps keep input order). `n_sources` bounds `source`.
pub fn build_histories(records: &[RawRecord], n_sources: u32) -> (Histories, BuildReport) {
    let mut report = BuildReport::default();
    let mut seen: HashSet<(UserId, i64, bool)> = HashSet::new();
    let mut out: Histories = BTreeMap::new();

    for (idx, r) in records.iter().enumerate() {
        let is_rec = match r.kind.as_str() {
            "rec" => true,
            "search" => false,
            other => {
                report.rejected.push((idx, format!("unknown record type {other:?}")));
                continue;
            }
        };
        let parsed = if is_rec { parse_rec(r).map(Ok) } else { parse_search(r, n_sources).map(Err) };
        let event = match parsed {
            Ok(ev) => ev,
            Err(reason) => {
                report.rejected.push((idx, reason));
                continue;
            }
        };
        if !seen.insert((r.user, r.ts, is_rec)) {
            warn!("duplicate {} record for user {} at ts {}; keeping the first", r.kind, r.user, r.ts);
            report.duplicates += 1;
            continue;
        }
        let h = out.entry(r.user).or_insert_with(|| UserHistory::new(r.user));
        match event {
            Ok(rec) => h.rec_events.push(rec),
            Err(search) => h.search_events.push(search),
        }
    }
    for h in out.values_mut() {
        h.rec_events.sort_by_key(|e| e.timestamp);
        h.search_events.sort_by_key(|e| e.timestamp);
    }
    for (idx, reason) in &report.rejected {
        warn!("rejected record {idx}: {reason}");
    }
    (out, report)
}

fn parse_rec(r: &RawRecord) -> std::result::Result<RecEvent, String> {
    let item_id = r.item.ok_or("rec record without \"item\"")?;
    Ok(RecEvent { item_id, timestamp: r.ts, category_id: r.category })
}

fn parse_search(r: &RawRecord, n_sources: u32) -> std::result::Result<SearchEvent, String> {
    let query_id = r.query.ok_or("search record without \"query\"")?;
    let term_ids = r.terms.clone().unwrap_or_default();
    if term_ids.is_empty() {
        return Err("search record with empty \"terms\"".into());
    }
    let source_type = r.source.unwrap_or(0);
    if source_type >= n_sources {
        return Err(format!("source {source_type} outside [0, {n_sources})"));
    }
    Ok(SearchEvent {
        query: Query { query_id, term_ids, source_type },
        clicked_item_ids: r.clicks.clone().unwrap_or_default(),
        timestamp: r.ts,
    })
}

/// Item → category and query → terms lookups gathered from the raw log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub item_category: BTreeMap<ItemId, CategoryId>,
    pub query_terms: BTreeMap<QueryId, Vec<TermId>>,
    pub items: BTreeSet<ItemId>,
}

impl Catalog {
    /// First occurrence wins for both lookups.
    pub fn from_records(records: &[RawRecord]) -> Self {
        let mut c = Catalog::default();
        for r in records {
            match r.kind.as_str() {
                "rec" => {
                    if let Some(item) = r.item {
                        c.items.insert(item);
                        if let Some(cat) = r.category {
                            c.item_category.entry(item).or_insert(cat);
                        }
                    }
                }
                "search" => {
                    if let (Some(q), Some(terms)) = (r.query, &r.terms) {
                        if !terms.is_empty() {
                            c.query_terms.entry(q).or_insert_with(|| terms.clone());
                        }
                    }
                    let clicks = r.clicks.as_deref().unwrap_or_default();
                    c.items.extend(clicks.iter().copied());
                    if let Some(cats) = &r.click_categories {
                        for (&item, &cat) in clicks.iter().zip(cats) {
                            c.item_category.entry(item).or_insert(cat);
                        }
                    }
                }
                _ => {}
            }
        }
        c
    }

    pub fn category(&self, item: ItemId) -> Option<CategoryId> {
        self.item_category.get(&item).copied()
    }
}

/// Drops recommendation events and clicks on items with fewer than
/// `min_item_count` recommendation interactions across all users.
pub fn filter_items(histories: &Histories, min_item_count: usize) -> Histories {
    let mut counts: HashMap<ItemId, usize> = HashMap::new();
    for h in histories.values() {
        for e in &h.rec_events {
            *counts.entry(e.item_id).or_default() += 1;
        }
    }
    let keep = |i: &ItemId| counts.get(i).copied().unwrap_or(0) >= min_item_count;
    histories
        .iter()
        .map(|(&u, h)| {
            let mut h = h.clone();
            h.rec_events.retain(|e| keep(&e.item_id));
            for s in &mut h.search_events {
                s.clicked_item_ids.retain(keep);
            }
            (u, h)
        })
        .collect()
}

/// Keeps users with at least `min_interactions` rec events and at least one search event.
pub fn filter_users(histories: &Histories, min_interactions: usize) -> Histories {
    histories
        .iter()
        .filter(|(_, h)| h.rec_len() >= min_interactions.max(1) && h.search_len() >= 1)
        .map(|(&u, h)| (u, h.clone()))
        .collect()
}

/// Keeps the newest `max_rec_len` rec events and `max_search_len` search events.
pub fn truncate(history: &UserHistory, max_rec_len: usize, max_search_len: usize) -> UserHistory {
    assert!(max_rec_len >= 1 && max_search_len >= 1, "truncation limits must be >= 1");
    let skip_r = history.rec_events.len().saturating_sub(max_rec_len);
    let skip_s = history.search_events.len().saturating_sub(max_search_len);
    UserHistory {
        user_id: history.user_id,
        rec_events: history.rec_events[skip_r..].to_vec(),
        search_events: history.search_events[skip_s..].to_vec(),
    }
}

/// A target rec item with the history strictly preceding it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub user_id: UserId,
    pub prefix: UserHistory,
    pub target: ItemId,
    pub target_ts: i64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitReport {
    /// Users with fewer than three rec events.
    pub excluded_users: usize,
    /// Targets whose prefix lacked rec or search history.
    pub dropped_targets: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub report: SplitReport,
}

impl DatasetSplit {
    /// Applies [`truncate`] to every prefix.
    pub fn truncate(&mut self, max_rec_len: usize, max_search_len: usize) {
        for ex in self.train.iter_mut().chain(&mut self.validation).chain(&mut self.test) {
            ex.prefix = truncate(&ex.prefix, max_rec_len, max_search_len);
        }
    }
}

/// Last rec event → test, second-to-last → validation, the rest → train.
/// Targets whose prefix has no rec or no search event are dropped.
pub fn leave_one_out_split(histories: &Histories) -> DatasetSplit {
    let mut split = DatasetSplit::default();
    for h in histories.values() {
        let n = h.rec_len();
        if n < 3 {
            split.report.excluded_users += 1;
            continue;
        }
        for (k, ev) in h.rec_events.iter().enumerate() {
            let prefix = h.prefix_before(ev.timestamp);
            if prefix.rec_events.is_empty() || prefix.search_events.is_empty() {
                split.report.dropped_targets += 1;
                continue;
            }
            let ex = Example { user_id: h.user_id, prefix, target: ev.item_id, target_ts: ev.timestamp };
            if k == n - 1 {
                split.test.push(ex);
            } else if k == n - 2 {
                split.validation.push(ex);
            } else {
                split.train.push(ex);
            }
        }
    }
    split
}

/// `n` distinct items from `item_pool` the user never touched.
pub fn sample_eval_negatives(history: &UserHistory, item_pool: &[ItemId], n: usize, seed: u64) -> Result<Vec<ItemId>> {
    let interacted = history.interacted_items();
    let candidates: Vec<ItemId> = item_pool.iter().copied().filter(|i| !interacted.contains(i)).collect();
    if candidates.len() < n {
        return Err(Error::InsufficientNegatives { needed: n, interacted: interacted.len(), available: candidates.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, candidates.len(), n).into_iter().map(|k| candidates[k]).collect())
}

/// `n_minus_1` items different from `target`, distinct when the pool allows it.
pub fn sample_train_negatives<R: Rng>(target: ItemId, item_pool: &[ItemId], n_minus_1: usize, rng: &mut R) -> Vec<ItemId> {
    let others = item_pool.iter().filter(|&&i| i != target).count();
    assert!(others > 0 || n_minus_1 == 0, "item pool has nothing besides the target");
    let distinct = others >= n_minus_1;
    let mut out = Vec::with_capacity(n_minus_1);
    while out.len() < n_minus_1 {
        let cand = item_pool[rng.random_range(0..item_pool.len())];
        if cand == target || (distinct && out.contains(&cand)) {
            continue;
        }
        out.push(cand);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: u32, item: u32, ts: i64) -> RawRecord {
        RawRecord { user, kind: "rec".into(), item: Some(item), category: Some(item % 3), ts, ..Default::default() }
    }

    fn search(user: u32, query: u32, clicks: Vec<u32>, ts: i64) -> RawRecord {
        RawRecord { user, kind: "search".into(), query: Some(query), terms: Some(vec![query + 100]), clicks: Some(clicks), source: Some(0), ts, ..Default::default() }
    }

    #[test]
    fn out_of_order_records_are_sorted() {
        let (h, _) = build_histories(&[rec(1, 10, 5), rec(1, 11, 2)], 3);
        let items: Vec<_> = h[&1].rec_events.iter().map(|e| e.item_id).collect();
        assert_eq!(items, vec![11, 10]);
    }

    #[test]
    fn zero_click_search_is_kept() {
        let (h, report) = build_histories(&[search(1, 7, vec![], 1)], 3);
        assert!(report.rejected.is_empty());
        assert!(h[&1].search_events[0].clicked_item_ids.is_empty());
    }

    #[test]
    fn event_counts_are_preserved() {
        let mut records = Vec::new();
        for u in 0..3u32 {
            for t in 0..3i64 {
                records.push(rec(u, t as u32 + 1, t));
                records.push(search(u, t as u32, vec![5], t));
            }
        }
        let (h, _) = build_histories(&records, 3);
        assert_eq!(h.len(), 3);
        // independent tally straight off the records
        let mut tally: HashMap<u32, usize> = HashMap::new();
        for r in &records {
            *tally.entry(r.user).or_default() += 1;
        }
        assert_eq!(h.values().map(UserHistory::event_count).sum::<usize>(), tally.values().sum::<usize>());
        assert_eq!(h.values().map(UserHistory::event_count).sum::<usize>(), 18);
        for (u, hist) in &h {
            assert_eq!(hist.event_count(), tally[u]);
        }
    }

    #[test]
    fn unknown_types_and_duplicates_are_reported() {
        let mut bad = rec(1, 1, 1);
        bad.kind = "purchase".into();
        let (h, report) = build_histories(&[bad, rec(1, 2, 3), rec(1, 9, 3)], 3);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.duplicates, 1);
        assert_eq!(h[&1].rec_events.len(), 1);
        assert_eq!(h[&1].rec_events[0].item_id, 2);
    }

    #[test]
    fn out_of_range_source_is_rejected() {
        let mut r = search(1, 1, vec![], 1);
        r.source = Some(3);
        let (_, report) = build_histories(&[r], 3);
        assert_eq!(report.rejected.len(), 1);
    }

    fn history(user: u32, n_rec: usize, n_search: usize) -> UserHistory {
        let mut h = UserHistory::new(user);
        for k in 0..n_rec {
            h.rec_events.push(RecEvent { item_id: k as u32 + 1, timestamp: 2 * k as i64 + 1, category_id: None });
        }
        for k in 0..n_search {
            h.search_events.push(SearchEvent {
                query: Query { query_id: 1, term_ids: vec![1], source_type: 0 },
                clicked_item_ids: vec![],
                timestamp: 2 * k as i64,
            });
        }
        h
    }

    #[test]
    fn filter_users_rules() {
        let mut hs = Histories::new();
        hs.insert(1, history(1, 4, 2));
        hs.insert(2, history(2, 10, 0));
        hs.insert(3, history(3, 5, 1));
        let kept = filter_users(&hs, 5);
        assert_eq!(kept.keys().copied().collect::<Vec<_>>(), vec![3]);
        assert_eq!(filter_users(&kept, 5), kept);
        assert!(filter_users(&Histories::new(), 5).is_empty());
    }

    #[test]
    fn filter_items_drops_rare_items() {
        let mut hs = Histories::new();
        let mut h = history(1, 0, 1);
        for ts in 0..5 {
            h.rec_events.push(RecEvent { item_id: 7, timestamp: 10 + ts, category_id: None });
        }
        h.rec_events.push(RecEvent { item_id: 8, timestamp: 20, category_id: None });
        h.search_events[0].clicked_item_ids = vec![7, 8];
        hs.insert(1, h);
        let out = filter_items(&hs, 5);
        assert_eq!(out[&1].rec_events.len(), 5);
        assert_eq!(out[&1].search_events[0].clicked_item_ids, vec![7]);
    }

    #[test]
    fn split_five_items() {
        // searches at even timestamps, recs at odd ones: item k at ts 2k-1
        let mut hs = Histories::new();
        hs.insert(1, history(1, 5, 5));
        let split = leave_one_out_split(&hs);
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.test[0].target, 5);
        assert_eq!(split.validation[0].target, 4);
        let train: Vec<_> = split.train.iter().map(|e| e.target).collect();
        // item 1 has no rec prefix
        assert_eq!(train, vec![2, 3]);
        assert_eq!(split.report.dropped_targets, 1);
        for ex in split.train.iter().chain(&split.validation).chain(&split.test) {
            assert!(ex.prefix.rec_events.iter().all(|e| e.timestamp < ex.target_ts));
            assert!(ex.prefix.search_events.iter().all(|e| e.timestamp < ex.target_ts));
            assert!(ex.prefix.rec_events.iter().all(|e| e.item_id != ex.target || e.timestamp < ex.target_ts));
        }
    }

    #[test]
    fn split_exactly_three_items() {
        let mut hs = Histories::new();
        hs.insert(1, history(1, 3, 3));
        hs.insert(2, history(2, 2, 3));
        let split = leave_one_out_split(&hs);
        assert_eq!(split.report.excluded_users, 1);
        assert_eq!(split.validation[0].target, 2);
        assert_eq!(split.test[0].target, 3);
        assert!(split.train.is_empty());
    }

    #[test]
    fn later_search_is_excluded_from_validation_prefix() {
        let mut hs = Histories::new();
        let mut h = history(1, 4, 1);
        // search right after the validation target (item 3, ts 5)
        h.search_events.push(SearchEvent {
            query: Query { query_id: 9, term_ids: vec![1], source_type: 0 },
            clicked_item_ids: vec![],
            timestamp: 6,
        });
        hs.insert(1, h.clone());
        let split = leave_one_out_split(&hs);
        let val = &split.validation[0];
        // timestamp-filter oracle
        let expected: Vec<i64> = h.search_events.iter().map(|e| e.timestamp).filter(|&t| t < val.target_ts).collect();
        assert_eq!(val.prefix.search_events.iter().map(|e| e.timestamp).collect::<Vec<_>>(), expected);
        assert!(split.test[0].prefix.search_events.iter().any(|e| e.query.query_id == 9));
    }

    #[test]
    fn truncate_keeps_newest() {
        let h = history(1, 200, 30);
        let t = truncate(&h, 150, 25);
        assert_eq!(t.rec_len(), 150);
        assert_eq!(t.rec_events[0].item_id, 51);
        assert_eq!(t.search_len(), 25);
        assert_eq!(truncate(&history(1, 3, 2), 150, 25), history(1, 3, 2));
        let one = truncate(&h, 1, 1);
        assert_eq!(one.rec_events[0].item_id, 200);
        assert_eq!(one.search_events.len(), 1);
    }

    #[test]
    fn eval_negatives_avoid_interactions() {
        let h = history(1, 10, 0);
        let pool: Vec<u32> = (1..=1000).collect();
        let negs = sample_eval_negatives(&h, &pool, 99, 7).unwrap();
        assert_eq!(negs.len(), 99);
        assert_eq!(negs.iter().collect::<HashSet<_>>().len(), 99);
        assert!(negs.iter().all(|n| *n > 10));
        assert_eq!(negs, sample_eval_negatives(&h, &pool, 99, 7).unwrap());
        let small: Vec<u32> = (1..=50).collect();
        assert!(matches!(sample_eval_negatives(&h, &small, 99, 7), Err(Error::InsufficientNegatives { .. })));
    }

    #[test]
    fn train_negatives_never_hit_target() {
        let pool: Vec<u32> = (1..=20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_train_negatives(4, &pool, 4, &mut rng).len(), 4);
        assert!(sample_train_negatives(4, &pool, 0, &mut rng).is_empty());
        for _ in 0..10_000 {
            assert!(sample_train_negatives(4, &pool, 4, &mut rng).iter().all(|&n| n != 4));
        }
    }
}
