//! Sampled-candidate ranking metrics.

use crate::corpus::{Corpus, EvalCase};
use crate::data::{ItemId, UserId};
use crate::error::{Error, Result};
use crate::model::SesRec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRanking {
    pub user: UserId,
    pub target: ItemId,
    pub negatives: Vec<ItemId>,
    /// target first, then negatives in order
    pub scores: Vec<f64>,
    pub rank: usize,
}

/// 1-based rank of `scores[target]` with ties resolved against the target.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, &s)| j != target && s >= t).count()
}

pub fn hit_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    1.0 / rank as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: UserId,
    pub rank: usize,
    #[serde(rename = "HIT@1")]
    pub hit1: f64,
    #[serde(rename = "HIT@5")]
    pub hit5: f64,
    #[serde(rename = "HIT@10")]
    pub hit10: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg5: f64,
    #[serde(rename = "NDCG@10")]
    pub ndcg10: f64,
    #[serde(rename = "MRR")]
    pub mrr: f64,
}

impl UserMetrics {
    pub fn from_rank(user: UserId, rank: usize) -> Self {
        Self {
            user,
            rank,
            hit1: hit_at_k(rank, 1),
            hit5: hit_at_k(rank, 5),
            hit10: hit_at_k(rank, 10),
            ndcg5: ndcg_at_k(rank, 5),
            ndcg10: ndcg_at_k(rank, 10),
            mrr: mrr(rank),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "HIT@1")]
    pub hit1: f64,
    #[serde(rename = "HIT@5")]
    pub hit5: f64,
    #[serde(rename = "HIT@10")]
    pub hit10: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg5: f64,
    #[serde(rename = "NDCG@10")]
    pub ndcg10: f64,
    #[serde(rename = "MRR")]
    pub mrr: f64,
}

impl Metrics {
    pub fn mean(rows: &[UserMetrics]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot average metrics over an empty split".into()));
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&UserMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            hit1: avg(|r| r.hit1),
            hit5: avg(|r| r.hit5),
            hit10: avg(|r| r.hit10),
            ndcg5: avg(|r| r.ndcg5),
            ndcg10: avg(|r| r.ndcg10),
            mrr: avg(|r| r.mrr),
        })
    }

    pub fn as_pairs(&self) -> [(&'static str, f64); 6] {
        [("HIT@1", self.hit1), ("HIT@5", self.hit5), ("HIT@10", self.hit10), ("NDCG@5", self.ndcg5), ("NDCG@10", self.ndcg10), ("MRR", self.mrr)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub users: Vec<UserMetrics>,
}

/// Scores the target and its negatives and ranks the target.
pub fn rank(model: &SesRec, corpus: &Corpus, case: &EvalCase) -> Result<EvalRanking> {
    let target = case.example.target;
    let mut seen = HashSet::with_capacity(case.negatives.len() + 1);
    for &i in std::iter::once(&target).chain(&case.negatives) {
        if !seen.insert(i) {
            return Err(Error::Invalid(format!("duplicate candidate {i} for user {}", case.example.user_id)));
        }
    }
    let candidates = std::iter::once(&target).chain(&case.negatives).map(|&i| corpus.dense_item(i)).collect::<Result<Vec<_>>>()?;
    let input = corpus.input(&case.example);
    let scores = model.score(&input, &candidates, &corpus.dense_catalog)?;
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("non-finite score {s} for user {}", case.example.user_id)));
    }
    Ok(EvalRanking { user: case.example.user_id, target, negatives: case.negatives.clone(), rank: rank_of(&scores, 0), scores })
}

/// Per-user metrics and their means over `cases`.
pub fn evaluate(model: &SesRec, corpus: &Corpus, cases: &[EvalCase]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let users = cases
        .par_iter()
        .map(|c| rank(model, corpus, c).map(|r| UserMetrics::from_rank(r.user, r.rank)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { metrics: Metrics::mean(&users)?, users })
}

pub fn write_metrics_json(path: &Path, metrics: &Metrics) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(metrics)?)?;
    Ok(())
}

pub fn write_user_csv(path: &Path, users: &[UserMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for u in users {
        w.serialize(u).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
