//! Data-emitting analyses: JS divergence between selected sub-sequences,
//! query/clicked-item cosine distributions, hyper-parameter sweeps and the
//! cumulative ablation.

use crate::corpus::{Corpus, EvalCase};
use crate::data::{CategoryId, UserId};
use crate::disentangle::ThresholdStrategy;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, Metrics};
use crate::model::{ModelConfig, SesRec};
use crate::trainer::{train, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub type CategoryDistribution = BTreeMap<CategoryId, f64>;

/// Empirical distribution of `cats`; `None` when empty.
pub fn distribution(cats: impl IntoIterator<Item = CategoryId>) -> Option<CategoryDistribution> {
    let mut counts: BTreeMap<CategoryId, f64> = BTreeMap::new();
    let mut n = 0.0;
    for c in cats {
        *counts.entry(c).or_default() += 1.0;
        n += 1.0;
    }
    if n == 0.0 {
        return None;
    }
    counts.values_mut().for_each(|v| *v /= n);
    Some(counts)
}

/// Jensen-Shannon divergence in bits; missing categories count as 0.
pub fn js_divergence(p: &CategoryDistribution, q: &CategoryDistribution) -> f64 {
    let kl_to_mid = |a: &CategoryDistribution, b: &CategoryDistribution| -> f64 {
        a.iter()
            .filter(|(_, &pa)| pa > 0.0)
            .map(|(c, &pa)| {
                let m = (pa + b.get(c).copied().unwrap_or(0.0)) / 2.0;
                pa * (pa / m).log2()
            })
            .sum()
    };
    (0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsRow {
    pub user: UserId,
    pub js_similar: f64,
    pub js_dissimilar: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JsReport {
    pub rows: Vec<JsRow>,
    pub skipped: usize,
}

impl JsReport {
    pub fn mean_similar(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.js_similar))
    }

    pub fn mean_dissimilar(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.js_dissimilar))
    }

    /// Fraction of users with `js_similar < js_dissimilar`.
    pub fn fraction_ordered(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.js_similar < r.js_dissimilar).count() as f64 / self.rows.len() as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Per-user selection diagnostics for the dump command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub user: UserId,
    #[serde(rename = "P_s")]
    pub p_s: Vec<usize>,
    #[serde(rename = "N_s")]
    pub n_s: Vec<usize>,
    #[serde(rename = "P_r")]
    pub p_r: Vec<usize>,
    #[serde(rename = "N_r")]
    pub n_r: Vec<usize>,
    pub a_s: Vec<f64>,
    pub a_r: Vec<f64>,
}

pub fn selection_dump(model: &SesRec, corpus: &Corpus, cases: &[EvalCase]) -> Result<Vec<SelectionRecord>> {
    cases
        .par_iter()
        .map(|c| {
            let s = model.selection(&corpus.input(&c.example), &corpus.dense_catalog)?;
            Ok(SelectionRecord {
                user: c.example.user_id,
                p_s: s.part_s.positive,
                n_s: s.part_s.negative,
                p_r: s.part_r.positive,
                n_r: s.part_r.negative,
                a_s: s.a_s,
                a_r: s.a_r,
            })
        })
        .collect()
}

/// `D_JS(P_s‖P_r)` and `D_JS(N_s‖N_r)` per user, from the categories of the
/// selected rec items and of the items clicked under the selected queries.
pub fn disentanglement_report(model: &SesRec, corpus: &Corpus, cases: &[EvalCase]) -> Result<JsReport> {
    let dumps = selection_dump(model, corpus, cases)?;
    let mut report = JsReport::default();
    for (case, sel) in cases.iter().zip(dumps) {
        let prefix = &case.example.prefix;
        let rec = |idx: &[usize]| distribution(idx.iter().filter_map(|&j| corpus.category_of(prefix.rec_events[j].item_id)));
        let search = |idx: &[usize]| distribution(idx.iter().flat_map(|&j| prefix.search_events[j].clicked_item_ids.iter()).filter_map(|&i| corpus.category_of(i)));
        match (search(&sel.p_s), rec(&sel.p_r), search(&sel.n_s), rec(&sel.n_r)) {
            (Some(ps), Some(pr), Some(ns), Some(nr)) => report.rows.push(JsRow { user: sel.user, js_similar: js_divergence(&ps, &pr), js_dissimilar: js_divergence(&ns, &nr) }),
            _ => report.skipped += 1,
        }
    }
    Ok(report)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxSummary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("no values to summarize".into()));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Self {
            n: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

/// Cosine of `Ê_q` and `Ê_c` for every (query, clicked item) pair in the prefixes of `cases`.
pub fn pair_cosines(model: &SesRec, corpus: &Corpus, cases: &[EvalCase]) -> Result<Vec<f64>> {
    let per: Vec<Vec<f64>> = cases
        .par_iter()
        .map(|c| {
            let (q, i) = model.projected_pairs(&corpus.input(&c.example), &corpus.dense_catalog)?;
            Ok((0..q.rows()).map(|k| cosine(q.row(k), i.row(k))).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub with_alignment: BoxSummary,
    pub without_alignment: BoxSummary,
}

pub fn cosine_report(with_ali: &SesRec, without_ali: &SesRec, corpus: &Corpus, cases: &[EvalCase]) -> Result<CosineReport> {
    Ok(CosineReport {
        with_alignment: BoxSummary::of(&pair_cosines(with_ali, corpus, cases)?)?,
        without_alignment: BoxSummary::of(&pair_cosines(without_ali, corpus, cases)?)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    Alpha,
    Beta,
    ThresholdStrategy,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            "threshold_strategy" | "threshold" => Ok(Self::ThresholdStrategy),
            _ => Err(format!("unknown sweep parameter {s:?} (alpha, beta, threshold_strategy)")),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::ThresholdStrategy => "threshold_strategy",
        })
    }
}

impl SweepParam {
    /// Default value list for each parameter.
    pub fn default_values(&self) -> Vec<String> {
        match self {
            Self::Alpha | Self::Beta => ["0", "0.001", "0.01", "0.1", "1"].map(String::from).to_vec(),
            Self::ThresholdStrategy => ThresholdStrategy::study_set().iter().map(ToString::to_string).collect(),
        }
    }

    fn apply(&self, value: &str, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
        let num = || value.parse::<f64>().map_err(|_| Error::Config(format!("{self} value {value:?} is not a number")));
        match self {
            Self::Alpha => train.weights.alpha = num()?,
            Self::Beta => train.weights.beta = num()?,
            Self::ThresholdStrategy => model.threshold = value.parse().map_err(Error::Config)?,
        }
        train.validate()?;
        model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub config_hash: String,
    #[serde(rename = "NDCG@10")]
    pub ndcg10: f64,
    #[serde(rename = "MRR")]
    pub mrr: f64,
}

fn run_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, train)).expect("configs serialize");
    use sha2::{Digest, Sha256};
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

/// One training run per value with the shared seed, evaluated on the test split.
pub fn sweep(corpus: &Corpus, model_cfg: &ModelConfig, train_cfg: &TrainConfig, param: SweepParam, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|v| {
            let (mut m, mut t) = (model_cfg.clone(), train_cfg.clone());
            param.apply(v, &mut m, &mut t)?;
            let out = train(corpus, &m, &t, |_| {})?;
            let metrics = evaluate(&out.model, corpus, &corpus.test)?.metrics;
            log::info!("sweep {param}={v}: NDCG@10={:.4} MRR={:.4}", metrics.ndcg10, metrics.mrr);
            Ok(SweepRow { param: param.to_string(), value: v.clone(), config_hash: run_hash(&m, &t), ndcg10: metrics.ndcg10, mrr: metrics.mrr })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Base,
    PlusAli,
    PlusCon,
    PlusMie,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Base, Self::PlusAli, Self::PlusCon, Self::PlusMie];

    pub fn label(&self) -> &'static str {
        match self {
            Self::Base => "Base",
            Self::PlusAli => "+L_ali",
            Self::PlusCon => "+L_con",
            Self::PlusMie => "+MIE",
        }
    }

    /// Cumulative configuration: the last variant is the unmodified full model.
    pub fn configure(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        let rank = Self::ALL.iter().position(|v| v == self).expect("listed");
        if rank < 1 {
            t.weights.alpha = 0.0;
        }
        if rank < 2 {
            t.weights.beta = 0.0;
        }
        if rank < 3 {
            m.multi_interest = false;
        }
        (m, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub alpha: f64,
    pub beta: f64,
    pub multi_interest: bool,
    #[serde(flatten)]
    pub metrics: Metrics,
}

pub fn ablation_run(corpus: &Corpus, model_cfg: &ModelConfig, train_cfg: &TrainConfig, variant: Variant) -> Result<(AblationRow, SesRec)> {
    let (m, t) = variant.configure(model_cfg, train_cfg);
    let out = train(corpus, &m, &t, |_| {})?;
    let metrics = evaluate(&out.model, corpus, &corpus.test)?.metrics;
    log::info!("ablation {}: NDCG@10={:.4}", variant.label(), metrics.ndcg10);
    Ok((AblationRow { variant: variant.label().into(), alpha: t.weights.alpha, beta: t.weights.beta, multi_interest: m.multi_interest, metrics }, out.model))
}

pub fn ablation(corpus: &Corpus, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    Variant::ALL.iter().map(|v| ablation_run(corpus, model_cfg, train_cfg, *v).map(|(row, _)| row)).collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Equal-width histogram over `[lo, hi]`.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<(f64, f64, usize)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &v in values {
        if v.is_finite() && width > 0.0 {
            let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    counts.into_iter().enumerate().map(|(k, c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c)).collect()
}

/// Text rendering of a histogram, one bar per bin.
pub fn render_histogram(title: &str, hist: &[(f64, f64, usize)], width: usize) -> String {
    let peak = hist.iter().map(|h| h.2).max().unwrap_or(0).max(1);
    let mut out = format!("{title}\n");
    for &(lo, hi, c) in hist {
        let bar = "#".repeat(c * width / peak);
        out.push_str(&format!("[{lo:>6.3}, {hi:>6.3}) {c:>6} {bar}\n"));
    }
    out
}
