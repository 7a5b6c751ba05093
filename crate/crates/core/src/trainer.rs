//! Mini-batch Adam training with early stopping on validation NDCG@10,
//! checkpoints, and a finite-difference gradient checker.

use crate::config::KeyValues;
use crate::corpus::{derive_seed, Corpus, DenseCatalog, ModelInput};
use crate::data::sample_train_negatives;
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::interest::LossWeights;
use crate::model::{AlignNegatives, ModelConfig, SesRec};
use crate::params::{GradStore, ParamKind, ParamStore};
use crate::tensor::Mat;
use crate::autograd::Graph;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Examples per gradient chunk; chunks are reduced in order so results do
/// not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// `N − 1`
    pub train_negatives: usize,
    pub align_negatives: usize,
    /// `None` disables clipping
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 0.001,
            weights: LossWeights::default(),
            max_epochs: 100,
            patience: 5,
            seed: 42,
            train_negatives: 4,
            align_negatives: 64,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("batch_size", &mut self.batch_size)?;
        kv.set("learning_rate", &mut self.learning_rate)?;
        kv.set("lr", &mut self.learning_rate)?;
        kv.set("alpha", &mut self.weights.alpha)?;
        kv.set("beta", &mut self.weights.beta)?;
        kv.set("lambda", &mut self.weights.lambda)?;
        kv.set("max_epochs", &mut self.max_epochs)?;
        kv.set("patience", &mut self.patience)?;
        kv.set("seed", &mut self.seed)?;
        kv.set("train_negatives", &mut self.train_negatives)?;
        kv.set("align_negatives", &mut self.align_negatives)?;
        if let Some(c) = kv.get::<f64>("clip_norm")? {
            self.clip_norm = (c > 0.0).then_some(c);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Mat::zeros(p.value.rows(), p.value.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let g = grads.get(id).data();
            let (m, v) = (self.m[id.0].data_mut(), self.v[id.0].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Losses averaged over an epoch plus the validation metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_rec")]
    pub rec: f64,
    #[serde(rename = "L_ali")]
    pub ali: f64,
    #[serde(rename = "L_con")]
    pub con: f64,
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "val_NDCG@10")]
    pub val_ndcg10: f64,
}

/// Per-batch loss components; `total = rec + α·ali + β·con + reg`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLog {
    pub rec: f64,
    pub ali: f64,
    pub con: f64,
    pub reg: f64,
    pub total: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    /// parameters of the best validation epoch
    pub model: SesRec,
    pub adam: Adam,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// A training example in dense ids.
#[derive(Clone, Debug)]
pub struct DenseExample {
    pub input: ModelInput,
    pub target: usize,
}

pub fn dense_examples(corpus: &Corpus) -> Vec<DenseExample> {
    corpus
        .train
        .iter()
        .map(|ex| DenseExample { input: corpus.input(ex), target: corpus.vocab.items.dense(ex.target).expect("target inside vocabulary") })
        .collect()
}

pub fn model_config_for(corpus: &Corpus) -> ModelConfig {
    let mut cfg = ModelConfig::for_vocab(corpus.vocab.sizes());
    cfg.n_sources = corpus.prep.n_sources as usize;
    cfg.max_rec_len = corpus.prep.max_rec_len;
    cfg.max_search_len = corpus.prep.max_search_len;
    cfg
}

fn sample_distinct(rng: &mut ChaCha8Rng, n_vocab: usize, k: usize) -> Vec<usize> {
    index::sample(rng, n_vocab, k.min(n_vocab)).into_iter().map(|i| i + 1).collect()
}

/// Gradients and loss components for one batch, accumulated in fixed-order chunks.
pub fn batch_gradients(model: &SesRec, batch: &[(usize, &DenseExample)], catalog: &DenseCatalog, negs: &AlignNegatives, cfg: &TrainConfig, salt: u64) -> (GradStore, BatchLog) {
    let n_items = model.config.vocab.items;
    let pool: Vec<u32> = (1..=n_items as u32).collect();
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(GradStore, BatchLog)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = model.store.zeros_like();
            let mut log = BatchLog::default();
            for &(idx, ex) in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, salt, idx as u64));
                let mut cands = vec![ex.target];
                cands.extend(sample_train_negatives(ex.target as u32, &pool, cfg.train_negatives, &mut rng).into_iter().map(|i| i as usize));
                let dropout_seed = derive_seed(cfg.seed, salt ^ 0x5eed, idx as u64);
                let mut g = Graph::new(&model.store);
                let o = model.objective(&mut g, &ex.input, &cands, catalog, negs, &cfg.weights, Some(dropout_seed));
                g.backward(o.total, scale, &mut grads);
                log.rec += o.rec * scale;
                log.ali += o.ali * scale;
                log.con += o.con * scale;
            }
            (grads, log)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut grads, mut log) = iter.next().expect("non-empty batch");
    for (g, l) in iter {
        grads.merge(&g);
        log.rec += l.rec;
        log.ali += l.ali;
        log.con += l.con;
    }
    let w = &cfg.weights;
    log.reg = w.lambda * model.squared_norm(&grads);
    model.add_regularization_grad(&mut grads, w.lambda);
    log.total = log.rec + w.alpha * log.ali + w.beta * log.con + log.reg;
    (grads, log)
}

fn zero_padding_rows(model: &SesRec, grads: &mut GradStore) {
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.kind == ParamKind::Embedding).map(|(id, _)| id).collect();
    for id in ids {
        grads.get_mut(id).row_mut(0).fill(0.0);
    }
}

/// One pass over `examples` in a seed-determined order.
pub fn train_epoch(model: &mut SesRec, adam: &mut Adam, examples: &[DenseExample], catalog: &DenseCatalog, cfg: &TrainConfig, epoch: usize, mut on_batch: impl FnMut(usize, &BatchLog)) -> Result<BatchLog> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + epoch as u64, 0)));
    let mut sum = BatchLog::default();
    let n_batches = order.len().div_ceil(cfg.batch_size);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<(usize, &DenseExample)> = chunk.iter().map(|&i| (i, &examples[i])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2000 + epoch as u64, b as u64));
        let negs = AlignNegatives {
            items: sample_distinct(&mut rng, model.config.vocab.items, cfg.align_negatives),
            queries: sample_distinct(&mut rng, model.config.vocab.queries, cfg.align_negatives),
        };
        let salt = ((epoch as u64) << 32) | b as u64;
        let (mut grads, mut log) = batch_gradients(model, &batch, catalog, &negs, cfg, salt);
        if !log.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: b, rec: log.rec, ali: log.ali, con: log.con });
        }
        zero_padding_rows(model, &mut grads);
        log.grad_norm = grads.global_norm();
        if let Some(c) = cfg.clip_norm {
            if log.grad_norm > c {
                grads.scale(c / log.grad_norm);
            }
        }
        adam.step(&mut model.store, &grads);
        model.align.clamp_tau(&mut model.store);
        on_batch(b, &log);
        sum.rec += log.rec;
        sum.ali += log.ali;
        sum.con += log.con;
        sum.reg += log.reg;
        sum.total += log.total;
    }
    let n = n_batches.max(1) as f64;
    Ok(BatchLog { rec: sum.rec / n, ali: sum.ali / n, con: sum.con / n, reg: sum.reg / n, total: sum.total / n, grad_norm: 0.0 })
}

/// Trains until validation NDCG@10 stops improving for `patience` epochs
/// and returns the best epoch's parameters.
pub fn train(corpus: &Corpus, model_cfg: &ModelConfig, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() || corpus.validation.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation splits".into()));
    }
    let examples = dense_examples(corpus);
    let mut model = SesRec::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore, Adam)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let log = train_epoch(&mut model, &mut adam, &examples, &corpus.dense_catalog, cfg, epoch, |_, _| {})?;
        let val = evaluate(&model, corpus, &corpus.validation)?.metrics.ndcg10;
        let rec = EpochRecord { epoch, rec: log.rec, ali: log.ali, con: log.con, total: log.total, val_ndcg10: val };
        log::info!("epoch {epoch}: L={:.5} L_rec={:.5} L_ali={:.5} L_con={:.5} val NDCG@10={val:.5}", rec.total, rec.rec, rec.ali, rec.con);
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().is_none_or(|b| val > b.1) {
            best = Some((epoch, val, model.store.clone(), adam.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_metric, store, adam) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome { model, adam, history, best_epoch, best_metric })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

// ---- checkpoints ----

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SESRECCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config_hash: String,
    pub epoch: usize,
    pub metric: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<(String, ParamKind, usize, usize)>,
    adam: Option<(f64, f64, f64, f64, u64)>,
}

pub struct Checkpoint {
    pub model: SesRec,
    pub adam: Option<Adam>,
    pub meta: CheckpointMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the binary blob and its JSON sidecar.
pub fn save_checkpoint(path: &Path, model: &SesRec, adam: Option<&Adam>, epoch: usize, metric: f64) -> Result<CheckpointMeta> {
    let header = Header {
        config: model.config.clone(),
        params: model.store.iter().map(|(_, p)| (p.name.clone(), p.kind, p.value.rows(), p.value.cols())).collect(),
        adam: adam.map(|a| (a.lr, a.beta1, a.beta2, a.eps, a.t)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(64 + header.len() + 8 * model.store.num_scalars() * 3);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    let mut put = |m: &Mat| m.data().iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    model.store.iter().for_each(|(_, p)| put(&p.value));
    if let Some(a) = adam {
        a.m.iter().chain(&a.v).for_each(&mut put);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf)?;
    let meta = CheckpointMeta { version: CHECKPOINT_VERSION, config_hash: model.config.hash(), epoch, metric };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (file corrupted or truncated)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(body.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?).map_err(|e| bad(&format!("header: {e}")))?;
    let mut floats = body[20 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read = |rows: usize, cols: usize| -> Result<Mat> {
        let data: Vec<f64> = floats.by_ref().take(rows * cols).collect();
        if data.len() != rows * cols {
            return Err(bad("truncated tensor data"));
        }
        Ok(Mat::from_vec(rows, cols, data))
    };
    let mut store = ParamStore::new();
    for (name, kind, rows, cols) in &header.params {
        let m = read(*rows, *cols)?;
        store.add(name.clone(), *kind, m);
    }
    let adam = match header.adam {
        Some((lr, beta1, beta2, eps, t)) => {
            let shapes: Vec<(usize, usize)> = header.params.iter().map(|p| (p.2, p.3)).collect();
            let m = shapes.iter().map(|&(r, c)| read(r, c)).collect::<Result<Vec<_>>>()?;
            let v = shapes.iter().map(|&(r, c)| read(r, c)).collect::<Result<Vec<_>>>()?;
            Some(Adam { lr, beta1, beta2, eps, t, m, v })
        }
        None => None,
    };
    if floats.next().is_some() {
        return Err(bad("trailing data"));
    }
    let model = SesRec::from_parts(header.config, store)?;
    let sidecar = sidecar_path(path);
    let meta = if sidecar.exists() {
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&sidecar)?).map_err(|e| bad(&format!("sidecar: {e}")))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("sidecar version {}, expected {CHECKPOINT_VERSION}", meta.version)));
        }
        if meta.config_hash != model.config.hash() {
            return Err(bad("sidecar config hash does not match the blob"));
        }
        meta
    } else {
        CheckpointMeta { version, config_hash: model.config.hash(), epoch: 0, metric: f64::NAN }
    };
    Ok(Checkpoint { model, adam, meta })
}

/// A warning when `expected` differs from the configuration a checkpoint was trained with.
pub fn config_hash_warning(meta: &CheckpointMeta, expected: &ModelConfig) -> Option<String> {
    let h = expected.hash();
    (h != meta.config_hash).then(|| format!("checkpoint config hash {} differs from the requested configuration {h}", meta.config_hash))
}

// ---- gradient checking ----

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    /// coordinates whose perturbation changed a hard selection or crossed a hinge
    pub skipped: usize,
}

/// Relative error with a floor on the denominator so near-zero gradients
/// compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// One loss evaluation: the full objective including `λΣθ²` over the given
/// embedding rows, plus a signature of every discrete decision.
fn objective_value(model: &SesRec, input: &ModelInput, cands: &[usize], catalog: &DenseCatalog, negs: &AlignNegatives, w: &LossWeights, reg_scope: &GradStore) -> (f64, Vec<u8>) {
    let mut g = Graph::new(&model.store);
    let o = model.objective(&mut g, input, cands, catalog, negs, w, None);
    let mut sig = Vec::new();
    let st = model.forward_user(&mut g, input, catalog, None, true, None);
    if let Some(d) = &st.dis {
        for p in [&d.part_s, &d.part_r] {
            sig.extend(p.positive.iter().map(|&j| j as u8));
            sig.push(255);
            sig.extend(p.negative.iter().map(|&j| j as u8));
            sig.push(254);
        }
        for (side, a, h) in [(&d.part_s, d.a_s, st.h_s), (&d.part_r, d.a_r, st.h_r)] {
            let c = crate::disentangle::contrast_vectors(&mut g, h, a, side);
            if let Some(n) = c.negative {
                let ap = g.sub(c.anchor, c.positive);
                let an = g.sub(c.anchor, n);
                let hinge = g.value(ap).sum_squares().sqrt() - g.value(an).sum_squares().sqrt() + model.config.margin;
                sig.push(u8::from(hinge > 0.0));
            }
        }
    }
    (g.scalar(o.total) + w.lambda * model.squared_norm(reg_scope), sig)
}

/// Central differences (`h = 1e-5`) against the analytic gradient for every
/// parameter group. Embedding tables are checked on the rows the example
/// touches; other rows have zero gradient by construction.
pub fn finite_difference_check(model: &SesRec, input: &ModelInput, cands: &[usize], catalog: &DenseCatalog, negs: &AlignNegatives, w: &LossWeights) -> FdReport {
    let h = 1e-5;
    let mut grads = model.store.zeros_like();
    {
        let mut g = Graph::new(&model.store);
        let o = model.objective(&mut g, input, cands, catalog, negs, w, None);
        g.backward(o.total, 1.0, &mut grads);
    }
    model.add_regularization_grad(&mut grads, w.lambda);
    let (_, base_sig) = objective_value(model, input, cands, catalog, negs, w, &grads);
    let mut probe = model.clone();
    let mut groups = Vec::new();
    let mut skipped = 0;
    for (id, p) in model.store.iter() {
        let cols = p.value.cols();
        let coords: Vec<usize> = match p.kind {
            ParamKind::Dense => (0..p.value.data().len()).collect(),
            ParamKind::Embedding => grads.touched(id).iter().filter(|&&r| r != 0).flat_map(|&r| r * cols..(r + 1) * cols).collect(),
        };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for k in coords {
            let orig = probe.store.get(id).data()[k];
            probe.store.get_mut(id).data_mut()[k] = orig + h;
            let (fp, sp) = objective_value(&probe, input, cands, catalog, negs, w, &grads);
            probe.store.get_mut(id).data_mut()[k] = orig - h;
            let (fm, sm) = objective_value(&probe, input, cands, catalog, negs, w, &grads);
            probe.store.get_mut(id).data_mut()[k] = orig;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(grads.get(id).data()[k], numeric));
            checked += 1;
        }
        if checked > 0 {
            groups.push(GroupError { name: p.name.clone(), checked, max_rel_error: worst });
        }
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    FdReport { groups, max_rel_error, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    #[test]
    fn adam_matches_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamKind::Dense, Mat::scalar(0.5));
        let mut grads = store.zeros_like();
        grads.get_mut(id).data_mut()[0] = 1.0;
        let mut adam = Adam::new(&store, 0.01);
        adam.step(&mut store, &grads);
        // m̂ = 1, v̂ = 1 → step of lr / (1 + eps)
        assert!((store.get(id).item() - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);

        let mut oracle = (0.5 - 0.01 / (1.0 + 1e-8), 0.1, 0.001);
        let mut adam2 = adam.clone();
        let mut s2 = store.clone();
        for step in 2..=10u64 {
            let gv = 0.3 * step as f64 - 1.0;
            grads.get_mut(id).data_mut()[0] = gv;
            adam2.step(&mut s2, &grads);
            let (x, m, v) = oracle;
            let m = 0.9 * m + 0.1 * gv;
            let v = 0.999 * v + 0.001 * gv * gv;
            let mh = m / (1.0 - 0.9f64.powi(step as i32));
            let vh = v / (1.0 - 0.999f64.powi(step as i32));
            oracle = (x - 0.01 * mh / (vh.sqrt() + 1e-8), m, v);
        }
        assert!((s2.get(id).item() - oracle.0).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamKind::Dense, Mat::from_rows(&[vec![1.0, -2.0]]));
        let mut adam = Adam::new(&store, 0.1);
        adam.m[0] = Mat::from_rows(&[vec![0.0, 0.0]]);
        let grads = store.zeros_like();
        adam.step(&mut store, &grads);
        assert_eq!(store.get(id), &Mat::from_rows(&[vec![1.0, -2.0]]));
        adam.m[0] = Mat::from_rows(&[vec![1.0, 1.0]]);
        let before = store.get(ParamId(0)).clone();
        adam.step(&mut store, &grads);
        assert_eq!(adam.m[0], Mat::from_rows(&[vec![0.9, 0.9]]));
        assert_ne!(store.get(id), &before);
    }

    #[test]
    fn config_keys() {
        let kv = KeyValues::parse("alpha = 0.5\nclip_norm = 0\nlr = 0.01\nbatch_size = 32").unwrap();
        let mut c = TrainConfig::default();
        c.apply(&kv).unwrap();
        assert_eq!((c.weights.alpha, c.clip_norm, c.learning_rate, c.batch_size), (0.5, None, 0.01, 32));
        assert!(c.apply(&KeyValues::parse("patience = 0").unwrap()).is_err());
    }
}
