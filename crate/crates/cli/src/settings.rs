use sesrec::data::read_events;
use sesrec::trainer::model_config_for;
use sesrec::{Corpus, Error, KeyValues, ModelConfig, PrepConfig, Result, SynthConfig, TrainConfig};
use std::path::{Path, PathBuf};

const SYNTH_KEYS: &[&str] = &[
    "n_users",
    "n_items",
    "n_categories",
    "n_queries",
    "n_terms",
    "overlap",
    "rho",
    "rec_len_min",
    "rec_len_max",
    "search_len_min",
    "search_len_max",
    "max_clicks",
    "zero_click_prob",
    "rec_interests_min",
    "rec_interests_max",
    "search_interests_min",
    "search_interests_max",
    "focus_prob",
    "popularity_exponent",
];
const PREP_KEYS: &[&str] = &["min_interactions", "min_item_count", "max_rec_len", "max_search_len", "n_sources", "eval_negatives"];
const MODEL_KEYS: &[&str] = &[
    "item_id_dim",
    "item_attr_dim",
    "query_id_dim",
    "term_dim",
    "d",
    "n_layers",
    "n_heads",
    "ffn_dim",
    "mlp_hidden",
    "dropout",
    "multi_interest",
    "threshold_strategy",
    "margin",
    "tau_init",
];
const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "learning_rate",
    "lr",
    "alpha",
    "beta",
    "lambda",
    "max_epochs",
    "patience",
    "seed",
    "train_negatives",
    "align_negatives",
    "clip_norm",
];

pub const EVENTS_FILE: &str = "events.jsonl";

/// Everything a subcommand can read from a config file, with `--seed` applied.
#[derive(Clone, Debug)]
pub struct Settings {
    pub kv: KeyValues,
    pub synth: SynthConfig,
    pub prep: PrepConfig,
    pub train: TrainConfig,
}

impl Settings {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let kv = match path {
            Some(p) => KeyValues::read(p)?,
            None => KeyValues::default(),
        };
        if let Some(k) = kv.keys().find(|k| ![SYNTH_KEYS, PREP_KEYS, MODEL_KEYS, TRAIN_KEYS].iter().any(|set| set.contains(k))) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        let synth = SynthConfig::from_key_values(&kv)?;
        let mut prep = PrepConfig::default();
        prep.apply(&kv)?;
        let mut train = TrainConfig::default();
        train.apply(&kv)?;
        if let Some(s) = seed {
            train.seed = s;
        }
        Ok(Self { kv, synth, prep, train })
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn corpus(&self, data: &Path) -> Result<Corpus> {
        let file = events_path(data);
        if !file.is_file() {
            return Err(Error::Data(format!("no event file at {}", file.display())));
        }
        let records = read_events(&file).map_err(|e| match e {
            Error::Io(io) => Error::Data(format!("{}: {io}", file.display())),
            other => other,
        })?;
        Corpus::prepare(&records, &self.prep, self.seed())
    }

    pub fn model_config(&self, corpus: &Corpus) -> Result<ModelConfig> {
        let mut cfg = model_config_for(corpus);
        cfg.apply(&self.kv)?;
        Ok(cfg)
    }
}

/// A data directory holds `events.jsonl`; a plain file path is used as is.
pub fn events_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(EVENTS_FILE)
    } else {
        data.to_path_buf()
    }
}
