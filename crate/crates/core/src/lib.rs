//! SESRec: sequential recommendation enhanced with the user's search history.
//!
//! Both behavior streams are embedded, encoded by separate transformer
//! layers, aligned at the query/item level, split into similar and dissimilar
//! interests by co-attention, and pooled per candidate for prediction.

pub mod alignment;
pub mod analysis;
pub mod autograd;
pub mod config;
pub mod corpus;
pub mod data;
pub mod disentangle;
pub mod embeddings;
pub mod error;
pub mod evaluator;
pub mod interest;
pub mod model;
pub mod params;
pub mod seq_encoder;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use config::KeyValues;
pub use corpus::{Corpus, DenseCatalog, EvalCase, ModelInput, PrepConfig, VocabSizes};
pub use data::{DatasetSplit, Example, Query, RawRecord, RecEvent, SearchEvent, UserHistory};
pub use disentangle::{Partition, ThresholdStrategy};
pub use error::{Error, Result};
pub use interest::LossWeights;
pub use model::{ModelConfig, SesRec};
pub use synth::{generate_synthetic, SynthConfig};
pub use tensor::Mat;
pub use evaluator::{evaluate, EvalReport, Metrics};
pub use trainer::{train, TrainConfig, TrainOutcome};
pub use analysis::{js_divergence, CategoryDistribution, JsReport};
