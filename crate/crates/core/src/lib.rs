//! Multi-label metric learning: synthetic multi-label data, group samplers,
//! metric losses, an MLP embedding encoder, SGD training and evaluation.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod sampler;
pub mod trainer;

pub use dataset::{generate_synthetic, load_jsonl, save_jsonl, Dataset, Example, LabelSet, Splits, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{evaluate, MetricsReport};
pub use model::{load_checkpoint, save_checkpoint, EmbeddingModel, EncoderConfig};
pub use sampler::Regime;
pub use trainer::{train, TrainConfig, TrainOutcome, TrainReport};
