//! Desk-scale training pipeline for a character-level transformer whose FFN
//! blocks can be swapped for Kronecker-factorized ones.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{ToyModelConfig, TrainConfig};
pub use data::{Batch, Corpus, Vocab};
pub use model::{Ffn, Model};
pub use schedule::learning_rate;
pub use trainer::{compress_checkpoint, eval_nll, finetune, train_dense, EvalReport, LogRecord, TrainLog};

/// A small public-domain sample text for tests and demos.
pub const SAMPLE_CORPUS: &str = include_str!("../data/sonnets.txt");
