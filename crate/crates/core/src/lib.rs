//! Adversarial connective-imitation for implicit discourse relation
//! classification, with a small reverse-mode autodiff engine underneath.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod training;

pub use config::{Mode, TrainConfig};
pub use corpus::{Corpus, CorpusSpec, RelationExample};
pub use error::{Error, Result};
pub use eval::MetricsRecord;
pub use tensor::Tensor;
pub use training::{PreparedData, System, TrainOutcome};
