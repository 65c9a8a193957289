//! Context-sensitive similarity learning on frozen embeddings.
//!
//! Human odd-one-out judgments made in the presence of a context image are
//! modeled by a learned affine-plus-normalize transform of each embedding and
//! a low-rank PSD kernel whose factor `B_c` is produced from the context
//! embedding by a linear layer. The crate covers the whole pipeline:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`embedding`] | embedding store and the `CSEM` binary format |
//! | [`dataset`] | 8-choose-2 trials, triplet expansion, class filtering, splits |
//! | [`model`] | transform, context kernel, probabilities, baselines, checkpoints |
//! | [`training`] | regularized NLL, analytic gradients, SGD, grid search |
//! | [`evaluation`] | accuracy, paired bootstrap, class-level upper bound |
//! | [`analysis`] | similarity matrices and PCA coordinates |
//! | [`synthetic`] | ground-truth models and sampled datasets |

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod embedding;
mod error;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod synthetic;
pub mod training;

pub use config::Tolerances;
pub use dataset::{ClassMap, ContextTriplet, Split, SplitAssignment, SplitRatios, TrialRecord};
pub use embedding::{load_embeddings, write_embeddings, EmbeddingStore, ImageId};
pub use error::{Error, Result};
pub use evaluation::{BootstrapResult, PredictionVector, UpperBound};
pub use model::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use model::{ModelKind, ModelParams, TripletProbabilities};
pub use synthetic::SyntheticSpec;
pub use training::{GradientSet, TrainConfig, TrainHistory};
