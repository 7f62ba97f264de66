//! Implicit-feedback recommender training built around set-wise contrastive
//! losses over cosine scores.
//!
//! The pipeline is: load an [`InteractionDataset`], draw uniform negatives with
//! a [`NegativeSampler`], score examples through an encoder, evaluate one of the
//! [`LossSpec`] kernels, push score gradients back into the [`EmbeddingTable`]
//! and apply a lazy Adam step. [`eval::evaluate`] ranks every non-train item for
//! each user and reports Recall@K / NDCG@K.

pub mod config;
pub mod dataset;
pub mod encoder;
mod error;
pub mod eval;
pub mod losses;
pub mod run;
pub mod sampler;
pub mod trainer;

pub use dataset::{DatasetStats, InteractionDataset};
pub use encoder::{EmbeddingTable, EncoderConfig, EncoderKind, ScoredBatch};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use losses::{LossGrad, LossSpec, Scores};
pub use sampler::{NegativeSampler, SamplerConfig};
pub use trainer::{AdamState, TrainConfig, TrainTrace};
