//! Interpretability toolkit for residual-stream activations of vision-language
//! models.
//!
//! Activations arrive as ACTS1 shards ([`store`]). From there the crate trains
//! sparse autoencoders ([`sae`]) and linear probes ([`probe`]), builds and
//! applies steering vectors ([`steering`]), approximates directions with few
//! dictionary atoms ([`sda`]), and computes evaluation metrics and feature
//! reports ([`metrics`], [`report`]).

pub mod codec;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod probe;
pub mod report;
pub mod sae;
pub mod sda;
pub mod steering;
pub mod store;

pub use error::{Category, Error, Result};
pub use metrics::{DecileProfile, ScorePoint};
pub use numerics::{Matrix, Precision, Vector};
pub use probe::{ProbeModel, ProbeTrainConfig};
pub use sae::{SaeParams, SaeTrainConfig, SparseCodes};
pub use sda::{SdaProblem, SdaResult};
pub use steering::{ApplySpec, SteeringMethod, SteeringVector};
pub use store::{ClassEmbedding, Modality, ModalityFilter, Shard, TokenRow};
