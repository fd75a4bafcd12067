//! Posthoc concept extraction for CNN classifiers.
//!
//! A small CNN ([`blackbox`]) is trained on a synthetic parts dataset
//! ([`synthparts`]). Per-class linear autoencoders with learnable concept
//! vectors ([`explainer`]) then explain its predictions through localized
//! concept masks and signed relevance scores. [`baseline`] provides the
//! PCA + K-means comparison and [`eval`] the agreement and localization
//! metrics.

pub mod baseline;
pub mod blackbox;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod explainer;
pub mod gradcheck;
pub mod layers;
pub mod netpbm;
pub mod optim;
pub mod pipeline;
pub mod seeding;
pub mod synthparts;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
