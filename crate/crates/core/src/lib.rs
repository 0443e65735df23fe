//! Personalised top-K ranking from positive-only feedback by minimising
//! density-ratio estimation risks.
//!
//! The crate is organised along the training pipeline:
//!
//! - [`data`]: interaction logs, splits and corpus statistics
//! - [`model`]: embedding scorers (`mf`, light graph convolution) and ranking
//! - [`risk`]: Bregman building blocks, ranking-uLSIF, PU regression, BPR
//! - [`weighting`]: uniform, popularity and hard-sample weights
//! - [`sampler`]: user-based mini-batches and item inclusion probabilities
//! - [`trainer`]: the optimisation loop
//! - [`eval`]: Recall@K and nDCG@K
//!
//! plus [`synth`] for synthetic corpora with a known density ratio,
//! [`curves`] for merging training logs and [`checkpoint`]/[`config`] for
//! the on-disk formats used by the `dre-rank` binary.

pub mod checkpoint;
pub mod config;
pub mod curves;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod risk;
pub mod sampler;
pub mod synth;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
