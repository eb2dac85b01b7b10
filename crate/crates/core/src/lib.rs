//! Learned forgetting for transformer key-value caches.
//!
//! A small causal transformer keeps an augmented cache (signatures,
//! supersession flags, cumulative attention). A gate scores each entry and
//! its log-retention biases attention away from stale entries. The crate
//! also holds the interference benchmark, five baseline cache policies,
//! training, evaluation and a Monte-Carlo check of the stale-entry bound.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod consolidation;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gate;
pub mod gradsuite;
pub mod model;
pub mod params;
pub mod policy;
pub mod rng;
pub mod scheduler;
pub mod system;
pub mod theory;
pub mod training;

pub use config::HyperParams;
pub use error::{Error, Result};
pub use model::ModelConfig;
pub use params::{Component, ParamStore};
pub use policy::Method;
