//! Knowledge distillation laboratory for small autoregressive language
//! models: standard, on-policy and online distillation with a shared metric
//! suite.

pub mod adapters;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod objectives;
pub mod trainers;

pub use error::{Error, Result};
