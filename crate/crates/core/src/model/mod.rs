//! Decoder-only transformer language model, decoding, and checkpoints.

pub mod checkpoint;
mod config;
mod generate;
mod transformer;

pub use config::{ModelConfig, MLP_RATIO};
pub use generate::{generate, generate_batch, AdaptedLm, CausalLm, DecodeConfig, DecodeMode};
pub use transformer::{ForwardPass, GradMode, ParamSet, TransformerLm};
