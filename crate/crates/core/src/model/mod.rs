//! The log-mel wav2vec encoder.

mod config;
pub mod encoder;
mod params;

pub use config::ModelConfig;
pub use encoder::{apply_mask, context_encode, feature_encode, sample_mask, time_stack, ContextOptions, ContextOutput, MaskSpec};
pub use params::{Bound, ParamStore};
