//! Log-mel wav2vec 2.0 pre-training and spoken language identification.

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod features;
pub mod lid;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod quantizer;
pub mod train;

pub use error::{Error, Result};
