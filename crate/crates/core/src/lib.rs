//! Few-shot image recognition with memory matching networks.
//!
//! A support set is embedded by a small convolutional backbone and written
//! into a key-value memory. Support embeddings are refined by attending over
//! that memory, while the query network's last convolution receives
//! per-episode parameters predicted from the memory by a bidirectional LSTM.
//! Queries are classified by dot-product matching against the support set.

pub mod ctxlearner;
pub mod embednet;
pub mod episodes;
mod error;
pub mod memory;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
