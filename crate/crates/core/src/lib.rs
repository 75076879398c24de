//! Multimodal question answering over fixed image features.
//!
//! A question LSTM encodes the question, an answer LSTM tracks the partial
//! answer, and a fusing layer combines both with the image representation
//! and the current word before a softmax layer whose weights are the
//! transposed word-embedding table. See the crate `examples/` directory for
//! one runnable program per capability.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod train;
pub mod vocab;

pub use error::{MqaError, Result};
pub use model::{EncodedExample, MqaConfig, MqaModel, Variant};
