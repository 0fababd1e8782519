//! Drift-aware continual tokenization for generative recommendation.

pub mod adapt;
pub mod autograd;
pub mod cdim;
pub mod cf;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod grm;
pub mod nn;
pub mod par;
pub mod plot;
pub mod reassign;
pub mod table;
pub mod tokenizer;

pub use error::{DactError, Result};
