//! Transformer-based cross-modal fusion for visual question answering, trained
//! with embedding-level adversarial perturbations, plus checkpoint averaging and
//! majority-vote ensembling, on a deterministic synthetic VQA task.

pub mod advtrain;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod model;
pub mod modelops;
pub mod par;
pub mod rng;
pub mod toyvqa;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
