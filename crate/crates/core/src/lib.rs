//! Token-superposition pre-training laboratory.
//!
//! Bag-folded inputs with mean-superposed embeddings, multi-hot cross-entropy
//! objectives and a two-phase (superposition, then recovery) trainer on top of
//! a small reverse-mode autodiff engine. See the README for the CLI.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod par;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
