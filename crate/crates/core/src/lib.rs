//! Long-tail augmentation in a learned sparse latent space.
//!
//! A student network maps latents onto per-pixel simplices, a decoder maps
//! them back, and a classifier on the sparse codes drives class activation
//! maps. Tail-class samples are synthesized by splicing a tail code with a
//! confusable head neighbour along those maps.

pub mod cam;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod models;
pub mod nn;
pub mod seed;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
