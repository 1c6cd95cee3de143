//! Inversion of image embeddings.
//!
//! Given a target embedding vector, reconstruct an image whose embedding
//! matches it by minimizing a composite loss (embedding distance plus image
//! regularizers), either iteratively by gradient descent on the pixels or in
//! a single pass through a trained feed-forward decoder.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoder;
pub mod embedder;
pub mod error;
pub mod gradsuite;
pub mod invert;
pub mod numcore;
pub mod objective;
pub mod pyramid;
pub mod synth;

pub use error::{Error, Result};
pub use numcore::{Image, Rng, Tensor};
