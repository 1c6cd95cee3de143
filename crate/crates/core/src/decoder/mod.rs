//! Feed-forward decoders mapping an embedding (and optionally a guiding
//! image) to an image, trained on the same loss used for iterative
//! reconstruction.

mod eval;
mod net;
mod train;

pub use eval::{compare_ff_vs_iterative, evaluate, MetricsRow, ScatterPoint, ScatterReport};
pub use net::{DecodeTrace, DecoderConfig, DecoderNet};
pub use train::{train, validation_samples, Sample, Sampler, TrainConfig, TrainHistory};
