//! Encoder-decoder topology inference: encoders producing the inferred
//! infection matrix, decoders reconstructing daily new cases, the loss, and
//! the training loop.

pub mod decoder;
pub mod encoder;
pub mod train;

pub use decoder::{
    cumulative_matrix, efb_forward, efb_reconstruct, esc_forward, ground_truth_inputs,
    series_time_major, EfbOutputs,
};
pub use encoder::{dti_forward, fti_forward, DtiParams, DtiVars, FtiParams};
pub use train::{
    loss, mobility_estimate, train, EncoderParams, EpiParams, EpochMetrics, ModelKind,
    ModelState, TrainConfig, Trainer, TrainResult,
};
