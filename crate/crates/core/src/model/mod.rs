//! The conversion network: a pyramid bidirectional encoder, an
//! autoregressive decoder with hybrid forward attention, an MSE or Gaussian
//! mixture output head, a completion head and a convolutional PostNet.
//!
//! All network code runs on a [`Graph`](crate::numerics::Graph), so the same
//! functions serve teacher-forced training and free-running conversion.

mod attention;
mod config;
mod convert;
mod decoder;
mod encoder;
mod gmm;
mod init;
mod layers;
mod postnet;
#[cfg(test)]
mod tests;

pub use attention::{
    attention_scores, context, forward_attention_step, initial_alignment, ATTENTION_FLOOR,
    DEGENERATE_MASS,
};
pub use config::{InputChannels, ModelConfig, OutputMode};
pub use convert::{convert, ConvertLimits, Conversion, StopReason};
pub use decoder::{decoder_step, teacher_forced, DecoderState, DecoderStepOutput, TeacherForced};
pub use encoder::{encode, location_code, pyramid_encode, EncoderStates};
pub use gmm::{gmm_nll, gmm_partition, gmm_select_mean, select_mean, GmmFrameParams};
pub use init::init_params;
pub use layers::Masks;
pub use postnet::{postnet_refine, refine};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("expected {expected} input dims, got {got}")]
    InputDims { expected: usize, got: usize },
    #[error("output vector has length {got}, expected {expected}")]
    OutputLength { expected: usize, got: usize },
    #[error("alignment mass vanished at decoder step {step}")]
    DegenerateAlignment { step: usize },
    #[error("sequence is empty")]
    EmptySequence,
}
