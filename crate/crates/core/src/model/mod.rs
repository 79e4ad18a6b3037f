//! Pre-norm transformer encoder-decoder with analytic gradients.

mod batch;
pub mod checkpoint;
mod config;
mod inference;
mod layers;
mod params;
mod transformer;

use thiserror::Error;

pub use batch::{Batch, Example};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use config::ModelConfig;
pub use inference::{decode_step, encode, greedy_step, greedy_step_uncached, DecoderCache, EncoderMemory};
pub use params::{
    glorot_bound, init_params, AttentionParams, DecoderLayerParams, EncoderLayerParams,
    FeedForwardParams, Gradients, LayerNormParams, ModelParams,
};
pub use transformer::{forward, loss_and_grad, loss_and_grad_sum, loss_sum, LossSum};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("batch has no target tokens")]
    EmptyBatch,
    #[error("empty sequence")]
    EmptySequence,
    #[error("malformed batch: {0}")]
    Malformed(String),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
}
