//! Gated-attention sequential recommender: configuration, parameters,
//! full-sequence and incremental forward passes, and Adam training.

mod config;
mod forward;
mod params;
mod session;
mod train;

pub use config::ModelConfig;
pub use forward::{
    bce_loss, embed_sequence, forward_blocks, forward_full, forward_variant, layer_norm_row,
    layer_norm_rows, predict_ctr, sigmoid, silu, silu_prime, AttentionVariant, ForwardTrace,
    LAYER_NORM_EPS,
};
pub use params::{BlockParams, Parameters};
pub use session::DecodeSession;
pub use train::{sequence_gradients, sequence_loss, train, TrainConfig};
