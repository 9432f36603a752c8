//! Tiny GPT-style byte-level language model with exact gradients and
//! per-head logit telemetry.

pub mod config;
pub mod corpus;
pub mod divergence;
pub mod model;
pub mod params;
pub mod train;

pub use config::{AttentionKind, ModelConfig, BYTE_VOCAB, PAD_ID};
pub use corpus::ByteCorpus;
pub use divergence::detect_divergence;
pub use model::{
    lm_forward, lm_forward_with, lm_loss, lm_loss_and_grads, qk_logit_bounds, LmOutput,
    LossAndGrads,
};
pub use params::{init_params, LayerParams, Params};
pub use train::{
    train_lm, train_lm_with, TelemetryRecord, TrainConfig, TrainOutcome, TrainStatus,
    ValidationRecord,
};
