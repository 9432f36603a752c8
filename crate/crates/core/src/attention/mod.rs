//! Masks, single-head kernels, multi-head/LS composition, QK-normalization
//! and the attention cost model.

pub mod flops;
pub mod kernel;
pub mod mask;
pub mod mhsa;
pub mod qknorm;

pub use flops::{attention_flops, FlopReport, FLOP_MODEL_NOTE};
pub use kernel::{
    attend, attend_backward, attend_streaming, attend_streaming_counted, AttentionTrace,
};
pub use mask::{build_mask, MaskSpec};
pub use mhsa::{
    mhsa_backward, mhsa_forward, mhsa_forward_with, HeadWeights, Kernel, LsLayout, MultiHeadWeights,
};
pub use qknorm::{normalize_rows, normalize_rows_backward, qk_normalize};
