//! A numerical laboratory for masked attention.
//!
//! Global causal, sliding-window local and mixed long/short ("LS") multi-head
//! attention, with analytic gradients, logit telemetry, a tiny decoder-only
//! language model, a banded-target fitting experiment and KV-cache cost
//! models. Everything runs in double precision on the CPU.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kvsim;
pub mod lm;
pub mod matrix;
pub mod optim;
pub mod par;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::{
    global_l2_norm, masked_softmax_rows, matmul, matmul_nt, matmul_tn, max_abs_entries,
    AdditiveMask, Matrix,
};
