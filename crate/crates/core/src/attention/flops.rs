//! Deterministic attention cost model.
//!
//! Costs are multiply-add pairs spent on scores (`q·k`, `d_k` each) and on
//! value aggregation (`p·v`, `d_v` each) for every allowed (query, key) pair.
//! Softmax exponentials and projections are not counted.

use crate::attention::mhsa::LsLayout;

/// One-line description of what the counts mean, for report headers.
pub const FLOP_MODEL_NOTE: &str =
    "multiply-add pairs of score (d_k) and value aggregation (d_v) per allowed query/key pair; softmax and projections excluded";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopReport {
    pub ls_flops: u64,
    pub vanilla_flops: u64,
    /// `vanilla_flops / ls_flops`.
    pub ratio: f64,
}

/// Allowed pairs of a global causal head over `n` tokens: `n(n+1)/2`.
pub fn global_pairs(n: u64) -> u64 {
    n * (n + 1) / 2
}

/// Allowed pairs of a local causal head with span `p`: `Σᵢ (min(i, p) + 1)`.
pub fn local_pairs(n: u64, p: u64) -> u64 {
    if n <= p + 1 {
        global_pairs(n)
    } else {
        (p + 1) * (p + 2) / 2 + (n - p - 1) * (p + 1)
    }
}

pub fn attention_flops(layout: &LsLayout, n: usize, d_k: usize, d_v: usize) -> FlopReport {
    let n = n as u64;
    let width = (d_k + d_v) as u64;
    let g = global_pairs(n);
    let ls_flops = layout.n_local as u64 * local_pairs(n, layout.local_span as u64) * width
        + layout.n_global as u64 * g * width;
    let vanilla_flops = layout.heads() as u64 * g * width;
    FlopReport {
        ls_flops,
        vanilla_flops,
        ratio: vanilla_flops as f64 / ls_flops as f64,
    }
}
