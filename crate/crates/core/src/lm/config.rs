use crate::attention::mhsa::LsLayout;
use crate::error::{Error, Result};

/// Byte vocabulary plus one padding id.
pub const BYTE_VOCAB: usize = 257;
pub const PAD_ID: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Every head global causal.
    Vanilla,
    /// Explicit long/short partition (may itself enable QK-normalization).
    Ls(LsLayout),
    /// Every head global causal with QK-normalization.
    QkNorm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    /// Maximum sequence length (rows of the positional embedding).
    pub seq_len: usize,
    pub attention: AttentionKind,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Two layers of width 64 over a 128-token byte context.
    pub fn desk(attention: AttentionKind) -> Self {
        Self {
            n_layers: 2,
            d: 64,
            heads: 4,
            d_ffn: 256,
            vocab: BYTE_VOCAB,
            seq_len: 128,
            attention,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// Six layers, width 192, six heads, FFN 768.
    pub fn paper_shape(seq_len: usize, attention: AttentionKind) -> Self {
        Self {
            n_layers: 6,
            d: 192,
            heads: 6,
            d_ffn: 768,
            vocab: BYTE_VOCAB,
            seq_len,
            attention,
            init_std: 0.02,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Softmax temperature `√d_k`.
    pub fn scale(&self) -> f64 {
        (self.head_dim() as f64).sqrt()
    }

    pub fn layout(&self) -> LsLayout {
        match self.attention {
            AttentionKind::Vanilla => LsLayout::vanilla(self.heads),
            AttentionKind::QkNorm => LsLayout::vanilla(self.heads).with_qk_norm(true),
            AttentionKind::Ls(l) => l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_layers == 0
            || self.d == 0
            || self.heads == 0
            || self.vocab == 0
            || self.seq_len == 0
        {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d = {} is not divisible by H = {}",
                self.d, self.heads
            ));
        }
        if self.d_ffn < self.d {
            return bad(format!(
                "d_ffn = {} must be at least d = {}",
                self.d_ffn, self.d
            ));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std {}", self.init_std));
        }
        self.layout().check_heads(self.heads)
    }
}
