//! Multi-head self-attention with a long/short head partition.
//!
//! The first `n_local` heads use a sliding causal window, the remaining
//! `n_global` heads use the full causal prefix. Head outputs are concatenated
//! in head order and projected by `W_O`.

use rand::Rng;

use crate::attention::kernel::{attend, attend_backward, attend_streaming, AttentionTrace};
use crate::attention::mask::{build_mask, MaskSpec};
use crate::attention::qknorm::{normalize_rows, normalize_rows_backward};
use crate::error::{shape, Error, Result};
use crate::matrix::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl HeadWeights {
    pub fn zeros(d: usize, d_k: usize, d_v: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d, d_k),
            w_k: Matrix::zeros(d, d_k),
            w_v: Matrix::zeros(d, d_v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadWeights {
    pub heads: Vec<HeadWeights>,
    pub w_o: Matrix,
    /// Per-head QK-normalization gain as a `1 x H` row. Only read when the
    /// layout enables QK-normalization.
    pub qk_gain: Matrix,
}

impl MultiHeadWeights {
    /// Random projections from Normal(0, std²); gains start at `√d_k`.
    pub fn random<R: Rng + ?Sized>(
        d: usize,
        h: usize,
        d_k: usize,
        d_v: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let heads = (0..h)
            .map(|_| HeadWeights {
                w_q: Matrix::randn(d, d_k, std, rng),
                w_k: Matrix::randn(d, d_k, std, rng),
                w_v: Matrix::randn(d, d_v, std, rng),
            })
            .collect();
        Self {
            heads,
            w_o: Matrix::randn(h * d_v, d, std, rng),
            qk_gain: Matrix::filled(1, h, (d_k as f64).sqrt()),
        }
    }

    /// Same shapes, every entry zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self
                .heads
                .iter()
                .map(|hw| HeadWeights::zeros(hw.w_q.rows(), hw.w_q.cols(), hw.w_v.cols()))
                .collect(),
            w_o: Matrix::zeros(self.w_o.rows(), self.w_o.cols()),
            qk_gain: Matrix::zeros(1, self.qk_gain.cols()),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// `(d, d_k, d_v)`, or an error if the heads disagree.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::InvalidArgument("multi-head weights with zero heads".into()))?;
        let d = first.w_q.rows();
        let d_k = first.w_q.cols();
        let d_v = first.w_v.cols();
        for (i, hw) in self.heads.iter().enumerate() {
            if hw.w_q.shape() != (d, d_k)
                || hw.w_k.shape() != (d, d_k)
                || hw.w_v.shape() != (d, d_v)
            {
                return Err(shape(
                    "MultiHeadWeights",
                    format!("head {i} differs from head 0"),
                ));
            }
        }
        if self.w_o.shape() != (self.heads.len() * d_v, d) {
            return Err(shape(
                "MultiHeadWeights",
                format!(
                    "W_O is {:?}, expected {:?}",
                    self.w_o.shape(),
                    (self.heads.len() * d_v, d)
                ),
            ));
        }
        if self.qk_gain.shape() != (1, self.heads.len()) {
            return Err(shape("MultiHeadWeights", "qk_gain must be 1 x H"));
        }
        Ok((d, d_k, d_v))
    }

    /// Every matrix in a fixed order: per head W_Q, W_K, W_V, then W_O, then
    /// the gain row.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = Vec::with_capacity(3 * self.heads.len() + 2);
        for hw in &self.heads {
            v.extend([&hw.w_q, &hw.w_k, &hw.w_v]);
        }
        v.push(&self.w_o);
        v.push(&self.qk_gain);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = Vec::with_capacity(3 * self.heads.len() + 2);
        for hw in &mut self.heads {
            v.extend([&mut hw.w_q, &mut hw.w_k, &mut hw.w_v]);
        }
        v.push(&mut self.w_o);
        v.push(&mut self.qk_gain);
        v
    }
}

/// Head partition: `n_local` sliding-window heads first, then `n_global`
/// causal heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LsLayout {
    pub n_local: usize,
    pub n_global: usize,
    /// Previous tokens a local head sees, in addition to the current one.
    pub local_span: usize,
    pub qk_norm: bool,
}

impl LsLayout {
    /// Plain causal multi-head attention.
    pub fn vanilla(heads: usize) -> Self {
        Self {
            n_local: 0,
            n_global: heads,
            local_span: 0,
            qk_norm: false,
        }
    }

    pub fn ls(n_local: usize, n_global: usize, local_span: usize) -> Self {
        Self {
            n_local,
            n_global,
            local_span,
            qk_norm: false,
        }
    }

    pub fn with_qk_norm(mut self, on: bool) -> Self {
        self.qk_norm = on;
        self
    }

    pub fn heads(&self) -> usize {
        self.n_local + self.n_global
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads() == 0 {
            return Err(Error::InvalidArgument("layout has no heads".into()));
        }
        if self.n_local > 0 && self.local_span == 0 {
            return Err(Error::InvalidArgument(
                "local heads need a span of at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn check_heads(&self, h: usize) -> Result<()> {
        self.validate()?;
        if self.heads() != h {
            return Err(shape(
                "LsLayout",
                format!(
                    "{} local + {} global heads for {h}-head weights",
                    self.n_local, self.n_global
                ),
            ));
        }
        Ok(())
    }

    pub fn is_local(&self, head: usize) -> bool {
        head < self.n_local
    }

    pub fn mask_for_head(&self, head: usize) -> MaskSpec {
        if self.is_local(head) {
            MaskSpec::LocalCausal {
                span: self.local_span,
            }
        } else {
            MaskSpec::GlobalCausal
        }
    }
}

/// Which single-head kernel a multi-head pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// Materializes scores and probabilities; required for backward.
    Exact,
    /// Online softmax over each query's window; traces carry only the max.
    Streaming,
}

/// Per-head projections, with QK-normalization applied when enabled.
/// Returns `(q_raw, k_raw, q, k, v)`.
fn project_head(
    x: &Matrix,
    w: &MultiHeadWeights,
    layout: &LsLayout,
    head: usize,
) -> Result<(Matrix, Matrix, Matrix, Matrix, Matrix)> {
    let hw = &w.heads[head];
    let q_raw = matmul(x, &hw.w_q)?;
    let k_raw = matmul(x, &hw.w_k)?;
    let v = matmul(x, &hw.w_v)?;
    let (q, k) = if layout.qk_norm {
        let g = w.qk_gain.get(0, head);
        (normalize_rows(&q_raw, g)?, normalize_rows(&k_raw, g)?)
    } else {
        (q_raw.clone(), k_raw.clone())
    };
    Ok((q_raw, k_raw, q, k, v))
}

fn check_input(
    x: &Matrix,
    w: &MultiHeadWeights,
    layout: &LsLayout,
) -> Result<(usize, usize, usize)> {
    let dims = w.dims()?;
    layout.check_heads(w.num_heads())?;
    if x.cols() != dims.0 {
        return Err(shape(
            "mhsa",
            format!("input width {} vs model width {}", x.cols(), dims.0),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    Ok(dims)
}

/// Exact multi-head forward. Returns the output and one trace per head.
pub fn mhsa_forward(
    x: &Matrix,
    w: &MultiHeadWeights,
    layout: &LsLayout,
    scale: f64,
) -> Result<(Matrix, Vec<AttentionTrace>)> {
    mhsa_forward_with(x, w, layout, scale, Kernel::Exact)
}

/// Multi-head forward with an explicit kernel choice.
pub fn mhsa_forward_with(
    x: &Matrix,
    w: &MultiHeadWeights,
    layout: &LsLayout,
    scale: f64,
    kernel: Kernel,
) -> Result<(Matrix, Vec<AttentionTrace>)> {
    check_input(x, w, layout)?;
    let n = x.rows();
    let per_head = par::map_indexed(w.num_heads(), |h| -> Result<(Matrix, AttentionTrace)> {
        let (_, _, q, k, v) = project_head(x, w, layout, h)?;
        let spec = layout.mask_for_head(h);
        match kernel {
            Kernel::Exact => attend(&q, &k, &v, &build_mask(&spec, n), scale),
            Kernel::Streaming => {
                let (y, max_abs_logit) = attend_streaming(&q, &k, &v, &spec, scale)?;
                Ok((
                    y,
                    AttentionTrace {
                        logits: None,
                        probs: None,
                        max_abs_logit,
                    },
                ))
            }
        }
    });
    let mut outs = Vec::with_capacity(per_head.len());
    let mut traces = Vec::with_capacity(per_head.len());
    for r in per_head {
        let (y, t) = r?;
        outs.push(y);
        traces.push(t);
    }
    let concat = Matrix::hconcat(&outs)?;
    Ok((matmul(&concat, &w.w_o)?, traces))
}

/// Backward of [`mhsa_forward`]. Projections are recomputed from `x`; the
/// traces must come from the forward call on the same inputs.
pub fn mhsa_backward(
    x: &Matrix,
    w: &MultiHeadWeights,
    layout: &LsLayout,
    scale: f64,
    traces: &[AttentionTrace],
    dy: &Matrix,
) -> Result<(Matrix, MultiHeadWeights)> {
    let (d, _, d_v) = check_input(x, w, layout)?;
    let n = x.rows();
    let h_count = w.num_heads();
    if traces.len() != h_count {
        return Err(Error::BadTrace(format!(
            "{} traces for {h_count} heads",
            traces.len()
        )));
    }
    if dy.shape() != (n, d) {
        return Err(shape(
            "mhsa_backward",
            format!("dY {:?} vs output {:?}", dy.shape(), (n, d)),
        ));
    }
    let d_concat = matmul_nt(dy, &w.w_o)?;

    struct HeadGrad {
        w: HeadWeights,
        gain: f64,
        dx: Matrix,
        out: Matrix,
    }

    let per_head = par::map_indexed(h_count, |h| -> Result<HeadGrad> {
        let trace = &traces[h];
        let (q_raw, k_raw, q, k, v) = project_head(x, w, layout, h)?;
        let (Some(s), Some(p)) = (&trace.logits, &trace.probs) else {
            return Err(Error::BadTrace(format!(
                "head {h} has no scores/probabilities"
            )));
        };
        if s.shape() != (n, n) || p.shape() != (n, n) {
            return Err(Error::BadTrace(format!(
                "head {h} trace is {:?} for a length-{n} input",
                p.shape()
            )));
        }
        // Spot-check the first and last score rows against a recomputation.
        for &i in &[0, n - 1] {
            let expect = matmul_nt(&q.slice_rows(i, i + 1), &k)?.map(|z| z / scale);
            if expect.row(0) != s.row(i) {
                return Err(Error::BadTrace(format!(
                    "head {h} trace does not match these inputs"
                )));
            }
        }
        let mask = build_mask(&layout.mask_for_head(h), n);
        let d_out = d_concat.slice_cols(h * d_v, (h + 1) * d_v);
        let (dq, dk, dv) = attend_backward(&q, &k, &v, &mask, scale, trace, &d_out)?;
        let (dq_raw, dk_raw, gain) = if layout.qk_norm {
            let g = w.qk_gain.get(0, h);
            let (dq_raw, gq) = normalize_rows_backward(&q_raw, g, &dq)?;
            let (dk_raw, gk) = normalize_rows_backward(&k_raw, g, &dk)?;
            (dq_raw, dk_raw, gq + gk)
        } else {
            (dq, dk, 0.0)
        };
        let hw = &w.heads[h];
        let mut dx = matmul_nt(&dq_raw, &hw.w_q)?;
        dx.add_assign(&matmul_nt(&dk_raw, &hw.w_k)?)?;
        dx.add_assign(&matmul_nt(&dv, &hw.w_v)?)?;
        Ok(HeadGrad {
            w: HeadWeights {
                w_q: matmul_tn(x, &dq_raw)?,
                w_k: matmul_tn(x, &dk_raw)?,
                w_v: matmul_tn(x, &dv)?,
            },
            gain,
            dx,
            out: matmul(p, &v)?,
        })
    });

    let mut grads = w.zeros_like();
    let mut dx = Matrix::zeros(n, d);
    let mut outs = Vec::with_capacity(h_count);
    for (h, r) in per_head.into_iter().enumerate() {
        let g = r?;
        dx.add_assign(&g.dx)?;
        grads.heads[h] = g.w;
        grads.qk_gain.set(0, h, g.gain);
        outs.push(g.out);
    }
    grads.w_o = matmul_tn(&Matrix::hconcat(&outs)?, dy)?;
    Ok((dx, grads))
}
