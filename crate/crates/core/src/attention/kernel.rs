//! Single-head masked attention: the exact kernel that materializes scores,
//! a streaming kernel built on online softmax, and the analytic backward.

use crate::attention::mask::MaskSpec;
use crate::error::{shape, Error, Result};
use crate::matrix::{
    axpy, dot, masked_softmax_rows, matmul, matmul_nt, matmul_tn, max_abs_entries, AdditiveMask,
    Matrix,
};
use crate::par;

/// Per-head diagnostics from a forward pass.
///
/// `logits` holds the scaled scores `QKᵀ / scale` that enter the softmax, so
/// `max_abs_logit` is directly comparable across heads with different widths.
/// The streaming kernel leaves both matrices empty.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub logits: Option<Matrix>,
    pub probs: Option<Matrix>,
    pub max_abs_logit: f64,
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix, op: &'static str) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(shape(
            op,
            format!("query width {} vs key width {}", q.cols(), k.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(shape(
            op,
            format!("{} keys vs {} values", k.rows(), v.rows()),
        ));
    }
    Ok(())
}

/// Scores scaled the same way `masked_softmax_rows` scales them.
fn scaled_scores(q: &Matrix, k: &Matrix, scale: f64) -> Result<Matrix> {
    Ok(matmul_nt(q, k)?.map(|x| x / scale))
}

/// `softmax((QKᵀ + M) / scale) · V`, keeping scores and probabilities.
pub fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &AdditiveMask,
    scale: f64,
) -> Result<(Matrix, AttentionTrace)> {
    check_qkv(q, k, v, "attend")?;
    if mask.shape() != (q.rows(), k.rows()) {
        return Err(shape(
            "attend",
            format!(
                "mask {:?} for {} queries x {} keys",
                mask.shape(),
                q.rows(),
                k.rows()
            ),
        ));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale {scale}")));
    }
    let s = scaled_scores(q, k, scale)?;
    let p = masked_softmax_rows(&s, mask, 1.0)?;
    let y = matmul(&p, v)?;
    let max_abs_logit = max_abs_entries(&s, Some(mask));
    Ok((
        y,
        AttentionTrace {
            logits: Some(s),
            probs: Some(p),
            max_abs_logit,
        },
    ))
}

/// Streaming attention: one pass over each query's key range with a running
/// maximum and normalizer. Never forms the score matrix.
pub fn attend_streaming(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &MaskSpec,
    scale: f64,
) -> Result<(Matrix, f64)> {
    let (y, max_abs, _) = attend_streaming_counted(q, k, v, mask, scale)?;
    Ok((y, max_abs))
}

/// [`attend_streaming`] that also reports how many key positions it visited.
pub fn attend_streaming_counted(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &MaskSpec,
    scale: f64,
) -> Result<(Matrix, f64, u64)> {
    check_qkv(q, k, v, "attend_streaming")?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale {scale}")));
    }
    let n_keys = k.rows();
    if let Some(row) = (0..q.rows()).find(|&i| mask.key_range(i, n_keys).is_empty()) {
        return Err(Error::DegenerateRow { row });
    }
    let d_v = v.cols();
    let rows = par::map_indexed(q.rows(), |i| {
        let mut acc = vec![0.0; d_v];
        let (max_abs, visits) = online_softmax_row(
            q.row(i),
            mask.key_range(i, n_keys).map(|j| (k.row(j), v.row(j))),
            scale,
            &mut acc,
        );
        (acc, max_abs, visits)
    });
    let mut y = Matrix::zeros(q.rows(), d_v);
    let mut max_abs = 0.0f64;
    let mut visits = 0u64;
    for (i, (acc, m, c)) in rows.into_iter().enumerate() {
        y.row_mut(i).copy_from_slice(&acc);
        max_abs = if max_abs.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            max_abs.max(m)
        };
        visits += c;
    }
    Ok((y, max_abs, visits))
}

/// Attends one query over `(key, value)` pairs in the order given, writing
/// the normalized output into `out`. Returns the largest |scaled logit| seen
/// and the number of keys consumed.
pub(crate) fn online_softmax_row<'a>(
    q: &[f64],
    kv: impl Iterator<Item = (&'a [f64], &'a [f64])>,
    scale: f64,
    out: &mut [f64],
) -> (f64, u64) {
    out.iter_mut().for_each(|x| *x = 0.0);
    let mut running_max = f64::NEG_INFINITY;
    let mut normalizer = 0.0;
    let mut max_abs = 0.0f64;
    let mut visits = 0u64;
    for (k, v) in kv {
        visits += 1;
        let s = dot(q, k) / scale;
        max_abs = if s.is_nan() {
            f64::NAN
        } else {
            max_abs.max(s.abs())
        };
        if s > running_max {
            let correction = (running_max - s).exp();
            normalizer = normalizer * correction + 1.0;
            for (o, &vj) in out.iter_mut().zip(v) {
                *o = *o * correction + vj;
            }
            running_max = s;
        } else {
            let w = (s - running_max).exp();
            normalizer += w;
            axpy(out, w, v);
        }
    }
    let inv = 1.0 / normalizer;
    out.iter_mut().for_each(|o| *o *= inv);
    (max_abs, visits)
}

/// Gradient of a softmax row-block: `dS = P ⊙ (dP − rowsum(dP ⊙ P))`,
/// with disallowed entries forced to exactly zero.
pub(crate) fn softmax_backward(p: &Matrix, dp: &Matrix, mask: &AdditiveMask) -> Matrix {
    let cols = p.cols();
    let mut ds = Matrix::zeros(p.rows(), cols);
    par::for_each_row_mut(ds.as_mut_slice(), cols, 64, |i, ds_row| {
        let (p_row, dp_row, allowed) = (p.row(i), dp.row(i), mask.row(i));
        let mut r = 0.0;
        for j in 0..cols {
            if allowed[j] {
                r += dp_row[j] * p_row[j];
            }
        }
        for j in 0..cols {
            if allowed[j] {
                ds_row[j] = p_row[j] * (dp_row[j] - r);
            }
        }
    });
    ds
}

/// Gradients of `sum(Y ⊙ dY)` for `Y = attend(Q, K, V, mask, scale)`.
pub fn attend_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &AdditiveMask,
    scale: f64,
    trace: &AttentionTrace,
    dy: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    check_qkv(q, k, v, "attend_backward")?;
    let p = trace
        .probs
        .as_ref()
        .ok_or_else(|| Error::BadTrace("attention probabilities were not recorded".into()))?;
    if trace.logits.is_none() {
        return Err(Error::BadTrace("attention logits were not recorded".into()));
    }
    if p.shape() != (q.rows(), k.rows()) || mask.shape() != p.shape() {
        return Err(Error::BadTrace(format!(
            "trace {:?} / mask {:?} for {} queries x {} keys",
            p.shape(),
            mask.shape(),
            q.rows(),
            k.rows()
        )));
    }
    if dy.shape() != (q.rows(), v.cols()) {
        return Err(shape(
            "attend_backward",
            format!("dY {:?} vs output {:?}", dy.shape(), (q.rows(), v.cols())),
        ));
    }
    let dv = matmul_tn(p, dy)?;
    let dp = matmul_nt(dy, v)?;
    let mut ds = softmax_backward(p, &dp, mask);
    ds.scale_in_place(1.0 / scale);
    let dq = matmul(&ds, k)?;
    let dk = matmul_tn(&ds, q)?;
    Ok((dq, dk, dv))
}
