//! Pre-norm decoder-only transformer with hand-written reverse mode.
//!
//! Block: `x += MHSA(LN₁(x))`, then `x += W₂·GELU(W₁·LN₂(x) + b₁) + b₂`.
//! Final layer norm, logits through the tied token embedding.

use crate::attention::kernel::AttentionTrace;
use crate::attention::mhsa::{mhsa_backward, mhsa_forward_with, Kernel};
use crate::error::{Error, Result};
use crate::lm::params::{LayerParams, Params};
use crate::matrix::{axpy, matmul, matmul_nt, matmul_tn, Matrix};
use crate::par;

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let d = x.cols();
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut y = Matrix::zeros(x.rows(), d);
    let mut rstd = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        let (gr, br) = (g.row(0), b.row(0));
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = xhat.get(i, j) * gr[j] + br[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
fn layer_norm_backward(c: &LnCache, g: &Matrix, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dg = Matrix::zeros(1, d);
    let mut db = Matrix::zeros(1, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let (dyr, xh) = (dy.row(i), c.xhat.row(i));
        let (mut mean_dxhat, mut mean_dxhat_xhat) = (0.0, 0.0);
        for j in 0..d {
            dxhat[j] = dyr[j] * g.get(0, j);
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = c.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
        for ((o, &dv), &xv) in dg.as_mut_slice().iter_mut().zip(dyr).zip(xh) {
            *o += dv * xv;
        }
        axpy(db.as_mut_slice(), 1.0, dyr);
    }
    (dx, dg, db)
}

fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    for i in 0..m.rows() {
        axpy(m.row_mut(i), 1.0, bias.row(0));
    }
}

struct LayerTape {
    ln1: LnCache,
    a: Matrix,
    traces: Vec<AttentionTrace>,
    ln2: LnCache,
    b: Matrix,
    h: Matrix,
    u: Matrix,
}

struct SeqTape {
    layers: Vec<LayerTape>,
    lnf: LnCache,
    xf: Matrix,
}

struct SeqForward {
    logits: Matrix,
    /// Indexed `layer * H + head`.
    max_abs_logit: Vec<f64>,
    tape: Option<SeqTape>,
}

/// Checks ids and length against the model.
pub fn validate_tokens(params: &Params, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if tokens.len() > params.cfg.seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: params.cfg.seq_len,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t >= params.cfg.vocab) {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: params.cfg.vocab,
        });
    }
    Ok(())
}

fn embed(params: &Params, tokens: &[usize]) -> Matrix {
    let mut x = Matrix::zeros(tokens.len(), params.cfg.d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        row.copy_from_slice(params.tok_emb.row(tok));
        axpy(row, 1.0, params.pos_emb.row(t));
    }
    x
}

/// Runs one block on `x` in place of the residual stream.
fn block_forward(
    lp: &LayerParams,
    params: &Params,
    x: &Matrix,
    kernel: Kernel,
) -> Result<(Matrix, LayerTape)> {
    let cfg = &params.cfg;
    let (a, ln1) = layer_norm(x, &lp.ln1_g, &lp.ln1_b);
    let (attn_y, traces) = mhsa_forward_with(&a, &lp.attn, &cfg.layout(), cfg.scale(), kernel)?;
    let x_mid = x.add(&attn_y)?;
    let (b, ln2) = layer_norm(&x_mid, &lp.ln2_g, &lp.ln2_b);
    let mut h = matmul(&b, &lp.w1)?;
    add_row_bias(&mut h, &lp.b1);
    let u = h.map(gelu);
    let mut f = matmul(&u, &lp.w2)?;
    add_row_bias(&mut f, &lp.b2);
    let x_out = x_mid.add(&f)?;
    Ok((
        x_out,
        LayerTape {
            ln1,
            a,
            traces,
            ln2,
            b,
            h,
            u,
        },
    ))
}

fn forward_seq(
    params: &Params,
    tokens: &[usize],
    kernel: Kernel,
    keep_tape: bool,
) -> Result<SeqForward> {
    validate_tokens(params, tokens)?;
    let mut x = embed(params, tokens);
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut max_abs_logit = Vec::with_capacity(params.layers.len() * params.cfg.heads);
    for lp in &params.layers {
        let (next, tape) = block_forward(lp, params, &x, kernel)?;
        max_abs_logit.extend(tape.traces.iter().map(|t| t.max_abs_logit));
        if keep_tape {
            layers.push(tape);
        }
        x = next;
    }
    let (xf, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let logits = matmul_nt(&xf, &params.tok_emb)?;
    Ok(SeqForward {
        logits,
        max_abs_logit,
        tape: keep_tape.then_some(SeqTape { layers, lnf, xf }),
    })
}

fn backward_seq(
    params: &Params,
    tokens: &[usize],
    tape: &SeqTape,
    dlogits: &Matrix,
) -> Result<Params> {
    let cfg = &params.cfg;
    let layout = cfg.layout();
    let mut g = params.zeros_like();
    let dxf = matmul(dlogits, &params.tok_emb)?;
    g.tok_emb = matmul_tn(dlogits, &tape.xf)?;
    let (mut dx, dg, db) = layer_norm_backward(&tape.lnf, &params.lnf_g, &dxf);
    g.lnf_g = dg;
    g.lnf_b = db;
    for (l, (lp, lt)) in params.layers.iter().zip(&tape.layers).enumerate().rev() {
        let gl = &mut g.layers[l];
        // FFN branch.
        gl.w2 = matmul_tn(&lt.u, &dx)?;
        gl.b2 = dx.column_sums();
        let du = matmul_nt(&dx, &lp.w2)?;
        let mut dh = du;
        for (d, &hv) in dh.as_mut_slice().iter_mut().zip(lt.h.as_slice()) {
            *d *= gelu_grad(hv);
        }
        gl.w1 = matmul_tn(&lt.b, &dh)?;
        gl.b1 = dh.column_sums();
        let dbn = matmul_nt(&dh, &lp.w1)?;
        let (dx_ffn, dg2, db2) = layer_norm_backward(&lt.ln2, &lp.ln2_g, &dbn);
        gl.ln2_g = dg2;
        gl.ln2_b = db2;
        dx.add_assign(&dx_ffn)?;
        // Attention branch.
        let (da, gattn) = mhsa_backward(&lt.a, &lp.attn, &layout, cfg.scale(), &lt.traces, &dx)?;
        gl.attn = gattn;
        let (dx_attn, dg1, db1) = layer_norm_backward(&lt.ln1, &lp.ln1_g, &da);
        gl.ln1_g = dg1;
        gl.ln1_b = db1;
        dx.add_assign(&dx_attn)?;
    }
    for (t, &tok) in tokens.iter().enumerate() {
        axpy(g.tok_emb.row_mut(tok), 1.0, dx.row(t));
        axpy(g.pos_emb.row_mut(t), 1.0, dx.row(t));
    }
    Ok(g)
}

/// Summed next-token cross-entropy over positions `0..T-1` and its
/// gradient scaled by `weight`.
fn next_token_ce(logits: &Matrix, tokens: &[usize], weight: f64) -> (f64, Matrix) {
    let (t_len, v) = logits.shape();
    let mut dlogits = Matrix::zeros(t_len, v);
    let mut total = 0.0;
    for t in 0..t_len.saturating_sub(1) {
        let row = logits.row(t);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let target = tokens[t + 1];
        total += m + z.ln() - row[target];
        let d = dlogits.row_mut(t);
        for (o, &x) in d.iter_mut().zip(row) {
            *o = (x - m).exp() / z * weight;
        }
        d[target] -= weight;
    }
    (total, dlogits)
}

/// Output of a forward pass over a batch.
#[derive(Clone, Debug)]
pub struct LmOutput {
    /// One `T x vocab` matrix per input sequence.
    pub logits: Vec<Matrix>,
    /// Max |scaled logit| per `(layer, head)`, row-major by layer, maximized
    /// over the batch.
    pub max_abs_logit: Vec<f64>,
}

fn fold_max(acc: &mut [f64], xs: &[f64]) {
    for (a, &x) in acc.iter_mut().zip(xs) {
        *a = if a.is_nan() || x.is_nan() {
            f64::NAN
        } else {
            a.max(x)
        };
    }
}

pub fn lm_forward(params: &Params, batch: &[Vec<usize>]) -> Result<LmOutput> {
    lm_forward_with(params, batch, Kernel::Exact)
}

/// Forward pass with an explicit attention kernel. The streaming kernel is
/// what the inference benchmark uses.
pub fn lm_forward_with(params: &Params, batch: &[Vec<usize>], kernel: Kernel) -> Result<LmOutput> {
    let results = par::map_indexed(batch.len(), |i| {
        forward_seq(params, &batch[i], kernel, false)
    });
    let mut out = LmOutput {
        logits: Vec::with_capacity(batch.len()),
        max_abs_logit: vec![0.0; params.cfg.n_layers * params.cfg.heads],
    };
    for r in results {
        let f = r?;
        fold_max(&mut out.max_abs_logit, &f.max_abs_logit);
        out.logits.push(f.logits);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LossAndGrads {
    /// Mean next-token cross-entropy over every predicted position.
    pub loss: f64,
    pub grads: Params,
    pub max_abs_logit: Vec<f64>,
}

/// Mean next-token cross-entropy and its gradient for every parameter.
pub fn lm_loss_and_grads(params: &Params, batch: &[Vec<usize>]) -> Result<LossAndGrads> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(s) = batch.iter().find(|s| s.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "sequences need at least 2 tokens, got {}",
            s.len()
        )));
    }
    let count: usize = batch.iter().map(|s| s.len() - 1).sum();
    let weight = 1.0 / count as f64;
    let per_seq = par::map_indexed(batch.len(), |i| -> Result<(f64, Params, Vec<f64>)> {
        let tokens = &batch[i];
        let f = forward_seq(params, tokens, Kernel::Exact, true)?;
        let (loss_sum, dlogits) = next_token_ce(&f.logits, tokens, weight);
        let tape = f.tape.expect("tape requested");
        let g = backward_seq(params, tokens, &tape, &dlogits)?;
        Ok((loss_sum, g, f.max_abs_logit))
    });
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let mut max_abs_logit = vec![0.0; params.cfg.n_layers * params.cfg.heads];
    for r in per_seq {
        let (l, g, m) = r?;
        total += l;
        grads.accumulate(&g)?;
        fold_max(&mut max_abs_logit, &m);
    }
    Ok(LossAndGrads {
        loss: total * weight,
        grads,
        max_abs_logit,
    })
}

/// Mean next-token cross-entropy without gradients.
pub fn lm_loss(params: &Params, batch: &[Vec<usize>]) -> Result<f64> {
    let out = lm_forward(params, batch)?;
    let count: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if count == 0 {
        return Err(Error::InvalidArgument("no predicted positions".into()));
    }
    let total: f64 = out
        .logits
        .iter()
        .zip(batch)
        .map(|(l, s)| next_token_ce(l, s, 0.0).0)
        .sum();
    Ok(total / count as f64)
}

/// Current QK-normalization logit bound `g² / √d_k` per `(layer, head)`,
/// or `None` when the layout does not normalize.
pub fn qk_logit_bounds(params: &Params) -> Option<Vec<f64>> {
    if !params.cfg.layout().qk_norm {
        return None;
    }
    let scale = params.cfg.scale();
    Some(
        params
            .layers
            .iter()
            .flat_map(|l| l.attn.qk_gain.as_slice().iter().map(move |g| g * g / scale))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::config::{AttentionKind, ModelConfig};
    use crate::lm::params::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::randn(3, 5, 1.0, &mut rng);
        let g = Matrix::randn(1, 5, 1.0, &mut rng);
        let b = Matrix::randn(1, 5, 1.0, &mut rng);
        let dy = Matrix::randn(3, 5, 1.0, &mut rng);
        let f = |x: &Matrix| -> f64 {
            let (y, _) = layer_norm(x, &g, &b);
            y.as_slice()
                .iter()
                .zip(dy.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, c) = layer_norm(&x, &g, &b);
        let (dx, _, _) = layer_norm_backward(&c, &g, &dy);
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[idx] += 1e-6;
            let mut xm = x.clone();
            xm.as_mut_slice()[idx] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx.as_slice()[idx]).abs() < 1e-7);
        }
    }

    fn tiny(attention: AttentionKind) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d: 8,
            heads: 2,
            d_ffn: 16,
            vocab: 11,
            seq_len: 6,
            attention,
            init_std: 0.3,
            seed: 5,
        }
    }

    #[test]
    fn identical_sequences_give_identical_logits() {
        let p = init_params(&tiny(AttentionKind::Vanilla)).unwrap();
        let s = vec![1, 4, 2, 9, 0];
        let out = lm_forward(&p, &[s.clone(), s.clone(), s]).unwrap();
        assert_eq!(out.logits[0], out.logits[1]);
        assert_eq!(out.logits[1], out.logits[2]);
    }

    #[test]
    fn zero_init_gives_uniform_loss() {
        let cfg = ModelConfig {
            init_std: 0.0,
            ..ModelConfig::desk(AttentionKind::Vanilla)
        };
        let p = init_params(&cfg).unwrap();
        let batch = vec![(0..20).map(|i| (i * 37) % 256).collect::<Vec<_>>()];
        let r = lm_loss_and_grads(&p, &batch).unwrap();
        assert!((r.loss - (257f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn unused_positions_get_no_gradient() {
        let p = init_params(&tiny(AttentionKind::Vanilla)).unwrap();
        let r = lm_loss_and_grads(&p, &[vec![1, 2, 3], vec![4, 5, 6, 7]]).unwrap();
        // The last position of the longest sequence predicts nothing and
        // nothing earlier can see it.
        for t in 3..6 {
            assert!(r.grads.pos_emb.row(t).iter().all(|&v| v == 0.0));
        }
        assert!(r.grads.pos_emb.row(2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for kind in [
            AttentionKind::Vanilla,
            AttentionKind::QkNorm,
            AttentionKind::Ls(crate::attention::LsLayout::ls(1, 1, 2)),
        ] {
            let p = init_params(&tiny(kind)).unwrap();
            let base: Vec<usize> = (0..6).map(|_| rng.gen_range(0..11)).collect();
            let ref_logits = lm_forward(&p, std::slice::from_ref(&base))
                .unwrap()
                .logits
                .remove(0);
            for pos in 0..6 {
                let mut alt = base.clone();
                alt[pos] = (alt[pos] + 1 + rng.gen_range(0..10)) % 11;
                let l = lm_forward(&p, &[alt]).unwrap().logits.remove(0);
                for t in 0..pos {
                    assert_eq!(l.row(t), ref_logits.row(t), "{kind:?} pos {pos} t {t}");
                }
                assert_ne!(l.row(pos), ref_logits.row(pos));
            }
        }
    }

    #[test]
    fn bad_inputs() {
        let p = init_params(&tiny(AttentionKind::Vanilla)).unwrap();
        assert!(matches!(
            lm_forward(&p, &[vec![1, 11]]),
            Err(Error::TokenOutOfRange { token: 11, .. })
        ));
        assert!(matches!(
            lm_forward(&p, &[vec![1; 7]]),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(lm_loss_and_grads(&p, &[vec![3]]).is_err());
    }

    #[test]
    fn loss_helper_agrees_with_training_loss() {
        let p = init_params(&tiny(AttentionKind::QkNorm)).unwrap();
        let batch = vec![vec![1, 2, 3, 4], vec![9, 8, 7, 6, 5, 4]];
        let a = lm_loss(&p, &batch).unwrap();
        let b = lm_loss_and_grads(&p, &batch).unwrap().loss;
        assert!((a - b).abs() < 1e-14);
    }
}
