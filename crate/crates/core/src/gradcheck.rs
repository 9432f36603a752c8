//! Central finite-difference checks for every analytic backward pass.
//!
//! Errors are normwise over the whole gradient of one case:
//! `max|a - n| / max(max|a|, max|n|, FLOOR)`, maxima taken over every entry of
//! every tensor. A tensor whose true gradient is zero (a query projection of
//! width 1 under QK-normalization, say) is then judged against the scale of
//! the gradient as a whole instead of its own roundoff.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend, attend_backward, build_mask, mhsa_backward, mhsa_forward, LsLayout, MaskSpec,
    MultiHeadWeights,
};
use crate::error::Result;
use crate::lm::{init_params, lm_loss, lm_loss_and_grads, AttentionKind, ModelConfig, Params};
use crate::matrix::Matrix;
use crate::par;
use crate::synth::{gen_banded_target, synth_loss_and_grads, BandedTargetSpec};

pub const FD_STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub suite: String,
    pub cases: usize,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `∂f/∂x` by central differences with step [`FD_STEP`].
pub fn central_difference(x: &Matrix, mut f: impl FnMut(&Matrix) -> Result<f64>) -> Result<Matrix> {
    let mut xp = x.clone();
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = xp.as_slice()[i];
        xp.as_mut_slice()[i] = orig + FD_STEP;
        let up = f(&xp)?;
        xp.as_mut_slice()[i] = orig - FD_STEP;
        let down = f(&xp)?;
        xp.as_mut_slice()[i] = orig;
        g.as_mut_slice()[i] = (up - down) / (2.0 * FD_STEP);
    }
    Ok(g)
}

pub fn rel_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    rel_error_all(&[(analytic, numeric)])
}

/// Normwise relative error over several `(analytic, numeric)` pairs.
pub fn rel_error_all(pairs: &[(&Matrix, &Matrix)]) -> f64 {
    let mut scale = FLOOR;
    let mut worst = 0.0f64;
    for (a, n) in pairs {
        if a.shape() != n.shape() {
            return f64::INFINITY;
        }
        for (x, y) in a.as_slice().iter().zip(n.as_slice()) {
            let d = (x - y).abs();
            if d.is_nan() {
                return f64::NAN;
            }
            worst = worst.max(d);
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    worst / scale
}

fn weighted_sum(y: &Matrix, r: &Matrix) -> f64 {
    y.as_slice()
        .iter()
        .zip(r.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> MaskSpec {
    match rng.gen_range(0..4) {
        0 => MaskSpec::Full,
        1 => MaskSpec::GlobalCausal,
        2 => MaskSpec::LocalCausal {
            span: rng.gen_range(0..n),
        },
        _ => MaskSpec::TwoSidedLocal {
            left: rng.gen_range(0..3),
            right: rng.gen_range(0..3),
        },
    }
}

fn fold(reports: Vec<Result<f64>>, suite: &str) -> Result<GradcheckReport> {
    let mut max_rel_error = 0.0f64;
    let cases = reports.len();
    for r in reports {
        let e = r?;
        max_rel_error = if e.is_nan() {
            f64::NAN
        } else {
            max_rel_error.max(e)
        };
    }
    Ok(GradcheckReport {
        suite: suite.to_string(),
        cases,
        max_rel_error,
    })
}

/// Single-head attention: `L = Σ Y ⊙ R` for a random cotangent `R`.
pub fn check_attend(seeds: Range<u64>) -> Result<GradcheckReport> {
    let seeds: Vec<u64> = seeds.collect();
    let errs = par::map_indexed(seeds.len(), |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let n = rng.gen_range(2..=8);
        let (dk, dv) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let scale = rng.gen_range(0.5..3.0);
        let mask = build_mask(&random_mask(&mut rng, n), n);
        let q = Matrix::randn(n, dk, 1.0, &mut rng);
        let k = Matrix::randn(n, dk, 1.0, &mut rng);
        let v = Matrix::randn(n, dv, 1.0, &mut rng);
        let r = Matrix::randn(n, dv, 1.0, &mut rng);
        let (_, trace) = attend(&q, &k, &v, &mask, scale)?;
        let (dq, dk_, dv_) = attend_backward(&q, &k, &v, &mask, scale, &trace, &r)?;
        let nq = central_difference(&q, |x| {
            Ok(weighted_sum(&attend(x, &k, &v, &mask, scale)?.0, &r))
        })?;
        let nk = central_difference(&k, |x| {
            Ok(weighted_sum(&attend(&q, x, &v, &mask, scale)?.0, &r))
        })?;
        let nv = central_difference(&v, |x| {
            Ok(weighted_sum(&attend(&q, &k, x, &mask, scale)?.0, &r))
        })?;
        Ok(rel_error_all(&[(&dq, &nq), (&dk_, &nk), (&dv_, &nv)]))
    });
    fold(errs, "attend_backward")
}

/// Multi-head layer with a random LS layout, optionally QK-normalized.
pub fn check_mhsa(seeds: Range<u64>) -> Result<GradcheckReport> {
    let seeds: Vec<u64> = seeds.collect();
    let errs = par::map_indexed(seeds.len(), |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let n = rng.gen_range(2..=8);
        let h = rng.gen_range(1..=3);
        let n_local = rng.gen_range(0..=h);
        let layout =
            LsLayout::ls(n_local, h - n_local, rng.gen_range(1..4)).with_qk_norm(rng.gen_bool(0.5));
        let (d, dk, dv) = (
            rng.gen_range(2..=6),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let scale = (dk as f64).sqrt();
        let x = Matrix::randn(n, d, 1.0, &mut rng);
        let mut w = MultiHeadWeights::random(d, h, dk, dv, 0.7, &mut rng);
        for g in w.qk_gain.as_mut_slice() {
            *g = rng.gen_range(0.5..2.0);
        }
        let r = Matrix::randn(n, d, 1.0, &mut rng);
        let (_, traces) = mhsa_forward(&x, &w, &layout, scale)?;
        let (dx, dw) = mhsa_backward(&x, &w, &layout, scale, &traces, &r)?;
        let loss = |x: &Matrix, w: &MultiHeadWeights| -> Result<f64> {
            Ok(weighted_sum(&mhsa_forward(x, w, &layout, scale)?.0, &r))
        };
        let mut numeric = vec![central_difference(&x, |xp| loss(xp, &w))?];
        let count = w.tensors().len();
        // The gain row is unused without QK-normalization.
        let used = if layout.qk_norm { count } else { count - 1 };
        for t in 0..used {
            let base = w.tensors()[t].clone();
            numeric.push(central_difference(&base, |m| {
                let mut wp = w.clone();
                *wp.tensors_mut()[t] = m.clone();
                loss(&x, &wp)
            })?);
        }
        let mut analytic = vec![&dx];
        analytic.extend(dw.tensors().into_iter().take(used));
        let pairs: Vec<(&Matrix, &Matrix)> = analytic.into_iter().zip(&numeric).collect();
        Ok(rel_error_all(&pairs))
    });
    fold(errs, "mhsa_backward")
}

/// Banded-target squared error with a random mask family.
pub fn check_synth(seeds: Range<u64>) -> Result<GradcheckReport> {
    let seeds: Vec<u64> = seeds.collect();
    let errs = par::map_indexed(seeds.len(), |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let n = rng.gen_range(3..=8);
        let dk = rng.gen_range(1..=4);
        let target = gen_banded_target(&BandedTargetSpec {
            n,
            band: rng.gen_range(1..n),
            bernoulli_p: 0.5,
            seed: seeds[i],
        })?;
        let mask = build_mask(&random_mask(&mut rng, n), n);
        let q = Matrix::randn(n, dk, 1.0, &mut rng);
        let k = Matrix::randn(n, dk, 1.0, &mut rng);
        let (_, dq, dk_) = synth_loss_and_grads(&q, &k, &mask, &target)?;
        let nq = central_difference(&q, |x| Ok(synth_loss_and_grads(x, &k, &mask, &target)?.0))?;
        let nk = central_difference(&k, |x| Ok(synth_loss_and_grads(&q, x, &mask, &target)?.0))?;
        Ok(rel_error_all(&[(&dq, &nq), (&dk_, &nk)]))
    });
    fold(errs, "synth_loss_and_grads")
}

/// Tiny model `L=1, d=8, H=2, n=6, vocab=11` for the given attention kind.
pub fn tiny_lm_config(attention: AttentionKind, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d: 8,
        heads: 2,
        d_ffn: 12,
        vocab: 11,
        seq_len: 6,
        attention,
        init_std: 0.5,
        seed,
    }
}

fn perturbed_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Params> {
    let mut p = init_params(cfg)?;
    for t in p.named_mut() {
        for v in t.tensor.as_mut_slice() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    Ok(p)
}

/// Every trainable tensor of the tiny language model.
pub fn check_lm(attention: AttentionKind, seeds: Range<u64>) -> Result<GradcheckReport> {
    let seeds: Vec<u64> = seeds.collect();
    let errs = par::map_indexed(seeds.len(), |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let cfg = tiny_lm_config(attention, seeds[i]);
        let params = perturbed_params(&cfg, &mut rng)?;
        let batch: Vec<Vec<usize>> = [cfg.seq_len, rng.gen_range(2..=cfg.seq_len)]
            .iter()
            .map(|&len| (0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect())
            .collect();
        // Inner loops stay sequential; seeds already run in parallel.
        par::sequential(|| {
            let analytic = lm_loss_and_grads(&params, &batch)?;
            let grads = analytic.grads.tensors();
            let mut numeric = Vec::with_capacity(grads.len());
            for t in 0..grads.len() {
                let base = params.named()[t].tensor.clone();
                let mut work = params.clone();
                numeric.push(central_difference(&base, |m| {
                    *work.named_mut()[t].tensor = m.clone();
                    lm_loss(&work, &batch)
                })?);
            }
            let pairs: Vec<(&Matrix, &Matrix)> = grads.into_iter().zip(&numeric).collect();
            Ok(rel_error_all(&pairs))
        })
    });
    let name = match attention {
        AttentionKind::Vanilla => "lm_loss_and_grads[vanilla]",
        AttentionKind::Ls(_) => "lm_loss_and_grads[ls]",
        AttentionKind::QkNorm => "lm_loss_and_grads[qk_norm]",
    };
    fold(errs, name)
}

/// The LS arm of the tiny model: one local head of span 2, one global head.
pub fn tiny_ls() -> AttentionKind {
    AttentionKind::Ls(LsLayout::ls(1, 1, 2))
}

/// Every suite over `seeds`.
pub fn run_all(seeds: Range<u64>) -> Result<Vec<GradcheckReport>> {
    Ok(vec![
        check_attend(seeds.clone())?,
        check_mhsa(seeds.clone())?,
        check_synth(seeds.clone())?,
        check_lm(AttentionKind::Vanilla, seeds.clone())?,
        check_lm(tiny_ls(), seeds.clone())?,
        check_lm(AttentionKind::QkNorm, seeds)?,
    ])
}
