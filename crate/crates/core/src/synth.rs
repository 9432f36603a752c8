//! Fitting a banded row-stochastic target with free queries and keys.
//!
//! The target has support `0 < i - j <= band` (strictly below the diagonal),
//! values are Bernoulli draws normalized per row. With `V = I` the attention
//! output equals the attention matrix itself, so the task is to make
//! `softmax(QKᵀ + M)` match the target under either a global or a local mask.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::kernel::softmax_backward;
use crate::attention::mask::{build_mask, MaskSpec};
use crate::error::{shape, Error, Result};
use crate::matrix::{
    masked_softmax_rows, matmul, matmul_nt, matmul_tn, max_abs_entries, AdditiveMask, Matrix,
};
use crate::optim::{adamw_step, clip_global_norm, lr_at, AdamState, AdamwConfig, ScheduleConfig};
use crate::par;

pub const CURVE_CSV_HEADER: &str = "step,loss,max_abs_logit_all,max_abs_logit_unmasked";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandedTargetSpec {
    pub n: usize,
    pub band: usize,
    pub bernoulli_p: f64,
    pub seed: u64,
}

impl BandedTargetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.band && self.band < self.n) {
            return Err(Error::InvalidArgument(format!(
                "band {} must satisfy 1 <= band < n = {}",
                self.band, self.n
            )));
        }
        if !(self.bernoulli_p > 0.0 && self.bernoulli_p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bernoulli_p {} must be in (0, 1]",
                self.bernoulli_p
            )));
        }
        Ok(())
    }
}

/// Builds the banded target. Row 0 has an empty band and gets `P[0,0] = 1`;
/// a row whose band draws are all zero is redrawn until one cell is set.
pub fn gen_banded_target(spec: &BandedTargetSpec) -> Result<Matrix> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut p = Matrix::zeros(n, n);
    p.set(0, 0, 1.0);
    let mut draws = Vec::with_capacity(spec.band);
    for i in 1..n {
        let lo = i.saturating_sub(spec.band);
        loop {
            draws.clear();
            draws.extend((lo..i).map(|_| rng.gen_bool(spec.bernoulli_p)));
            if draws.iter().any(|&b| b) {
                break;
            }
        }
        let count = draws.iter().filter(|&&b| b).count() as f64;
        let row = p.row_mut(i);
        for (j, &on) in (lo..i).zip(&draws) {
            if on {
                row[j] = 1.0 / count;
            }
        }
    }
    Ok(p)
}

/// Result of evaluating the fit at one point.
#[derive(Clone, Debug)]
pub struct SynthEval {
    pub loss: f64,
    pub dq: Matrix,
    pub dk: Matrix,
    /// `max |QKᵀ|` over every entry.
    pub max_abs_logit_all: f64,
    /// `max |QKᵀ|` over entries the mask allows.
    pub max_abs_logit_unmasked: f64,
}

/// Mean squared error between `softmax(QKᵀ + M)` and the target over all
/// `n²` entries, with gradients for `Q` and `K`. The logit scale is 1.
pub fn synth_loss_and_grads(
    q: &Matrix,
    k: &Matrix,
    mask: &AdditiveMask,
    target: &Matrix,
) -> Result<(f64, Matrix, Matrix)> {
    let e = synth_eval(q, k, mask, target)?;
    Ok((e.loss, e.dq, e.dk))
}

pub fn synth_eval(
    q: &Matrix,
    k: &Matrix,
    mask: &AdditiveMask,
    target: &Matrix,
) -> Result<SynthEval> {
    let n = q.rows();
    if q.shape() != k.shape() || target.shape() != (n, n) || mask.shape() != (n, n) {
        return Err(shape(
            "synth_loss_and_grads",
            format!(
                "Q {:?}, K {:?}, mask {:?}, target {:?}",
                q.shape(),
                k.shape(),
                mask.shape(),
                target.shape()
            ),
        ));
    }
    let s = matmul_nt(q, k)?;
    let p = masked_softmax_rows(&s, mask, 1.0)?;
    let inv = 1.0 / (n * n) as f64;
    let mut loss = 0.0;
    // dL/dP; with V = I this is also dL/dY.
    let mut dp = Matrix::zeros(n, n);
    for ((g, &pv), &tv) in dp
        .as_mut_slice()
        .iter_mut()
        .zip(p.as_slice())
        .zip(target.as_slice())
    {
        let r = pv - tv;
        loss += r * r;
        *g = 2.0 * r * inv;
    }
    loss *= inv;
    let ds = softmax_backward(&p, &dp, mask);
    Ok(SynthEval {
        loss,
        dq: matmul(&ds, k)?,
        dk: matmul_tn(&ds, q)?,
        max_abs_logit_all: max_abs_entries(&s, None),
        max_abs_logit_unmasked: max_abs_entries(&s, Some(mask)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SynthOptimizer {
    /// Adam/AdamW at a constant learning rate.
    Fixed { adam: AdamwConfig, lr: f64 },
    /// AdamW following the warmup + cosine schedule.
    Scheduled {
        adam: AdamwConfig,
        schedule: ScheduleConfig,
    },
}

impl Default for SynthOptimizer {
    fn default() -> Self {
        SynthOptimizer::Fixed {
            adam: AdamwConfig::adam(),
            lr: 1e-3,
        }
    }
}

impl SynthOptimizer {
    fn adam(&self) -> &AdamwConfig {
        match self {
            SynthOptimizer::Fixed { adam, .. } | SynthOptimizer::Scheduled { adam, .. } => adam,
        }
    }

    fn lr(&self, step: u64) -> f64 {
        match self {
            SynthOptimizer::Fixed { lr, .. } => *lr,
            SynthOptimizer::Scheduled { schedule, .. } => lr_at(step, schedule),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthRunConfig {
    pub target: BandedTargetSpec,
    pub d_k: usize,
    pub mask: MaskSpec,
    pub steps: u64,
    pub optimizer: SynthOptimizer,
    pub log_every: u64,
    pub init_std: f64,
    /// Seed for the Q, K initialization (the target has its own).
    pub seed: u64,
}

impl SynthRunConfig {
    /// Small defaults: n=256, band=8, d_k=8, global mask, Adam at 1e-3.
    pub fn desk(mask: MaskSpec, data_seed: u64, init_seed: u64) -> Self {
        Self {
            target: BandedTargetSpec {
                n: 256,
                band: 8,
                bernoulli_p: 0.5,
                seed: data_seed,
            },
            d_k: 8,
            mask,
            steps: 10_000,
            optimizer: SynthOptimizer::default(),
            log_every: 100,
            init_std: 0.1,
            seed: init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        if self.d_k == 0 {
            return Err(Error::InvalidArgument("d_k must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument(
                "log_every must be at least 1".into(),
            ));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "init_std {}",
                self.init_std
            )));
        }
        self.optimizer.adam().validate()?;
        if let SynthOptimizer::Scheduled { schedule, .. } = &self.optimizer {
            schedule.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRecord {
    pub step: u64,
    pub loss: f64,
    pub max_abs_logit_all: f64,
    pub max_abs_logit_unmasked: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// The loss became non-finite at this step; the last curve record
    /// carries the offending values.
    NonFinite {
        step: u64,
    },
}

#[derive(Clone, Debug)]
pub struct SynthRun {
    pub curve: Vec<CurveRecord>,
    pub q: Matrix,
    pub k: Matrix,
    pub status: RunStatus,
}

impl SynthRun {
    pub fn final_record(&self) -> Option<&CurveRecord> {
        self.curve.last()
    }

    pub fn peak_logit_all(&self) -> f64 {
        self.curve
            .iter()
            .map(|r| r.max_abs_logit_all)
            .fold(0.0, f64::max)
    }

    pub fn checkpoint_tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("q".to_string(), &self.q), ("k".to_string(), &self.k)]
    }
}

/// Trains Q and K with Adam and logs loss and logit magnitudes every
/// `log_every` steps, plus once after the final update.
pub fn run_synth(cfg: &SynthRunConfig) -> Result<SynthRun> {
    cfg.validate()?;
    let n = cfg.target.n;
    let target = gen_banded_target(&cfg.target)?;
    let mask = build_mask(&cfg.mask, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut q = Matrix::randn(n, cfg.d_k, cfg.init_std, &mut rng);
    let mut k = Matrix::randn(n, cfg.d_k, cfg.init_std, &mut rng);
    let mut state = AdamState::new([&q, &k]);
    let adam = *cfg.optimizer.adam();
    let mut curve = Vec::new();

    let record = |step: u64, e: &SynthEval| CurveRecord {
        step,
        loss: e.loss,
        max_abs_logit_all: e.max_abs_logit_all,
        max_abs_logit_unmasked: e.max_abs_logit_unmasked,
    };

    for step in 0..cfg.steps {
        let mut e = synth_eval(&q, &k, &mask, &target)?;
        if !e.loss.is_finite() {
            curve.push(record(step, &e));
            return Ok(SynthRun {
                curve,
                q,
                k,
                status: RunStatus::NonFinite { step },
            });
        }
        if step % cfg.log_every == 0 {
            curve.push(record(step, &e));
        }
        if adam.clip_norm.is_finite() {
            clip_global_norm(&mut [&mut e.dq, &mut e.dk], adam.clip_norm);
        }
        adamw_step(
            &mut [&mut q, &mut k],
            &[&e.dq, &e.dk],
            &mut state,
            &adam,
            cfg.optimizer.lr(step),
        )?;
    }
    let mut status = RunStatus::Completed;
    if cfg.steps > 0 {
        let e = synth_eval(&q, &k, &mask, &target)?;
        if !e.loss.is_finite() {
            status = RunStatus::NonFinite { step: cfg.steps };
        }
        curve.push(record(cfg.steps, &e));
    }
    Ok(SynthRun {
        curve,
        q,
        k,
        status,
    })
}

/// Independent runs, possibly in parallel; results keep the input order.
pub fn run_synth_many(cfgs: &[SynthRunConfig]) -> Vec<Result<SynthRun>> {
    par::map_indexed(cfgs.len(), |i| run_synth(&cfgs[i]))
}

pub fn write_curve_csv<W: Write>(mut w: W, curve: &[CurveRecord]) -> Result<()> {
    writeln!(w, "{CURVE_CSV_HEADER}")?;
    for r in curve {
        writeln!(
            w,
            "{},{},{},{}",
            r.step, r.loss, r.max_abs_logit_all, r.max_abs_logit_unmasked
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::kernel::{attend, attend_backward};

    #[test]
    fn target_rows_are_stochastic_and_banded() {
        let spec = BandedTargetSpec {
            n: 60,
            band: 5,
            bernoulli_p: 0.5,
            seed: 3,
        };
        let p = gen_banded_target(&spec).unwrap();
        assert_eq!(p.get(0, 0), 1.0);
        assert_eq!(p.row(0).iter().filter(|&&x| x != 0.0).count(), 1);
        for i in 1..60 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let nz = p.row(i).iter().filter(|&&x| x != 0.0).count();
            assert!((1..=5).contains(&nz));
            for j in 0..60 {
                if p.get(i, j) != 0.0 {
                    assert!(j < i && i - j <= 5);
                }
            }
        }
    }

    #[test]
    fn target_is_seed_stable() {
        let spec = BandedTargetSpec {
            n: 40,
            band: 3,
            bernoulli_p: 0.3,
            seed: 11,
        };
        assert_eq!(
            gen_banded_target(&spec).unwrap(),
            gen_banded_target(&spec).unwrap()
        );
        let other = BandedTargetSpec { seed: 12, ..spec };
        assert_ne!(
            gen_banded_target(&spec).unwrap(),
            gen_banded_target(&other).unwrap()
        );
    }

    #[test]
    fn full_size_band_occupancy_is_binomial() {
        let spec = BandedTargetSpec {
            n: 2500,
            band: 50,
            bernoulli_p: 0.5,
            seed: 7,
        };
        let p = gen_banded_target(&spec).unwrap();
        let counts: Vec<f64> = (50..2500)
            .map(|i| p.row(i).iter().filter(|&&x| x != 0.0).count() as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        // Binomial(50, 0.5): sd 3.54 per row, so the mean of 2450 rows has sd ~0.0714.
        let sigma = (50.0 * 0.25f64).sqrt() / (counts.len() as f64).sqrt();
        assert!((mean - 25.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn invalid_specs() {
        let bad_band = BandedTargetSpec {
            n: 5,
            band: 5,
            bernoulli_p: 0.5,
            seed: 0,
        };
        assert!(gen_banded_target(&bad_band).is_err());
        let bad_p = BandedTargetSpec {
            band: 2,
            bernoulli_p: 0.0,
            ..bad_band
        };
        assert!(gen_banded_target(&bad_p).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Matrix::randn(7, 3, 1.0, &mut rng);
        let k = Matrix::randn(7, 3, 1.0, &mut rng);
        let mask = build_mask(&MaskSpec::GlobalCausal, 7);
        let target = masked_softmax_rows(&matmul_nt(&q, &k).unwrap(), &mask, 1.0).unwrap();
        let (loss, dq, dk) = synth_loss_and_grads(&q, &k, &mask, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dq.as_slice().iter().chain(dk.as_slice()).all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_agree_with_attention_backward_on_identity_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 6;
        let q = Matrix::randn(n, 2, 1.0, &mut rng);
        let k = Matrix::randn(n, 2, 1.0, &mut rng);
        let mask = build_mask(&MaskSpec::LocalCausal { span: 2 }, n);
        let target = gen_banded_target(&BandedTargetSpec {
            n,
            band: 2,
            bernoulli_p: 0.5,
            seed: 4,
        })
        .unwrap();
        let (loss, dq, dk) = synth_loss_and_grads(&q, &k, &mask, &target).unwrap();

        let v = Matrix::identity(n);
        let (y, trace) = attend(&q, &k, &v, &mask, 1.0).unwrap();
        let diff = y.sub(&target).unwrap();
        assert!((diff.sum_of_squares() / (n * n) as f64 - loss).abs() < 1e-15);
        let dy = diff.scale(2.0 / (n * n) as f64);
        let (dq2, dk2, _) = attend_backward(&q, &k, &v, &mask, 1.0, &trace, &dy).unwrap();
        assert!(dq.max_abs_diff(&dq2) < 1e-15);
        assert!(dk.max_abs_diff(&dk2) < 1e-15);
    }

    #[test]
    fn doubling_q_and_k_changes_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Matrix::randn(6, 2, 1.0, &mut rng);
        let k = Matrix::randn(6, 2, 1.0, &mut rng);
        let mask = build_mask(&MaskSpec::GlobalCausal, 6);
        let target = gen_banded_target(&BandedTargetSpec {
            n: 6,
            band: 2,
            bernoulli_p: 0.5,
            seed: 1,
        })
        .unwrap();
        let (l1, _, _) = synth_loss_and_grads(&q, &k, &mask, &target).unwrap();
        let (l2, _, _) =
            synth_loss_and_grads(&q.scale(2.0), &k.scale(2.0), &mask, &target).unwrap();
        assert_ne!(l1, l2);
    }

    fn tiny(mask: MaskSpec, steps: u64) -> SynthRunConfig {
        SynthRunConfig {
            target: BandedTargetSpec {
                n: 24,
                band: 3,
                bernoulli_p: 0.5,
                seed: 9,
            },
            d_k: 4,
            mask,
            steps,
            optimizer: SynthOptimizer::Fixed {
                adam: AdamwConfig::adam(),
                lr: 1e-2,
            },
            log_every: 10,
            init_std: 0.1,
            seed: 1,
        }
    }

    #[test]
    fn zero_steps_gives_empty_curve() {
        let run = run_synth(&tiny(MaskSpec::GlobalCausal, 0)).unwrap();
        assert!(run.curve.is_empty());
        assert_eq!(run.q.shape(), (24, 4));
        assert_eq!(run.status, RunStatus::Completed);
    }

    #[test]
    fn runs_are_deterministic_and_learn() {
        let cfg = tiny(MaskSpec::LocalCausal { span: 3 }, 200);
        let a = run_synth(&cfg).unwrap();
        let b = run_synth(&cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.q, b.q);
        let steps: Vec<u64> = a.curve.iter().map(|r| r.step).collect();
        assert_eq!(steps.first(), Some(&0));
        assert_eq!(steps.last(), Some(&200));
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        assert!(a.curve.last().unwrap().loss < a.curve[0].loss);
        for r in &a.curve {
            assert!(r.loss >= 0.0 && r.max_abs_logit_all >= 0.0);
            assert!(r.max_abs_logit_unmasked <= r.max_abs_logit_all);
        }
    }

    #[test]
    fn local_fit_puts_no_mass_outside_the_window() {
        let cfg = tiny(MaskSpec::LocalCausal { span: 3 }, 50);
        let run = run_synth(&cfg).unwrap();
        let mask = build_mask(&cfg.mask, 24);
        let p = masked_softmax_rows(&matmul_nt(&run.q, &run.k).unwrap(), &mask, 1.0).unwrap();
        for i in 0..24 {
            for j in 0..24 {
                if !(j <= i && i - j <= 3) {
                    assert_eq!(p.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn parallel_batch_matches_individual_runs() {
        let cfgs = [
            tiny(MaskSpec::GlobalCausal, 30),
            tiny(MaskSpec::LocalCausal { span: 3 }, 30),
        ];
        let many = run_synth_many(&cfgs);
        for (cfg, r) in cfgs.iter().zip(many) {
            assert_eq!(r.unwrap().curve, run_synth(cfg).unwrap().curve);
        }
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        write_curve_csv(
            &mut out,
            &[CurveRecord {
                step: 0,
                loss: 0.5,
                max_abs_logit_all: 2.0,
                max_abs_logit_unmasked: 1.25,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "step,loss,max_abs_logit_all,max_abs_logit_unmasked\n0,0.5,2,1.25\n"
        );
    }
}
