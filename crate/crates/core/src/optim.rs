//! AdamW with decoupled weight decay, cosine learning-rate schedule with
//! linear warmup, and global-norm gradient clipping.

use std::f64::consts::PI;

use crate::error::{shape, Error, Result};
use crate::matrix::{global_l2_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamwConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl AdamwConfig {
    /// Plain Adam: standard betas, no decay, no clipping threshold in effect.
    pub fn adam() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid AdamW config {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr_max: 6e-4,
            lr_min: 6e-5,
            warmup_steps: 2000,
            decay_steps: 600_000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lr_min && self.lr_min <= self.lr_max)
            || self.warmup_steps >= self.decay_steps
        {
            return Err(Error::InvalidArgument(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `lr_max` over the warmup, cosine down to `lr_min`
/// at `decay_steps`, then flat.
pub fn lr_at(step: u64, sched: &ScheduleConfig) -> f64 {
    if step < sched.warmup_steps {
        return sched.lr_max * step as f64 / sched.warmup_steps as f64;
    }
    if step >= sched.decay_steps {
        return sched.lr_min;
    }
    let progress =
        (step - sched.warmup_steps) as f64 / (sched.decay_steps - sched.warmup_steps) as f64;
    let cosine = 0.5 * (1.0 + (PI * progress).cos());
    sched.lr_min + (sched.lr_max - sched.lr_min) * cosine
}

/// Rescales `grads` in place so their joint norm is at most `clip_norm`.
/// Returns the norm observed before clipping.
pub fn clip_global_norm(grads: &mut [&mut Matrix], clip_norm: f64) -> f64 {
    let norm = global_l2_norm(grads.iter().map(|g| &**g));
    if norm > clip_norm {
        let f = clip_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(f);
        }
    }
    norm
}

/// First and second moments for a list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let m: Vec<Matrix> = params
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One AdamW update. Clipping is the caller's job.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut AdamState,
    cfg: &AdamwConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(shape(
                "adamw_step",
                format!("parameter {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, theta) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_values() {
        let s = ScheduleConfig::default();
        assert_eq!(lr_at(2000, &s), 6e-4);
        assert_eq!(lr_at(600_000, &s), 6e-5);
        assert_eq!(lr_at(900_000, &s), 6e-5);
        assert!((lr_at(1000, &s) - 3e-4).abs() < 1e-18);
        assert_eq!(lr_at(0, &s), 0.0);
    }

    #[test]
    fn schedule_is_continuous_and_monotone_after_warmup() {
        let s = ScheduleConfig {
            lr_max: 1.0,
            lr_min: 0.1,
            warmup_steps: 10,
            decay_steps: 110,
        };
        assert!((lr_at(9, &s) - 0.9).abs() < 1e-12);
        assert_eq!(lr_at(10, &s), 1.0);
        assert!((lr_at(60, &s) - 0.55).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for step in 10..=120 {
            let lr = lr_at(step, &s);
            assert!(lr <= prev);
            prev = lr;
        }
        // Just past the boundary the cosine starts from lr_max.
        assert!((lr_at(11, &s) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_examples() {
        let mut g = Matrix::from_rows(&[[0.3], [0.4]]);
        let before = g.clone();
        assert_eq!(clip_global_norm(&mut [&mut g], 1.0), 0.5);
        assert_eq!(g, before);

        let mut g = Matrix::from_rows(&[[3.0], [4.0]]);
        assert_eq!(clip_global_norm(&mut [&mut g], 1.0), 5.0);
        assert!((g.get(0, 0) - 0.6).abs() < 1e-15 && (g.get(1, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clipped_norm_is_min_of_norm_and_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..50 {
            let mut a = Matrix::randn(3, 4, 1.0, &mut rng);
            let mut b = Matrix::randn(2, 2, 1.0, &mut rng);
            let clip = 0.5 + trial as f64 * 0.1;
            let norm = clip_global_norm(&mut [&mut a, &mut b], clip);
            let after = global_l2_norm([&a, &b]);
            assert!((after - norm.min(clip)).abs() < 1e-12);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Matrix::zeros(1, 1);
        let g = Matrix::filled(1, 1, 1.0);
        let mut st = AdamState::new([&p]);
        let cfg = AdamwConfig::default();
        adamw_step(&mut [&mut p], &[&g], &mut st, &cfg, 1e-3).unwrap();
        assert!((p.get(0, 0) + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = Matrix::from_rows(&[[1.5, -2.0]]);
        let g = Matrix::zeros(1, 2);
        let mut st = AdamState::new([&p]);
        let cfg = AdamwConfig {
            weight_decay: 0.0,
            ..AdamwConfig::default()
        };
        for _ in 0..10 {
            adamw_step(&mut [&mut p], &[&g], &mut st, &cfg, 0.1).unwrap();
        }
        assert_eq!(p, Matrix::from_rows(&[[1.5, -2.0]]));
    }

    #[test]
    fn pure_decay() {
        let mut p = Matrix::from_rows(&[[2.0]]);
        let g = Matrix::zeros(1, 1);
        let mut st = AdamState::new([&p]);
        let cfg = AdamwConfig {
            weight_decay: 0.1,
            ..AdamwConfig::default()
        };
        adamw_step(&mut [&mut p], &[&g], &mut st, &cfg, 0.01).unwrap();
        assert!((p.get(0, 0) - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_adam_on_a_scalar_problem() {
        // Minimize (x - 3)^2 with an independently written Adam loop.
        let cfg = AdamwConfig {
            weight_decay: 0.0,
            ..AdamwConfig::default()
        };
        let lr = 0.05;
        let mut p = Matrix::filled(1, 1, -1.0);
        let mut st = AdamState::new([&p]);
        let (mut x, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = Matrix::filled(1, 1, 2.0 * (p.get(0, 0) - 3.0));
            adamw_step(&mut [&mut p], &[&g], &mut st, &cfg, lr).unwrap();

            let gr = 2.0 * (x - 3.0);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * gr;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * gr * gr;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            x -= lr * mh / (vh.sqrt() + cfg.eps);
            assert!((p.get(0, 0) - x).abs() <= 1e-14, "step {t}");
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(1, 2);
        let mut st = AdamState::new([&p]);
        assert!(adamw_step(&mut [&mut p], &[&g], &mut st, &AdamwConfig::default(), 0.1).is_err());
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p0 = Matrix::randn(3, 3, 1.0, &mut rng);
        let g = Matrix::randn(3, 3, 1.0, &mut rng);
        let run = || {
            let mut p = p0.clone();
            let mut st = AdamState::new([&p]);
            for _ in 0..5 {
                adamw_step(&mut [&mut p], &[&g], &mut st, &AdamwConfig::default(), 1e-2).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }
}
