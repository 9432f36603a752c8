use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::config::ModelConfig;
use crate::lm::corpus::ByteCorpus;
use crate::lm::divergence::{detect_divergence, DEFAULT_RATIO, DEFAULT_WINDOW};
use crate::lm::model::{lm_loss, lm_loss_and_grads, qk_logit_bounds};
use crate::lm::params::{init_params, Params};
use crate::matrix::Matrix;
use crate::optim::{adamw_step, clip_global_norm, lr_at, AdamState, AdamwConfig, ScheduleConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Held fixed; sequences per batch is `max(1, tokens_per_batch / seq_len)`.
    pub tokens_per_batch: usize,
    pub adam: AdamwConfig,
    pub schedule: ScheduleConfig,
    /// Validation every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_sequences: usize,
    pub divergence_window: usize,
    pub divergence_ratio: f64,
    /// Seeds the batch sampler.
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            tokens_per_batch: 256,
            adam: AdamwConfig::default(),
            schedule: ScheduleConfig {
                warmup_steps: 200,
                decay_steps: 2000,
                ..ScheduleConfig::default()
            },
            eval_every: 250,
            eval_sequences: 8,
            divergence_window: DEFAULT_WINDOW,
            divergence_ratio: DEFAULT_RATIO,
            data_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.schedule.validate()?;
        if self.tokens_per_batch == 0 {
            return Err(Error::InvalidArgument(
                "tokens_per_batch must be positive".into(),
            ));
        }
        if self.divergence_window == 0
            || self.divergence_ratio.is_nan()
            || self.divergence_ratio <= 1.0
        {
            return Err(Error::InvalidArgument(
                "divergence window must be >= 1 and ratio > 1".into(),
            ));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct TelemetryRecord {
    pub step: u64,
    pub train_loss: f64,
    pub lr: f64,
    pub grad_norm_preclip: f64,
    /// `layer * H + head`.
    pub max_abs_logit: Vec<f64>,
    /// QK-normalization bound `g²/√d_k` for the weights this step ran with;
    /// empty when QK-normalization is off.
    pub logit_bound: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRecord {
    pub step: u64,
    /// Mean next-token cross-entropy (log-perplexity) on the validation split.
    pub log_perplexity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// Loss went non-finite at this step; the run stopped there.
    NonFinite {
        step: u64,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub telemetry: Vec<TelemetryRecord>,
    pub validation: Vec<ValidationRecord>,
    pub params: Params,
    pub status: TrainStatus,
    /// Steps flagged by the windowed divergence detector.
    pub divergence_flags: Vec<u64>,
}

impl TrainOutcome {
    /// Mean training loss over the last `k` records.
    pub fn smoothed_final_loss(&self, k: usize) -> f64 {
        let tail = &self.telemetry[self.telemetry.len().saturating_sub(k)..];
        tail.iter().map(|r| r.train_loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Seeded sampler of contiguous windows from the training split.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    seq_len: usize,
    per_batch: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, seq_len: usize, tokens_per_batch: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seq_len,
            per_batch: (tokens_per_batch / seq_len).max(1),
        }
    }

    pub fn sequences_per_batch(&self) -> usize {
        self.per_batch
    }

    pub fn next_batch(&mut self, data: &[u8]) -> Vec<Vec<usize>> {
        let max_start = data.len() - self.seq_len;
        (0..self.per_batch)
            .map(|_| {
                let start = self.rng.gen_range(0..=max_start);
                data[start..start + self.seq_len]
                    .iter()
                    .map(|&b| b as usize)
                    .collect()
            })
            .collect()
    }
}

/// Evenly spaced windows over the validation split.
fn validation_batch(valid: &[u8], seq_len: usize, count: usize) -> Vec<Vec<usize>> {
    if valid.len() < seq_len.max(2) || count == 0 {
        return Vec::new();
    }
    let span = valid.len() - seq_len;
    (0..count)
        .map(|i| {
            let start = if count == 1 {
                0
            } else {
                span * i / (count - 1)
            };
            valid[start..start + seq_len]
                .iter()
                .map(|&b| b as usize)
                .collect()
        })
        .collect()
}

fn split<'a>(ms: Vec<&'a Matrix>, decay: &[bool]) -> (Vec<&'a Matrix>, Vec<&'a Matrix>) {
    let mut on = Vec::new();
    let mut off = Vec::new();
    for (m, &d) in ms.into_iter().zip(decay) {
        if d {
            on.push(m)
        } else {
            off.push(m)
        }
    }
    (on, off)
}

/// Trains from freshly initialized parameters.
pub fn train_lm(
    model: &ModelConfig,
    corpus: &ByteCorpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_lm_with(init_params(model)?, corpus, cfg, |_| {})
}

/// Training loop with a per-step callback (for streaming telemetry).
pub fn train_lm_with(
    mut params: Params,
    corpus: &ByteCorpus,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TelemetryRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = params.cfg;
    model.validate()?;
    if model.vocab < 256 {
        return Err(Error::InvalidArgument(format!(
            "byte corpus needs a vocabulary of at least 256, model has {}",
            model.vocab
        )));
    }
    let n = model.seq_len;
    if corpus.train.len() < n.max(cfg.tokens_per_batch) + 1 {
        return Err(Error::InvalidArgument(format!(
            "training split of {} bytes is smaller than one batch",
            corpus.train.len()
        )));
    }
    let mut sampler = BatchSampler::new(cfg.data_seed, n, cfg.tokens_per_batch);
    let val_batch = validation_batch(&corpus.valid, n, cfg.eval_sequences);

    let decay_flags: Vec<bool> = params.named().iter().map(|p| p.decay).collect();
    let (decayed, plain) = split(params.tensors(), &decay_flags);
    let mut state_decay = AdamState::new(decayed);
    let mut state_plain = AdamState::new(plain);
    let adam_plain = AdamwConfig {
        weight_decay: 0.0,
        ..cfg.adam
    };

    let mut telemetry = Vec::new();
    let mut validation = Vec::new();
    let mut status = TrainStatus::Completed;

    for step in 0..cfg.steps {
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !val_batch.is_empty() {
            validation.push(ValidationRecord {
                step,
                log_perplexity: lm_loss(&params, &val_batch)?,
            });
        }
        let batch = sampler.next_batch(&corpus.train);
        let logit_bound = qk_logit_bounds(&params).unwrap_or_default();
        let mut out = lm_loss_and_grads(&params, &batch)?;
        let lr = lr_at(step, &cfg.schedule);
        if !out.loss.is_finite() {
            let rec = TelemetryRecord {
                step,
                train_loss: out.loss,
                lr,
                grad_norm_preclip: f64::NAN,
                max_abs_logit: out.max_abs_logit,
                logit_bound,
            };
            on_step(&rec);
            telemetry.push(rec);
            status = TrainStatus::NonFinite { step };
            break;
        }
        let mut grads_mut: Vec<&mut Matrix> = out
            .grads
            .named_mut()
            .into_iter()
            .map(|p| p.tensor)
            .collect();
        let grad_norm = clip_global_norm(&mut grads_mut, cfg.adam.clip_norm);
        drop(grads_mut);

        let (g_on, g_off) = split(out.grads.tensors(), &decay_flags);
        let mut p_on = Vec::new();
        let mut p_off = Vec::new();
        for (p, &d) in params.named_mut().into_iter().zip(&decay_flags) {
            if d {
                p_on.push(p.tensor)
            } else {
                p_off.push(p.tensor)
            }
        }
        adamw_step(&mut p_on, &g_on, &mut state_decay, &cfg.adam, lr)?;
        adamw_step(&mut p_off, &g_off, &mut state_plain, &adam_plain, lr)?;

        let rec = TelemetryRecord {
            step,
            train_loss: out.loss,
            lr,
            grad_norm_preclip: grad_norm,
            max_abs_logit: out.max_abs_logit,
            logit_bound,
        };
        on_step(&rec);
        telemetry.push(rec);
    }
    if status == TrainStatus::Completed
        && cfg.steps > 0
        && cfg.eval_every > 0
        && !val_batch.is_empty()
    {
        validation.push(ValidationRecord {
            step: cfg.steps,
            log_perplexity: lm_loss(&params, &val_batch)?,
        });
    }
    let stream: Vec<(u64, f64)> = telemetry.iter().map(|r| (r.step, r.train_loss)).collect();
    let divergence_flags = detect_divergence(&stream, cfg.divergence_window, cfg.divergence_ratio);
    Ok(TrainOutcome {
        telemetry,
        validation,
        params,
        status,
        divergence_flags,
    })
}

pub fn telemetry_header(n_layers: usize, heads: usize) -> String {
    let mut h = String::from("step,loss,lr,grad_norm");
    for l in 0..n_layers {
        for j in 0..heads {
            h.push_str(&format!(",max_logit_L{l}H{j}"));
        }
    }
    h
}

pub fn write_telemetry_row<W: Write>(mut w: W, r: &TelemetryRecord) -> Result<()> {
    write!(
        w,
        "{},{},{},{}",
        r.step, r.train_loss, r.lr, r.grad_norm_preclip
    )?;
    for v in &r.max_abs_logit {
        write!(w, ",{v}")?;
    }
    writeln!(w)?;
    Ok(())
}

pub fn write_telemetry_csv<W: Write>(
    mut w: W,
    n_layers: usize,
    heads: usize,
    records: &[TelemetryRecord],
) -> Result<()> {
    writeln!(w, "{}", telemetry_header(n_layers, heads))?;
    for r in records {
        write_telemetry_row(&mut w, r)?;
    }
    Ok(())
}

pub const VALIDATION_CSV_HEADER: &str = "step,val_log_perplexity";

pub fn write_validation_csv<W: Write>(mut w: W, records: &[ValidationRecord]) -> Result<()> {
    writeln!(w, "{VALIDATION_CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{},{}", r.step, r.log_perplexity)?;
    }
    Ok(())
}
