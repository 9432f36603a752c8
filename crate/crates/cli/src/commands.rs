use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lsattn_core::attention::{attention_flops, LsLayout, FLOP_MODEL_NOTE};
use lsattn_core::checkpoint;
use lsattn_core::gradcheck;
use lsattn_core::kvsim::{
    bench_interleaved, cache_entries, cost_model, write_cost_csv, CacheLayout,
};
use lsattn_core::lm::train::{write_telemetry_csv, write_validation_csv};
use lsattn_core::lm::{
    train_lm, AttentionKind, ByteCorpus, ModelConfig, TrainConfig, TrainStatus, BYTE_VOCAB,
};
use lsattn_core::optim::{AdamwConfig, ScheduleConfig};
use lsattn_core::synth::{
    run_synth, write_curve_csv, BandedTargetSpec, RunStatus, SynthOptimizer, SynthRunConfig,
};

use crate::config::Config;

/// How a command that ran to the end should exit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    NonFinite,
    /// A gradient check exceeded its tolerance.
    CheckFailed,
    Diverged,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::Ok => "ok",
            Outcome::NonFinite => "non-finite",
            Outcome::CheckFailed => "check-failed",
            Outcome::Diverged => "divergence-flagged",
        }
    }
}

pub struct Report {
    pub outcome: Outcome,
    pub outputs: Vec<PathBuf>,
    pub extra: Vec<(String, String)>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn optim(cfg: &Config) -> Result<(AdamwConfig, ScheduleConfig)> {
    Ok((
        AdamwConfig {
            beta1: cfg.parse("optim.beta1")?,
            beta2: cfg.parse("optim.beta2")?,
            eps: cfg.parse("optim.eps")?,
            weight_decay: cfg.parse("optim.weight_decay")?,
            clip_norm: cfg.parse("optim.clip_norm")?,
        },
        ScheduleConfig {
            lr_max: cfg.parse("optim.lr_max")?,
            lr_min: cfg.parse("optim.lr_min")?,
            warmup_steps: cfg.parse("optim.warmup_steps")?,
            decay_steps: cfg.parse("optim.decay_steps")?,
        },
    ))
}

pub fn synth_config(cfg: &Config) -> Result<SynthRunConfig> {
    let optimizer = match cfg.str("synth.optimizer") {
        "adam" => SynthOptimizer::Fixed {
            adam: AdamwConfig::adam(),
            lr: cfg.parse("synth.lr")?,
        },
        _ => {
            let (adam, schedule) = optim(cfg)?;
            SynthOptimizer::Scheduled { adam, schedule }
        }
    };
    let c = SynthRunConfig {
        target: BandedTargetSpec {
            n: cfg.parse("synth.n")?,
            band: cfg.parse("synth.band")?,
            bernoulli_p: cfg.parse("synth.bernoulli_p")?,
            seed: cfg.parse("seed.data")?,
        },
        d_k: cfg.parse("synth.d_k")?,
        mask: cfg.mask("synth.mask")?,
        steps: cfg.parse("synth.steps")?,
        optimizer,
        log_every: cfg.parse("synth.log_every")?,
        init_std: cfg.parse("synth.init_std")?,
        seed: cfg.parse("seed.init")?,
    };
    c.validate()?;
    Ok(c)
}

pub fn synth(cfg: &Config, out: &Path) -> Result<Report> {
    let c = synth_config(cfg)?;
    let run = run_synth(&c)?;
    let curve = out.join("curve.csv");
    write_curve_csv(create(&curve)?, &run.curve)?;
    let ckpt = out.join("checkpoint.bin");
    checkpoint::save(&ckpt, &run.checkpoint_tensors())?;
    let outcome = match run.status {
        RunStatus::Completed => Outcome::Ok,
        RunStatus::NonFinite { step } => {
            eprintln!("loss became non-finite at step {step}");
            Outcome::NonFinite
        }
    };
    if let Some(f) = run.final_record() {
        println!(
            "mask {} steps {} final loss {:.6e} peak max|QK^T| {:.4}",
            c.mask,
            f.step,
            f.loss,
            run.peak_logit_all()
        );
    }
    Ok(Report {
        outcome,
        outputs: vec![curve, ckpt],
        extra: vec![],
    })
}

pub fn lm_configs(cfg: &Config) -> Result<(ModelConfig, TrainConfig)> {
    let model = ModelConfig {
        n_layers: cfg.parse("model.layers")?,
        d: cfg.parse("model.d")?,
        heads: cfg.parse("model.heads")?,
        d_ffn: cfg.parse("model.d_ffn")?,
        vocab: BYTE_VOCAB,
        seq_len: cfg.parse("model.seq_len")?,
        attention: cfg.attention()?,
        init_std: cfg.parse("model.init_std")?,
        seed: cfg.parse("seed.init")?,
    };
    model.validate()?;
    let (adam, schedule) = optim(cfg)?;
    let train = TrainConfig {
        steps: cfg.parse("train.steps")?,
        tokens_per_batch: cfg.parse("train.tokens_per_batch")?,
        adam,
        schedule,
        eval_every: cfg.parse("train.eval_every")?,
        eval_sequences: cfg.parse("train.eval_sequences")?,
        divergence_window: cfg.parse("train.divergence_window")?,
        divergence_ratio: cfg.parse("train.divergence_ratio")?,
        data_seed: cfg.parse("seed.data")?,
    };
    train.validate()?;
    Ok((model, train))
}

pub fn train(cfg: &Config, out: &Path) -> Result<Report> {
    let (model, tc) = lm_configs(cfg)?;
    let frac: f64 = cfg.parse("data.valid_fraction")?;
    let corpus = match cfg.str("data.path") {
        "" => ByteCorpus::synthetic(cfg.parse("data.synthetic_bytes")?, tc.data_seed, frac)?,
        p => ByteCorpus::from_file(Path::new(p), frac)?,
    };
    let run = train_lm(&model, &corpus, &tc)?;
    let telemetry = out.join("telemetry.csv");
    write_telemetry_csv(
        create(&telemetry)?,
        model.n_layers,
        model.heads,
        &run.telemetry,
    )?;
    let validation = out.join("validation.csv");
    write_validation_csv(create(&validation)?, &run.validation)?;
    let ckpt = out.join("checkpoint.bin");
    let named: Vec<(String, &lsattn_core::Matrix)> = run
        .params
        .named()
        .into_iter()
        .map(|p| (p.name, p.tensor))
        .collect();
    checkpoint::save(&ckpt, &named)?;

    let flags: Vec<String> = run.divergence_flags.iter().map(u64::to_string).collect();
    let outcome = match run.status {
        TrainStatus::NonFinite { step } => {
            eprintln!("loss became non-finite at step {step}");
            Outcome::NonFinite
        }
        TrainStatus::Completed if !flags.is_empty() => {
            eprintln!(
                "divergence flagged at {} step(s), first {}",
                flags.len(),
                flags[0]
            );
            Outcome::Diverged
        }
        TrainStatus::Completed => Outcome::Ok,
    };
    if let Some(last) = run.telemetry.last() {
        println!(
            "{} params, step {} loss {:.4} (smoothed {:.4}), max logit {:.4}",
            run.params.num_params(),
            last.step,
            last.train_loss,
            run.smoothed_final_loss(50),
            last.max_abs_logit.iter().cloned().fold(0.0, f64::max)
        );
    }
    if let Some(v) = run.validation.last() {
        println!(
            "validation log-perplexity {:.4} at step {}",
            v.log_perplexity, v.step
        );
    }
    let first_flag = flags.first().cloned().unwrap_or_default();
    Ok(Report {
        outcome,
        outputs: vec![telemetry, validation, ckpt],
        extra: vec![
            ("divergence_flags".into(), flags.len().to_string()),
            ("first_divergence_step".into(), first_flag),
        ],
    })
}

pub fn bench(cfg: &Config, out: &Path) -> Result<Report> {
    let heads: usize = cfg.parse("bench.heads")?;
    let n_local: usize = cfg.parse("bench.n_local")?;
    anyhow::ensure!(n_local <= heads, "bench.n_local exceeds bench.heads");
    let ls = LsLayout::ls(n_local, heads - n_local, cfg.parse("bench.local_span")?);
    ls.validate()?;
    let timing: bool = cfg.parse("bench.timing")?;
    let (batch, repeats): (usize, usize) = (cfg.parse("bench.batch")?, cfg.parse("bench.repeats")?);
    let mut reports = Vec::new();
    for n in cfg.list::<usize>("bench.n_list")? {
        let mut models = Vec::new();
        for attention in [AttentionKind::Vanilla, AttentionKind::Ls(ls)] {
            let model = ModelConfig {
                n_layers: cfg.parse("bench.layers")?,
                d: cfg.parse("bench.d")?,
                heads,
                d_ffn: cfg.parse("bench.d_ffn")?,
                vocab: BYTE_VOCAB,
                seq_len: n,
                attention,
                init_std: 0.02,
                seed: cfg.parse("seed.init")?,
            };
            model.validate()?;
            models.push(model);
        }
        let pair = if timing {
            bench_interleaved(&models, batch, repeats)?
        } else {
            models.iter().map(cost_model).collect()
        };
        match (pair[0].wall_ms, pair[1].wall_ms) {
            (Some(v), Some(l)) => println!(
                "n {n}: vanilla {v:.3} ms, ls {l:.3} ms, reduction {:.2}%",
                100.0 * (v - l) / v
            ),
            _ => println!("n {n}: flop ratio {:.4}", pair[1].flop_ratio()),
        }
        reports.extend(pair);
    }
    let path = out.join("bench.csv");
    write_cost_csv(create(&path)?, &reports)?;
    Ok(Report {
        outcome: Outcome::Ok,
        outputs: vec![path],
        extra: vec![],
    })
}

pub const FLOPS_CSV_HEADER: &str =
    "n,flops_ls,flops_vanilla,flop_ratio,cache_ls,cache_vanilla,cache_ratio";

pub fn flops(cfg: &Config, out: &Path) -> Result<Report> {
    let layout = LsLayout::ls(
        cfg.parse("flops.n_local")?,
        cfg.parse("flops.n_global")?,
        cfg.parse("flops.local_span")?,
    );
    layout.validate()?;
    let (d_k, d_v): (usize, usize) = (cfg.parse("flops.d_k")?, cfg.parse("flops.d_v")?);
    let cache = CacheLayout::from_ls(&layout, d_k, d_v);
    let mut rows = vec![FLOPS_CSV_HEADER.to_string()];
    println!("# {FLOP_MODEL_NOTE}");
    println!(
        "{:>8} {:>16} {:>16} {:>8} {:>8}",
        "n", "flops_ls", "flops_vanilla", "ratio", "cache"
    );
    for n in cfg.list::<usize>("flops.n_list")? {
        anyhow::ensure!(n >= 1, "flops.n_list entries must be positive");
        let f = attention_flops(&layout, n, d_k, d_v);
        let (cl, cv, cr) = cache_entries(&cache, n);
        println!(
            "{n:>8} {:>16} {:>16} {:>8.4} {cr:>8.4}",
            f.ls_flops, f.vanilla_flops, f.ratio
        );
        rows.push(format!(
            "{n},{},{},{},{cl},{cv},{cr}",
            f.ls_flops, f.vanilla_flops, f.ratio
        ));
    }
    let path = out.join("flops.csv");
    std::fs::write(&path, rows.join("\n") + "\n")?;
    Ok(Report {
        outcome: Outcome::Ok,
        outputs: vec![path],
        extra: vec![],
    })
}

pub fn gradcheck(cfg: &Config, out: &Path) -> Result<Report> {
    let start: u64 = cfg.parse("seed.data")?;
    let count: u64 = cfg.parse("gradcheck.seeds")?;
    let tol: f64 = cfg.parse("gradcheck.tolerance")?;
    let reports = gradcheck::run_all(start..start + count)?;
    let mut rows = vec!["suite,cases,max_rel_error".to_string()];
    let mut ok = true;
    for r in &reports {
        let pass = r.passes(tol);
        ok &= pass;
        println!(
            "{:<28} {:>3} cases  max rel error {:.3e}  {}",
            r.suite,
            r.cases,
            r.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
        rows.push(format!("{},{},{:e}", r.suite, r.cases, r.max_rel_error));
    }
    let path = out.join("gradcheck.csv");
    std::fs::write(&path, rows.join("\n") + "\n")?;
    Ok(Report {
        outcome: if ok {
            Outcome::Ok
        } else {
            Outcome::CheckFailed
        },
        outputs: vec![path],
        extra: vec![],
    })
}
