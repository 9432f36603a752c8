//! Flat `key = value` configuration with dotted prefixes.
//!
//! Every command has a fixed key table with defaults. Resolution order is
//! defaults, then the config file, then `--set`, then the seed flags. A key
//! the command does not know is an error. `manifest.*` keys are skipped so a
//! run manifest can be fed back in as a config.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use lsattn_core::attention::{LsLayout, MaskSpec};
use lsattn_core::lm::AttentionKind;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

const SEEDS: &[(&str, &str)] = &[("seed.data", "0"), ("seed.init", "0")];

const SYNTH: &[(&str, &str)] = &[
    ("synth.n", "256"),
    ("synth.band", "8"),
    ("synth.bernoulli_p", "0.5"),
    ("synth.d_k", "8"),
    ("synth.mask", "local:8"),
    ("synth.steps", "10000"),
    ("synth.log_every", "100"),
    ("synth.init_std", "0.1"),
    ("synth.optimizer", "adam"),
    ("synth.lr", "0.001"),
];

const OPTIM: &[(&str, &str)] = &[
    ("optim.beta1", "0.9"),
    ("optim.beta2", "0.95"),
    ("optim.eps", "1e-8"),
    ("optim.weight_decay", "0.1"),
    ("optim.clip_norm", "1"),
    ("optim.lr_max", "0.0006"),
    ("optim.lr_min", "0.00006"),
    ("optim.warmup_steps", "200"),
    ("optim.decay_steps", "2000"),
];

const MODEL: &[(&str, &str)] = &[
    ("model.layers", "2"),
    ("model.d", "64"),
    ("model.heads", "4"),
    ("model.d_ffn", "256"),
    ("model.seq_len", "128"),
    ("model.attention", "vanilla"),
    ("model.n_local", "0"),
    ("model.local_span", "16"),
    ("model.qk_norm", "false"),
    ("model.init_std", "0.02"),
];

const TRAIN: &[(&str, &str)] = &[
    ("train.steps", "2000"),
    ("train.tokens_per_batch", "256"),
    ("train.eval_every", "250"),
    ("train.eval_sequences", "8"),
    ("train.divergence_window", "50"),
    ("train.divergence_ratio", "1.5"),
    ("data.path", ""),
    ("data.synthetic_bytes", "1100000"),
    ("data.valid_fraction", "0.1"),
];

const BENCH: &[(&str, &str)] = &[
    ("bench.n_list", "512,2048,4096"),
    ("bench.layers", "1"),
    ("bench.d", "192"),
    ("bench.heads", "6"),
    ("bench.d_ffn", "768"),
    ("bench.n_local", "5"),
    ("bench.local_span", "50"),
    ("bench.batch", "1"),
    ("bench.repeats", "5"),
    ("bench.timing", "true"),
];

const FLOPS: &[(&str, &str)] = &[
    ("flops.n_list", "2048,8192"),
    ("flops.n_local", "5"),
    ("flops.n_global", "1"),
    ("flops.local_span", "100"),
    ("flops.d_k", "32"),
    ("flops.d_v", "32"),
];

const GRADCHECK: &[(&str, &str)] = &[("gradcheck.seeds", "20"), ("gradcheck.tolerance", "1e-5")];

pub fn defaults(command: &str) -> Vec<(&'static str, &'static str)> {
    let tables: &[&[(&str, &str)]] = match command {
        "synth" => &[SEEDS, SYNTH, OPTIM],
        "train-lm" => &[SEEDS, MODEL, TRAIN, OPTIM],
        "bench" => &[SEEDS, BENCH],
        "flops" => &[FLOPS],
        "gradcheck" => &[SEEDS, GRADCHECK],
        _ => &[],
    };
    tables.iter().flat_map(|t| t.iter().copied()).collect()
}

/// Fully resolved configuration for one command.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

/// Parses `key = value` lines. `#` starts a comment.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(format!(
                "line {}: expected `key = value`, got `{raw}`",
                no + 1
            ));
        };
        let k = k.trim();
        if k.is_empty() {
            return err(format!("line {}: empty key", no + 1));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => err(format!("--set expects key=value, got `{s}`")),
    }
}

impl Config {
    pub fn resolve(
        command: &str,
        file: Option<&Path>,
        sets: &[(String, String)],
        seed_data: Option<u64>,
        seed_init: Option<u64>,
    ) -> Result<Self, ConfigError> {
        let table = defaults(command);
        if table.is_empty() {
            return err(format!("unknown command `{command}`"));
        }
        let mut values: BTreeMap<String, String> = table
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut assign = |k: &str, v: &str, origin: &str| -> Result<(), ConfigError> {
            if k.starts_with("manifest.") {
                return Ok(());
            }
            match values.get_mut(k) {
                Some(slot) => {
                    *slot = v.to_string();
                    Ok(())
                }
                None => err(format!("unknown key `{k}` for `{command}` ({origin})")),
            }
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
            for (k, v) in parse_text(&text)? {
                assign(&k, &v, &path.display().to_string())?;
            }
        }
        for (k, v) in sets {
            assign(k, v, "--set")?;
        }
        let has_seeds = table.iter().any(|(k, _)| *k == "seed.data");
        for (key, val) in [("seed.data", seed_data), ("seed.init", seed_init)] {
            if let Some(v) = val {
                if !has_seeds {
                    return err(format!("`{command}` takes no seeds"));
                }
                assign(key, &v.to_string(), "flag")?;
            }
        }
        let cfg = Self { values };
        cfg.check_types(command)?;
        Ok(cfg)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key {key} not in table"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        let raw = self.str(key);
        raw.parse()
            .map_err(|e| ConfigError(format!("`{key} = {raw}`: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: Display,
    {
        let raw = self.str(key);
        let items: Result<Vec<T>, _> = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| ConfigError(format!("`{key} = {raw}`: {e}")))
            })
            .collect();
        let items = items?;
        if items.is_empty() {
            return err(format!("`{key}` must list at least one value"));
        }
        Ok(items)
    }

    pub fn mask(&self, key: &str) -> Result<MaskSpec, ConfigError> {
        self.parse(key)
    }

    /// Attention variant from the `model.*` keys.
    pub fn attention(&self) -> Result<AttentionKind, ConfigError> {
        let heads: usize = self.parse("model.heads")?;
        match self.str("model.attention") {
            "vanilla" => Ok(AttentionKind::Vanilla),
            "qk_norm" => Ok(AttentionKind::QkNorm),
            "ls" => {
                let n_local: usize = self.parse("model.n_local")?;
                if n_local > heads {
                    return err(format!(
                        "model.n_local = {n_local} exceeds model.heads = {heads}"
                    ));
                }
                let layout =
                    LsLayout::ls(n_local, heads - n_local, self.parse("model.local_span")?)
                        .with_qk_norm(self.parse("model.qk_norm")?);
                layout.validate().map_err(|e| ConfigError(e.to_string()))?;
                Ok(AttentionKind::Ls(layout))
            }
            other => err(format!(
                "model.attention must be vanilla, qk_norm or ls, got `{other}`"
            )),
        }
    }

    /// Parses every key once so type errors surface before any work starts.
    fn check_types(&self, command: &str) -> Result<(), ConfigError> {
        for (k, v) in &self.values {
            let leaf = k.rsplit('.').next().unwrap_or(k);
            let ok = match leaf {
                "path" => true,
                "mask" => v.parse::<MaskSpec>().is_ok(),
                "attention" => true,
                "optimizer" => matches!(v.as_str(), "adam" | "adamw"),
                "qk_norm" | "timing" => v.parse::<bool>().is_ok(),
                "n_list" => self.list::<usize>(k).is_ok(),
                "data" | "init" | "steps" | "log_every" | "warmup_steps" | "decay_steps"
                | "eval_every" => v.parse::<u64>().is_ok(),
                "bernoulli_p" | "init_std" | "lr" | "beta1" | "beta2" | "eps" | "weight_decay"
                | "clip_norm" | "lr_max" | "lr_min" | "divergence_ratio" | "valid_fraction"
                | "tolerance" => v.parse::<f64>().is_ok(),
                _ => v.parse::<usize>().is_ok(),
            };
            if !ok {
                return err(format!("`{k} = {v}` has the wrong type"));
            }
        }
        if command == "train-lm" {
            self.attention()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn layered_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "# comment\nsynth.steps = 5\nsynth.mask = global  # trailing\nmanifest.command = synth\n").unwrap();
        let c = Config::resolve(
            "synth",
            Some(&path),
            &sets(&[("synth.steps", "7")]),
            Some(3),
            None,
        )
        .unwrap();
        assert_eq!(c.str("synth.steps"), "7");
        assert_eq!(c.str("synth.mask"), "global");
        assert_eq!(c.str("seed.data"), "3");
        assert_eq!(c.str("seed.init"), "0");
    }

    #[test]
    fn unknown_and_mistyped_keys_fail() {
        assert!(
            Config::resolve("synth", None, &sets(&[("synth.stpes", "1")]), None, None).is_err()
        );
        assert!(Config::resolve("synth", None, &sets(&[("model.d", "1")]), None, None).is_err());
        assert!(
            Config::resolve("synth", None, &sets(&[("synth.steps", "x")]), None, None).is_err()
        );
        assert!(Config::resolve(
            "synth",
            None,
            &sets(&[("synth.mask", "banded")]),
            None,
            None
        )
        .is_err());
        assert!(Config::resolve(
            "train-lm",
            None,
            &sets(&[("model.attention", "ls"), ("model.n_local", "5")]),
            None,
            None
        )
        .is_err());
        assert!(Config::resolve("flops", None, &[], Some(1), None).is_err());
        assert!(Config::resolve("nope", None, &[], None, None).is_err());
        assert!(parse_text("no equals sign").is_err());
    }

    #[test]
    fn lists_and_attention() {
        let c = Config::resolve(
            "train-lm",
            None,
            &sets(&[
                ("model.attention", "ls"),
                ("model.n_local", "3"),
                ("model.local_span", "4"),
            ]),
            None,
            None,
        )
        .unwrap();
        assert_eq!(
            c.attention().unwrap(),
            AttentionKind::Ls(LsLayout::ls(3, 1, 4))
        );
        let f = Config::resolve("flops", None, &[], None, None).unwrap();
        assert_eq!(f.list::<usize>("flops.n_list").unwrap(), vec![2048, 8192]);
    }
}
