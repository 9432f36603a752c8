use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::Config;

pub const FILE_NAME: &str = "manifest.txt";

/// Plain `key = value` record of one run. The config portion is written
/// before any work starts; status, outputs and the end time are added by
/// [`RunManifest::finish`].
pub struct RunManifest {
    path: PathBuf,
    command: String,
    started: u64,
    config: Vec<(String, String)>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(out_dir: &Path, command: &str, config: &Config) -> io::Result<Self> {
        fs::create_dir_all(out_dir)?;
        let m = Self {
            path: out_dir.join(FILE_NAME),
            command: command.to_string(),
            started: now(),
            config: config
                .entries()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        };
        m.write("running", &[], &[], None)?;
        Ok(m)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn finish(
        &self,
        status: &str,
        outputs: &[PathBuf],
        extra: &[(String, String)],
    ) -> io::Result<()> {
        self.write(status, outputs, extra, Some(now()))
    }

    fn write(
        &self,
        status: &str,
        outputs: &[PathBuf],
        extra: &[(String, String)],
        finished: Option<u64>,
    ) -> io::Result<()> {
        let mut s = String::new();
        let mut kv = |k: &str, v: &str| s.push_str(&format!("{k} = {v}\n"));
        kv("manifest.command", &self.command);
        kv("manifest.version", env!("CARGO_PKG_VERSION"));
        kv(
            "manifest.parallel",
            if cfg!(feature = "parallel") {
                "true"
            } else {
                "false"
            },
        );
        kv("manifest.started", &self.started.to_string());
        kv(
            "manifest.finished",
            &finished.map(|t| t.to_string()).unwrap_or_default(),
        );
        kv("manifest.status", status);
        let names: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
        kv("manifest.outputs", &names.join(","));
        for (k, v) in extra {
            kv(&format!("manifest.{k}"), v);
        }
        for (k, v) in &self.config {
            kv(k, v);
        }
        fs::write(&self.path, s)
    }
}
