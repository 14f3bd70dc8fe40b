use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

pub const VERSION: &str = env!("TRAJFIELD_VERSION");

/// Written next to every command's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub threads: usize,
    /// Fully resolved configuration.
    pub config: Value,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, seed: Option<u64>, config: Value) -> Self {
        RunManifest {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
            threads: rayon::current_num_threads(),
            config,
            started_unix: now_unix(),
            finished_unix: 0.0,
        }
    }

    pub fn finish(mut self, path: &Path) -> anyhow::Result<()> {
        self.finished_unix = now_unix();
        std::fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}

/// `DIR/manifest.json` for directory outputs.
pub fn in_dir(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// `FILE.manifest.json` for single-file outputs.
pub fn beside(file: &Path) -> PathBuf {
    with_suffix(file, ".manifest.json")
}

pub fn with_suffix(file: &Path, suffix: &str) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
