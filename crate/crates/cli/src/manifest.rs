use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                config: serde_json::Value::Null,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                seed: None,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                started_unix_secs: started,
                wall_clock_secs: 0.0,
            },
            start: Instant::now(),
        }
    }

    pub fn config<S: Serialize>(&mut self, config: &S) -> &mut Self {
        self.manifest.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        self
    }

    pub fn input(&mut self, name: &str, path: impl Into<PathBuf>) -> &mut Self {
        self.manifest.inputs.insert(name.to_string(), path.into());
        self
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.manifest.outputs.push(path.into());
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seed = Some(seed);
        self
    }

    /// Writes `run_manifest.json` into `dir`.
    pub fn finish(&mut self, dir: &Path) -> std::io::Result<PathBuf> {
        self.manifest.wall_clock_secs = self.start.elapsed().as_secs_f64();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
