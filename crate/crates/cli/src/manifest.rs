use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Record of one command run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the effective config serialized with sorted keys.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub versions: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub status: String,
    pub summary: serde_json::Map<String, serde_json::Value>,
    #[serde(skip)]
    clock: Option<(String, Instant)>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> anyhow::Result<Self> {
        let config = serde_json::to_value(config)?;
        let hash = Sha256::digest(serde_json::to_vec(&config)?);
        let mut versions = BTreeMap::new();
        versions.insert("gs4d".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("checkpoint_format".to_string(), "1".to_string());
        Ok(RunManifest {
            command: command.to_string(),
            config_hash: hex::encode(hash),
            config,
            seed,
            threads: rayon::current_num_threads(),
            versions,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
            status: "ok".to_string(),
            summary: serde_json::Map::new(),
            clock: None,
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.summary.insert(key.to_string(), value);
    }

    /// Starts timing `stage`, closing any stage still open.
    pub fn begin(&mut self, stage: &str) {
        self.end();
        self.clock = Some((stage.to_string(), Instant::now()));
    }

    pub fn end(&mut self) {
        if let Some((stage, t0)) = self.clock.take() {
            *self.timings.entry(stage).or_default() += t0.elapsed().as_secs_f64();
        }
    }

    pub fn write(&mut self, path: &Path) -> std::io::Result<()> {
        self.end();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)
    }
}
