use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tpp_outlier::{Error, Result};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";
/// Manifest file name inside an output directory.
pub const RUN_MANIFEST: &str = "run.manifest.json";

/// Provenance record written next to every artifact-producing command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Path (relative to the manifest) to hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: serde_json::Value,
    started_unix: u64,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { command: command.into(), seed: None, config: serde_json::Value::Null, started_unix, clock: Instant::now() }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn config<T: Serialize>(mut self, cfg: &T) -> Self {
        self.config = serde_json::to_value(cfg).expect("config serialises");
        self
    }

    /// Hashes `artifacts` (files, or every file under a directory) and
    /// writes the manifest to `path`.
    pub fn finish(self, path: &Path, artifacts: &[PathBuf]) -> Result<RunManifest> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut hashes = BTreeMap::new();
        for a in artifacts {
            for file in files_under(a)? {
                let key = file.strip_prefix(base).unwrap_or(&file).to_string_lossy().into_owned();
                hashes.insert(key, hash_file(&file)?);
            }
        }
        let m = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed,
            config: self.config,
            artifacts: hashes,
            started_unix: self.started_unix,
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serialises");
        std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })?;
        Ok(m)
    }
}

/// Manifest path for a single-file artifact: `out.csv` → `out.csv.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(MANIFEST_SUFFIX);
    PathBuf::from(s)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::Io { path: path.into(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for e in entries {
        out.extend(files_under(&e)?);
    }
    Ok(out)
}
