//! Plain-text (TOML) run configuration.
//!
//! ```toml
//! [data]
//! path = "train.jsonl"        # omit to simulate from `process`
//!
//! [train]
//! episodes = 10000
//!
//! [train.ppo]
//! clip = 0.2
//! ```
//!
//! Every field is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::{read_dataset, Dataset, RngStream};
use crate::tppsim::{build_dataset, OutlierSpec, ProcessSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset file; when absent the data is simulated.
    pub path: Option<PathBuf>,
    pub process: ProcessSpec,
    pub outliers: OutlierSpec,
    pub size: usize,
    pub beta: f64,
    /// Simulation seed; defaults to the training seed.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, process: ProcessSpec::default(), outliers: OutlierSpec::default(), size: 1000, beta: 0.8, seed: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.path.is_none() {
            self.data.process.validate()?;
            if !(0.0..=1.0).contains(&self.data.beta) {
                return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.data.beta)));
            }
        }
        Ok(())
    }

    /// Loads the dataset file, or simulates one relative to `base` paths.
    pub fn dataset(&self, base: Option<&Path>) -> Result<Dataset> {
        match &self.data.path {
            Some(p) => {
                let p = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                read_dataset(&p)
            }
            None => {
                let seed = self.data.seed.unwrap_or(self.train.seed);
                build_dataset(&self.data.process, &self.data.outliers, self.data.size, self.data.beta, &mut RngStream::new(seed, 0))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_and_overrides() {
        let text = "[data]\nbeta = 0.6\n[data.process]\nprocess = \"hawkes\"\nmu = 1.5\n[train]\nepisodes = 20\nupdate_frequency = 10\n[train.ppo]\nclip = 0.1\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.data.beta, 0.6);
        assert_eq!(cfg.train.episodes, 20);
        assert_eq!(cfg.train.ppo.clip, 0.1);
        assert_eq!(cfg.train.ppo.gamma, 0.99);
        match &cfg.data.process {
            ProcessSpec::Hawkes(h) => assert_eq!(h.mu, 1.5),
            other => panic!("expected hawkes, got {other:?}"),
        }
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_toml("[train]\nepisodez = 3\n").is_err());
        assert!(RunConfig::from_toml("[train.ppo]\nclip = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[data]\nbeta = 1.5\n").is_err());
    }
}
