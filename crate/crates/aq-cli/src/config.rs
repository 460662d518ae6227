//! The run configuration: model structure, training schedules, split
//! boundaries, and ensemble size in one strict-schema JSON document.
//!
//! An empty document (`{}`) reproduces the full-scale reference settings;
//! `configs/desk.json` in the repository root scales them down to a
//! minutes-long desk experiment.

use std::path::{Path, PathBuf};

use aqrnn::network::NetworkConfig;
use aqrnn::training::TrainConfig;
use aqrnn::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_train_end() -> NaiveDate {
    NaiveDate::from_ymd_opt(2010, 1, 1).expect("valid date")
}
fn default_validation_end() -> NaiveDate {
    NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date")
}
fn default_test_end() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date")
}
fn default_ensemble() -> usize {
    1
}

/// Everything a training run needs, beyond the panel itself.
///
/// Unknown keys are rejected so a typo cannot silently fall back to a
/// default.  Split bounds are exclusive: a day belongs to the training range
/// when its date precedes `train_end`, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub train_end: NaiveDate,
    pub validation_end: NaiveDate,
    pub test_end: NaiveDate,
    /// Independently initialized models whose forecasts are combined by a
    /// per-coordinate median.
    pub ensemble: usize,
    /// Default panel CSV, used when `--data` is not given.
    pub data: Option<PathBuf>,
    /// Default output directory, used when `--out` is not given.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            training: TrainConfig::default(),
            train_end: default_train_end(),
            validation_end: default_validation_end(),
            test_end: default_test_end(),
            ensemble: default_ensemble(),
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        if self.ensemble == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        if !(self.train_end <= self.validation_end && self.validation_end <= self.test_end) {
            return Err(Error::Config(format!(
                "split bounds must be ordered: {} / {} / {}",
                self.train_end, self.validation_end, self.test_end
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization: two runs share a hash
    /// exactly when they share a configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
