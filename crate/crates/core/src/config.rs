//! Run configuration as one flat key-value table, plus the run manifest.
//!
//! Keys from every section share a single namespace. Resolution layers
//! built-in defaults, then a config file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::data::{DatasetFingerprint, InputFormat};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::risk::RiskConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Share of each user's train positives held out for validation when the
    /// corpus ships without a validation file.
    pub val_fraction: f64,
    pub format: InputFormat,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            val_fraction: 0.1,
            format: InputFormat::AdjacencyText,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub risk: RiskConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn to_table<T: Serialize>(v: &T) -> Table {
    match Value::try_from(v) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("config sections serialise to tables"),
    }
}

fn from_table<T: DeserializeOwned>(t: Table) -> Result<T> {
    Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

impl RunConfig {
    /// Every key with its current value, in one flat table.
    pub fn to_flat(&self) -> Table {
        let mut out = Table::new();
        out.extend(to_table(&self.model));
        out.extend(to_table(&self.risk));
        out.extend(to_table(&self.train));
        out.extend(to_table(&self.data));
        out
    }

    pub fn known_keys() -> Vec<String> {
        RunConfig::default().to_flat().keys().cloned().collect()
    }

    /// Overlays `overrides` onto `self`. Unknown keys and ill-typed values
    /// are configuration errors.
    pub fn merged(&self, overrides: &Table) -> Result<Self> {
        let defaults = RunConfig::default();
        let sections = [
            to_table(&defaults.model),
            to_table(&defaults.risk),
            to_table(&defaults.train),
            to_table(&defaults.data),
        ];
        let mut current = [
            to_table(&self.model),
            to_table(&self.risk),
            to_table(&self.train),
            to_table(&self.data),
        ];
        for (key, value) in overrides {
            let slot = sections
                .iter()
                .position(|s| s.contains_key(key))
                .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
            current[slot].insert(key.clone(), value.clone());
        }
        let [model, risk, train, data] = current;
        let cfg = RunConfig {
            model: from_table(model)?,
            risk: from_table(risk)?,
            train: from_table(train)?,
            data: from_table(data)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.risk.validate()?;
        self.train.validate()?;
        if self.model.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if !(self.model.init_std >= 0.0 && self.model.init_std.is_finite()) {
            return Err(Error::Config("init_std must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        RunConfig::default().merged(&table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_flat()).expect("flat table serialises")
    }

    /// First eight hex digits of the SHA-256 of the flat TOML form.
    pub fn hash8(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..8].to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint_best: PathBuf,
    pub checkpoint_final: PathBuf,
    pub train_log_jsonl: PathBuf,
    pub train_log_csv: PathBuf,
    pub metrics: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Artifacts {
            checkpoint_best: dir.join("checkpoint-best.ckpt"),
            checkpoint_final: dir.join("checkpoint-final.ckpt"),
            train_log_jsonl: dir.join("trainlog.jsonl"),
            train_log_csv: dir.join("trainlog.csv"),
            metrics: dir.join("metrics.json"),
        }
    }
}

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub data_path: PathBuf,
    /// Fingerprint of the dataset after the validation holdout.
    pub dataset: DatasetFingerprint,
    pub seed: u64,
    pub reference_checkpoint: Option<PathBuf>,
    pub created: String,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
