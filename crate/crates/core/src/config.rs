//! Run configuration: one TOML file describing the network, the training
//! recipe, the data source, the augmentation policy, and the phantom
//! generator. Every section is optional and falls back to defaults;
//! unknown keys are rejected with the offending key named. Each run
//! writes its fully resolved configuration next to its outputs so the
//! exact run can be repeated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentPolicy;
use crate::data::phantom::PhantomSpec;
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding `images/` and `masks/`. When absent, the run
    /// synthesizes `phantom_count` phantoms from the `[phantom]` section.
    pub root: Option<PathBuf>,
    /// Optional `[height, width]` all samples are resampled to. When
    /// absent, samples keep their native size.
    pub target_size: Option<[usize; 2]>,
    /// Train/val/test fractions; must be non-negative and sum to 1.
    pub ratios: [f64; 3],
    /// Seed for the subject-level split shuffle.
    pub split_seed: u64,
    /// Number of phantoms to synthesize when `root` is absent.
    pub phantom_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            target_size: None,
            ratios: [0.7, 0.2, 0.1],
            split_seed: 0,
            phantom_count: 200,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::config("data.ratios entries must lie in [0, 1]"));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("data.ratios must sum to 1, got {sum}")));
        }
        if let Some([h, w]) = self.target_size {
            if h == 0 || w == 0 {
                return Err(Error::config("data.target_size entries must be positive"));
            }
        }
        if self.root.is_none() && self.phantom_count < 3 {
            return Err(Error::config(
                "data.phantom_count must be at least 3 so the split has one subject per fold",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentPolicy,
    pub phantom: PhantomSpec,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.phantom.validate()?;
        if self.network.num_classes != self.phantom.num_classes() && self.data.root.is_none() {
            return Err(Error::config(format!(
                "network.num_classes is {} but the phantom generator produces {} classes",
                self.network.num_classes,
                self.phantom.num_classes()
            )));
        }
        Ok(())
    }

    /// The fully resolved configuration (all defaults filled in) as TOML.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("resolved config serializes")
    }

    /// Writes the resolved configuration into `dir` as `config.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.resolved_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
