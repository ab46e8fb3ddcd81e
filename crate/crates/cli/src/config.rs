//! Layered run configuration: built-in defaults, then the `--config` TOML
//! file, then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use viewdvc::captioner::ModelConfig;
use viewdvc::preproc::SortParams;
use viewdvc::synthdata::SynthConfig;
use viewdvc::trainer::{AdvConfig, DataConfig, TrainConfig, TrainSection};
use viewdvc::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocConfig {
    pub sort: SortParams,
    pub smooth_window: usize,
    pub crop_margin: f64,
    pub min_overlap_ratio: f64,
    pub marker_debounce: usize,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig {
            sort: SortParams::default(),
            smooth_window: 9,
            crop_margin: 0.25,
            min_overlap_ratio: 0.5,
            marker_debounce: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub encoder_seed: u64,
    /// Width of one encoded region.
    pub width: usize,
    pub fps: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            encoder_seed: 0,
            width: 32,
            fps: 1.0,
        }
    }
}

/// Everything a command may read from the config file. The training
/// sections carry the same names as in a checkpoint's config.toml.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub adv: AdvConfig,
    pub synth: SynthConfig,
    pub preproc: PreprocConfig,
    pub features: FeatureConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            data: self.data.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            adv: self.adv.clone(),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults_per_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nepochs = 3\n[synth]\nview_gap = 5.0\n").unwrap();
        let c = CliConfig::load(Some(&path)).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr_model, TrainSection::default().lr_model);
        assert_eq!(c.synth.view_gap, 5.0);
        assert_eq!(c.preproc.smooth_window, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nepoch = 3\n").unwrap();
        let err = CliConfig::load(Some(&path)).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("c.toml"));
    }
}
