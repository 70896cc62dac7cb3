//! Single structured run configuration, read from TOML.
//!
//! Every key is optional and falls back to its default; unknown keys are
//! errors. The top-level `seed` is the only source of randomness: it seeds
//! the simulator and the network initialization and is recorded in the
//! training report, so the per-section seed keys are not accepted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse::QcConfig;
use crate::ekf::{InitConfig, ProcessNoiseConfig};
use crate::features::{NormalizationSpec, DEFAULT_N_MAX};
use crate::models::CorrectionConfig;
use crate::pipeline::{ElevationModel, PipelineConfig, DEFAULT_R_FLOOR};
use crate::sim::ScenarioConfig;
use crate::train::{DhemConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub n_max: usize,
    pub norms: NormalizationSpec,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_max: DEFAULT_N_MAX,
            norms: NormalizationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Lower bound on measurement variances (m²).
    pub r_floor: f64,
    /// Noise model of the elevation-weighted baseline.
    pub elevation: ElevationModel,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            r_floor: DEFAULT_R_FLOOR,
            elevation: ElevationModel::default(),
        }
    }
}

/// File names used when a subcommand is not given explicit paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub model: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            model: "model.txt".into(),
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub qc: QcConfig,
    pub corrections: CorrectionConfig,
    pub features: FeatureConfig,
    pub init: InitConfig,
    pub process: ProcessNoiseConfig,
    pub filter: FilterConfig,
    pub train: TrainConfig,
    pub dhem: DhemConfig,
    pub scenario: ScenarioConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            qc: QcConfig::default(),
            corrections: CorrectionConfig::default(),
            features: FeatureConfig::default(),
            init: InitConfig::default(),
            process: ProcessNoiseConfig::default(),
            filter: FilterConfig::default(),
            train: TrainConfig::default(),
            dhem: DhemConfig::default(),
            scenario: ScenarioConfig::default(),
            paths: PathsConfig::default(),
        };
        c.set_seed(0);
        c
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        for section in ["scenario", "train"] {
            if value.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(ConfigError::Parse(format!("{section}.seed is not accepted; set the top-level seed")));
            }
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        let mut c = self.clone();
        c.set_seed(self.seed);
        let mut table = toml::Table::try_from(&c).expect("configuration serializes");
        for section in ["scenario", "train"] {
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                t.remove("seed");
            }
        }
        toml::to_string(&table).expect("configuration serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.scenario.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |section: &str, m: String| Err(ConfigError::Invalid(format!("[{section}] {m}")));
        let checks: [(&str, Result<(), String>); 9] = [
            ("qc", self.qc.validate()),
            ("corrections", self.corrections.validate()),
            ("features.norms", self.features.norms.validate()),
            ("init", self.init.validate()),
            ("process", self.process.validate()),
            ("filter.elevation", self.filter.elevation.validate()),
            ("train", self.train.validate()),
            ("dhem", self.dhem.validate()),
            ("scenario", self.scenario.validate().map_err(|e| e.to_string())),
        ];
        for (section, r) in checks {
            if let Err(m) = r {
                return bad(section, m);
            }
        }
        if self.features.n_max == 0 {
            return bad("features", "n_max must be at least 1".into());
        }
        if !(self.filter.r_floor > 0.0 && self.filter.r_floor.is_finite()) {
            return bad("filter", format!("r_floor {} must be positive", self.filter.r_floor));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            qc: self.qc.clone(),
            corrections: self.corrections.clone(),
            norms: self.features.norms,
            n_max: self.features.n_max,
            init: self.init,
            process: self.process,
            elevation: self.filter.elevation,
            r_floor: self.filter.r_floor,
        }
    }
}
