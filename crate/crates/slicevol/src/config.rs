//! The single JSON run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SliceVolError};
use crate::estimators::EstimationMethod;
use crate::phantom::DatasetSpec;
use crate::preprocess::CanonicalGrid;
use crate::vae::{ModelConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Views {
    Single,
    Dual,
}

impl Views {
    pub fn count(self) -> usize {
        match self {
            Self::Single => 1,
            Self::Dual => 2,
        }
    }
}

impl std::str::FromStr for Views {
    type Err = SliceVolError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "dual" => Ok(Self::Dual),
            other => Err(SliceVolError::InvalidConfig(format!("views must be 'single' or 'dual', got '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Where generated volumes, slices and the manifest live.
    pub data_dir: PathBuf,
    /// Where models, reports and plots are written.
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub grid: CanonicalGrid,
    /// Mode-filter kernel size applied coronally after canonicalization.
    pub mode_filter: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub methods: Vec<EstimationMethod>,
    pub views: Views,
    pub seed: u64,
    pub n_folds: usize,
    /// Sample confidence intervals for rvae-fcnr (trains the CI head variant).
    pub with_ci: bool,
    pub ci_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            dataset: DatasetSpec::default(),
            grid: CanonicalGrid::default(),
            mode_filter: 7,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            methods: vec![
                EstimationMethod::Nn,
                EstimationMethod::Plr,
                EstimationMethod::RvaeLr,
                EstimationMethod::RvaeFcnr,
            ],
            views: Views::Single,
            seed: 0,
            n_folds: 5,
            with_ci: false,
            ci_samples: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::fs::File::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        serde_json::to_writer_pretty(std::fs::File::create(path)?, self)?;
        Ok(())
    }

    /// Checked before any command writes a file.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SliceVolError::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.dataset.n == 0 {
            return Err(SliceVolError::InvalidSize("dataset.n must be >= 1".into()));
        }
        if self.views.count() != self.model.input_views {
            return Err(SliceVolError::ConfigMismatch(format!(
                "views={:?} but model.input_views={}",
                self.views, self.model.input_views
            )));
        }
        if self.methods.is_empty() {
            return Err(SliceVolError::InvalidConfig("at least one estimation method is required".into()));
        }
        if self.n_folds < 2 {
            return Err(SliceVolError::InvalidConfig("n_folds must be >= 2".into()));
        }
        if self.with_ci && !self.methods.contains(&EstimationMethod::RvaeFcnr) {
            return Err(SliceVolError::InvalidConfig("with_ci requires the rvae-fcnr method".into()));
        }
        if self.ci_samples < 2 {
            return Err(SliceVolError::InvalidConfig("ci_samples must be >= 2".into()));
        }
        if self.mode_filter % 2 == 0 {
            return Err(SliceVolError::InvalidKernel("mode_filter must be odd".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn volumes_dir(&self) -> PathBuf {
        self.data_dir.join("volumes")
    }

    pub fn canonical_dir(&self) -> PathBuf {
        self.data_dir.join("canonical")
    }

    pub fn slices_dir(&self) -> PathBuf {
        self.data_dir.join("slices")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join("manifest.csv")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn folds_path(&self) -> PathBuf {
        self.out_dir.join("folds.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn default_config_round_trips_and_validates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = RunConfig::default();
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.schema_version, SCHEMA_VERSION);
        assert_eq!(back.methods.len(), 4);
    }

    #[test]
    fn schema_and_consistency_violations_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.schema_version = 99;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.views = Views::Dual; // model still expects 1 view
        assert!(matches!(cfg.validate(), Err(SliceVolError::ConfigMismatch(_))));

        let mut cfg = RunConfig::default();
        cfg.dataset.n = 0;
        assert!(matches!(cfg.validate(), Err(SliceVolError::InvalidSize(_))));

        let mut cfg = RunConfig::default();
        cfg.with_ci = true;
        cfg.methods = vec![EstimationMethod::Nn];
        assert!(cfg.validate().is_err());
    }
}
