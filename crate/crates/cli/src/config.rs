use std::fs;
use std::path::{Path, PathBuf};

use plug_core::eval::DensityBuckets;
use plug_core::ilg::IlgConfig;
use plug_core::losses::AffinityConfig;
use plug_core::scene::DatasetSpec;
use plug_core::study::DensityStudyConfig;
use plug_core::train::TrainConfig;
use plug_core::{Error, FilterBankSpec, Result};
use serde::{Deserialize, Serialize};

/// Parameters of every command; each command reads the sections it needs.
/// Command-line flags override values loaded from the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub dataset: DatasetSpec,
    pub features: FilterBankSpec,
    /// Directory of precomputed `<image stem>.feat` files, used instead of
    /// the filter bank when set.
    pub features_dir: Option<PathBuf>,
    pub affinity: AffinityConfig,
    pub train: TrainConfig,
    pub ilg: IlgConfig,
    pub density: DensityStudyConfig,
    pub density_buckets: DensityBuckets,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.features.validate()?;
        self.train.validate()?;
        self.ilg.validate()?;
        self.density.validate()?;
        self.density_buckets.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"ilg": {"lambda": 1.0}}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"ilg": {"lamda": 1.0}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn default_is_valid() {
        RunConfig::default().validate().unwrap();
    }
}
