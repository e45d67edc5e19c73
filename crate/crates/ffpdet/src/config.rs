//! The single TOML file carrying every hyperparameter.

use std::path::Path;

use ffpdet_core::detector::DetectorConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::synth::SceneSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
}

impl GlobalConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: GlobalConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.train.validate()?;
        self.scene.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = GlobalConfig::default();
        assert_eq!(GlobalConfig::parse(&cfg.render()).unwrap(), cfg);
        let mut other = cfg.clone();
        other.detector.ffp.dfb_rates = vec![1, 2, 3];
        other.train.batch_size = 3;
        assert_eq!(GlobalConfig::parse(&other.render()).unwrap(), other);
    }

    #[test]
    fn defaults_and_partial_files() {
        let cfg = GlobalConfig::parse("[train]\nbatch_size = 4\n").unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.detector.ffp.dfb_rates, vec![1, 2, 5]);
        assert_eq!(cfg.detector.loss, ffpdet_core::head::LossConfig::default());
        assert_eq!(GlobalConfig::parse("").unwrap(), GlobalConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = GlobalConfig::parse("[train]\nbatchsize = 4\n").unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("batchsize")), "{err}");
        assert!(GlobalConfig::parse("[nope]\n").is_err());
        assert!(GlobalConfig::parse("[train]\nbatch_size = 0\n").is_err());
    }
}
