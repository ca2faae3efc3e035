//! Experiment configuration files (JSON or TOML, chosen by extension).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSource;
use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Safetensors file with ImageNet weights for the backbone.
    pub backbone_weights: Option<PathBuf>,
    /// Explicitly accept a randomly initialised backbone.
    pub random_backbone: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let cfg: Self = if is_toml {
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Where backbone weights come from. Having neither a weights file nor
    /// the explicit random opt-in yields a source that fails on load with a
    /// remediation message, never a silent random initialisation.
    pub fn backbone_source(&self) -> BackboneSource {
        match (&self.backbone_weights, self.random_backbone) {
            (Some(p), _) => BackboneSource::Pretrained(p.clone()),
            (None, true) => BackboneSource::RandomInit,
            (None, false) => BackboneSource::Pretrained(PathBuf::new()),
        }
    }

    /// Propagates the global seed into every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.split.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(
            &toml_path,
            "random_backbone = true\n[model]\ninput_size = 96\n[train]\nepochs = 3\n[split]\nratios = [0.6, 0.2, 0.2]\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&toml_path).unwrap();
        assert_eq!(cfg.model.input_size, 96);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.backbone_source(), BackboneSource::RandomInit);

        let json_path = dir.path().join("c.json");
        cfg.save_json(&json_path).unwrap();
        assert_eq!(ExperimentConfig::load(&json_path).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"stem_chanels": 8}}"#).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
    }
}
