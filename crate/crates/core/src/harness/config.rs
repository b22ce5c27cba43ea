//! Experiment configuration: one TOML document with a section per module.
//! Every key is optional; missing keys take the documented defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::TaskConfig;
use crate::error::{M3Error, Result};
use crate::roofline::RooflineConfig;
use crate::toy_lmm::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pyramid,
    Train,
    Evaluate,
    Oracle,
    Roofline,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Pyramid, Stage::Train, Stage::Evaluate, Stage::Oracle, Stage::Roofline];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pyramid => "pyramid",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Oracle => "oracle",
            Stage::Roofline => "roofline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run id; empty means `run-<first 12 hex digits of the config hash>`.
    pub name: String,
    /// Dataset seed.
    pub seed: u64,
    pub stages: Vec<Stage>,
    /// Text tokens appended to the visual tokens in the cost table.
    pub text_tokens: usize,
    /// Visual-token counts of the cost table rows.
    pub roofline_tokens: Vec<usize>,
    /// Test instances per question kind used for evaluation (capped by `data.test_per_kind`).
    pub eval_per_kind: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            seed: 0,
            stages: Stage::ALL.to_vec(),
            text_tokens: 30,
            roofline_tokens: vec![576, 144, 36, 9, 1],
            eval_per_kind: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub roofline: RooflineConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = TaskConfig::default();
        let model = ModelConfig {
            vocab: 64,
            encoder_grid: data.grid,
            patch_size: data.patch,
            image_channels: data.image_channels(),
            ..ModelConfig::default()
        };
        Self { data, model, train: TrainConfig::default(), roofline: RooflineConfig::default(), run: RunConfig::default() }
    }
}

/// Longest question plus answer the synthetic task produces, minus the
/// final answer token (which is never fed back).
const TEXT_TOKENS: usize = 4 + 2 - 1;

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| M3Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| M3Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| M3Error::Config(e.to_string()))
    }

    /// Sets the dataset and training seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Checks every section and the cross-section consistency between the
    /// synthetic task and the model shapes.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.roofline.validate()?;
        let (d, m) = (&self.data, &self.model);
        if m.encoder_grid != d.grid || m.patch_size != d.patch || m.image_channels != d.image_channels() {
            return Err(M3Error::Config(format!(
                "model expects a {}x{} grid of {}-pixel patches with {} channels; data gives {}x{}, {}, {}",
                m.encoder_grid, m.encoder_grid, m.patch_size, m.image_channels, d.grid, d.grid, d.patch,
                d.image_channels()
            )));
        }
        let vocab = d.vocabulary().size();
        if m.vocab < vocab {
            return Err(M3Error::Config(format!("model.vocab {} is smaller than the task vocabulary {vocab}", m.vocab)));
        }
        let need = d.grid * d.grid + TEXT_TOKENS;
        if m.max_seq < need {
            return Err(M3Error::Config(format!("model.max_seq {} is below the {need} positions the task needs", m.max_seq)));
        }
        if self.run.stages.is_empty() {
            return Err(M3Error::Config("run.stages is empty".into()));
        }
        if self.run.eval_per_kind == 0 {
            return Err(M3Error::Config("run.eval_per_kind must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; the identity of a run's inputs.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn run_id(&self) -> String {
        if self.run.name.is_empty() {
            format!("run-{}", &self.hash()[..12])
        } else {
            self.run.name.clone()
        }
    }

    pub fn runs(&self, stage: Stage) -> bool {
        self.run.stages.contains(&stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_roundtrips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn partial_sections_override_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "[train]\nsteps = 3\nmode = \"random-scale\"\n[train.optimizer]\nstep_size = 0.001\n[run]\nstages = [\"roofline\"]\n",
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.mode, crate::training::ScaleMode::RandomScale);
        assert_eq!(cfg.train.optimizer.step_size, 0.001);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert!(cfg.runs(Stage::Roofline) && !cfg.runs(Stage::Train));
    }

    #[test]
    fn rejects_unknown_keys_and_mismatches() {
        assert!(ExperimentConfig::from_toml_str("[train]\nstep = 3\n").is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.image_channels = 3;
        assert!(matches!(cfg.validate(), Err(M3Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.model.max_seq = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = a.clone().with_seed(7);
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert!(a.run_id().starts_with("run-"));
    }
}
