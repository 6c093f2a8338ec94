use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{instruction::vocab_size, Catalog, DataConfig};
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::metrics::ClassifierTraining;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub p_uncond: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
    /// Relative to the work directory.
    pub dataset_dir: PathBuf,
    /// Relative to the work directory.
    pub checkpoint_dir: PathBuf,
    /// Capped at the validation split size.
    pub validation_subset_size: usize,
    pub validation_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 30,
            batch_size: 16,
            p_uncond: 0.1,
            seed: 0,
            sampler: SamplerConfig::default(),
            dataset_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            validation_subset_size: 1000,
            validation_steps: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.validation_subset_size == 0 || self.batch_size == 0 || self.validation_steps == 0 {
            return bad(
                "validation_subset_size, batch_size and validation_steps must be at least 1".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad(format!("p_uncond {} outside [0, 1]", self.p_uncond));
        }
        self.sampler.validate()
    }

    /// Sampler used during validation: the configured one with fewer steps.
    pub fn validation_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.validation_steps,
            ..self.sampler
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test items scored by `eval`; capped at the split size.
    pub subset_size: usize,
    /// Seeds averaged by `ablate-tstart`.
    pub ablation_seeds: usize,
    /// Test items per seed in `ablate-tstart`.
    pub ablation_items: usize,
    pub ablation_steps: usize,
    pub t_start_values: Vec<f64>,
    pub classifier_seed: u64,
    pub classifier: ClassifierTraining,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            subset_size: 300,
            ablation_seeds: 20,
            ablation_items: 16,
            ablation_steps: 50,
            t_start_values: vec![0.0, 0.001, 0.01, 0.1],
            classifier_seed: 0,
            classifier: ClassifierTraining::default(),
        }
    }
}

/// Everything a run depends on; serialised as TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let catalog = Catalog::standard(self.data.bins)?;
        if (self.model.frames, self.model.bins) != (self.data.frames, self.data.bins) {
            return Err(Error::Config(format!(
                "model latent {}x{} differs from data {}x{}",
                self.model.frames, self.model.bins, self.data.frames, self.data.bins
            )));
        }
        if self.model.vocab != vocab_size(&catalog) {
            return Err(Error::Config(format!(
                "model vocab {} but catalog needs {}",
                self.model.vocab,
                vocab_size(&catalog)
            )));
        }
        if self.eval.t_start_values.is_empty()
            || self.eval.ablation_seeds == 0
            || self.eval.ablation_items == 0
        {
            return Err(Error::Config(
                "ablation needs t_start values, seeds and items".into(),
            ));
        }
        for &t in &self.eval.t_start_values {
            SamplerConfig {
                t_start: t,
                ..self.train.sampler
            }
            .validate()?;
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
