//! The run configuration document (TOML). Every field has a default, unknown
//! keys are rejected, and the hash of the resolved document is stamped on
//! every artifact.

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::DenoiserConfig;
use crate::sampler::SampleConfig;
use crate::scenegen::SceneConfig;
use crate::schedule::ScheduleConfig;
use crate::train::{TrainConfig, TrainSetup};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory. Not part of the hash.
    pub out: PathBuf,
    pub scene: SceneConfig,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            scene: SceneConfig::default(),
            schedule: ScheduleConfig::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let schedule = self.schedule.build()?;
        self.model.validate()?;
        self.train.validate(schedule.steps())?;
        self.sample.validate()?;
        self.eval.validate()?;
        if self.scene.image_size != self.model.image_size || self.scene.channels != self.model.image_channels {
            return Err(Error::Config(format!(
                "scene images are {}x{}x{} but the model expects {}x{}x{}",
                self.scene.channels,
                self.scene.image_size,
                self.scene.image_size,
                self.model.image_channels,
                self.model.image_size,
                self.model.image_size
            )));
        }
        Ok(())
    }

    /// The document with fields that do not affect results cleared.
    fn hashed_view(&self) -> RunConfig {
        RunConfig {
            out: PathBuf::new(),
            ..self.clone()
        }
    }

    /// SHA-256 (hex) of the canonical JSON encoding, output path excluded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.hashed_view()).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            seed: self.seed,
            scene: self.scene,
            schedule: self.schedule,
            model: self.model,
            train: self.train,
            config_hash: self.hash(),
            run_config: serde_json::to_value(self.hashed_view()).expect("config serializes"),
        }
    }
}
