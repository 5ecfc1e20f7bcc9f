use std::path::{Path, PathBuf};

use pva_core::dataset::BuilderConfig;
use pva_core::diffusion::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use pva_core::diffusion::{NoiseSchedule, SamplerConfig};
use pva_core::eval::{AttributeConfig, EvalConfig};
use pva_core::identity::RecognizerConfig;
use pva_core::model::DenoiserConfig;
use pva_core::train::{Phase, TrainConfig};
use pva_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub builder: BuilderConfig,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub recognizer: RecognizerConfig,
    pub attributes: AttributeConfig,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub finetune: TrainConfig,
    pub sampler: SamplerConfig,
    pub evaluator: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths {
                dataset: "data".into(),
                checkpoints: "checkpoints".into(),
                output: "out".into(),
            },
            builder: BuilderConfig::default(),
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END },
            recognizer: RecognizerConfig::default(),
            attributes: AttributeConfig::default(),
            pretrain: TrainConfig::toy(Phase::PretrainBase),
            stage1: TrainConfig::toy(Phase::PvaStage1),
            stage2: TrainConfig::toy(Phase::PvaStage2),
            finetune: TrainConfig::toy(Phase::Finetune),
            sampler: SamplerConfig::default(),
            evaluator: EvalConfig::default(),
        }
    }
}

/// Recursively overlays `user` on `base`; objects merge key by key, anything else replaces.
fn overlay(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a user file over the defaults; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(RunConfig::default())?;
        overlay(&mut merged, user);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (block, phase) in [
            (&self.pretrain, Phase::PretrainBase),
            (&self.stage1, Phase::PvaStage1),
            (&self.stage2, Phase::PvaStage2),
            (&self.finetune, Phase::Finetune),
        ] {
            if block.phase != phase {
                return Err(Error::Config(format!("{phase} block declares phase {}", block.phase)));
            }
            block.validate()?;
        }
        if self.builder.extent != self.model.image_size {
            return Err(Error::Config(format!(
                "builder extent {} differs from model image_size {}",
                self.builder.extent, self.model.image_size
            )));
        }
        self.evaluator.validate()?;
        self.schedule.build().map(|_| ()).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates the global seed into every seeded block.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.builder.seed = seed;
        for b in [&mut self.pretrain, &mut self.stage1, &mut self.stage2, &mut self.finetune] {
            b.seed = seed;
        }
        self.sampler.seed = seed;
        self.evaluator.seed = seed;
        self
    }
}
