use std::path::{Path, PathBuf};

use atmv_core::denoiser::DenoiserConfig;
use atmv_core::sampler::SamplerConfig;
use atmv_core::toydata::DatasetParams;
use atmv_core::trainer::{Stage, TrainConfig};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::CliError;

/// Periodic evaluation during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out clips sampled at every evaluation.
    pub clips: usize,
    pub frames: usize,
    /// DDIM steps used for evaluation samples.
    pub steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            clips: 4,
            frames: 8,
            steps: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetParams,
    /// Directory written by `gen-data`. Without it the clips are generated in
    /// memory from `dataset`.
    pub data_dir: Option<PathBuf>,
    pub denoiser: DenoiserConfig,
    pub spatial: TrainConfig,
    #[serde(deserialize_with = "temporal_section")]
    pub temporal: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetParams::default(),
            data_dir: None,
            denoiser: DenoiserConfig::default(),
            spatial: TrainConfig::for_stage(Stage::SpatialPretrain),
            temporal: TrainConfig::for_stage(Stage::Temporal),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// The temporal section defaults its `stage` to `temporal`.
fn temporal_section<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    let mut value = serde_json::Value::deserialize(d)?;
    if let Some(obj) = value.as_object_mut() {
        obj.entry("stage").or_insert_with(|| "temporal".into());
    }
    serde_json::from_value(value).map_err(serde::de::Error::custom)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stage(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::SpatialPretrain => &self.spatial,
            Stage::Temporal => &self.temporal,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.spatial.stage != Stage::SpatialPretrain || self.temporal.stage != Stage::Temporal {
            return Err(CliError::config("config sections `spatial` and `temporal` must keep their own stage"));
        }
        self.denoiser.validate()?;
        self.spatial.validate()?;
        self.temporal.validate()?;
        self.sampler.validate()?;
        let d = &self.dataset;
        if d.height % 2 != 0 || d.width % 2 != 0 {
            return Err(CliError::config(format!("frame size {}×{} must be even", d.height, d.width)));
        }
        if (d.height / 2, d.width / 2) != (self.denoiser.height, self.denoiser.width) {
            return Err(CliError::config(format!(
                "denoiser latent size {}×{} does not match {}×{} frames",
                self.denoiser.height, self.denoiser.width, d.height, d.width
            )));
        }
        if self.eval.clips == 0 || self.eval.frames == 0 || self.eval.steps == 0 {
            return Err(CliError::config("eval clips, frames and steps must be positive"));
        }
        Ok(())
    }
}
