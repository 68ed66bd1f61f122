//! Run configuration: one TOML file covering every pipeline stage, with
//! unknown keys rejected. Command-line flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ovsed_core::decoder::ModelConfig;
use ovsed_core::eval::PsdsConfig;
use ovsed_core::frontend::FrontendConfig;
use ovsed_core::training::{SynthSpec, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_clips: usize,
    pub eval_clips: usize,
    /// Classes with at least this much annotated audio are common; the
    /// rest are rare (and become the held-out novel set in partial mode).
    pub rare_threshold_seconds: f64,
    /// Weight training clips by max inverse class frequency.
    pub resample: bool,
    pub spec: SynthSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            train_clips: 200,
            eval_clips: 48,
            rare_threshold_seconds: 360.0,
            resample: true,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub median_window: usize,
    pub dataset: DatasetSection,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: PsdsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            median_window: 5,
            dataset: DatasetSection::default(),
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: PsdsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Cross-section consistency on top of each section's own checks.
    pub fn validate(&self) -> Result<(), CliError> {
        self.frontend.validate().map_err(CliError::validation)?;
        self.model.validate().map_err(CliError::validation)?;
        self.dataset.spec.validate().map_err(CliError::validation)?;
        self.train.optimizer.validate().map_err(CliError::validation)?;
        self.train.loss.validate().map_err(CliError::validation)?;
        self.eval.validate().map_err(CliError::validation)?;
        if self.frontend.mel_bins != self.model.encoder.mel_bins {
            return Err(CliError::Validation(format!(
                "frontend mel_bins {} vs encoder mel_bins {}",
                self.frontend.mel_bins, self.model.encoder.mel_bins
            )));
        }
        let front_fps = 1.0 / self.frontend.hop_seconds();
        if (front_fps - self.model.encoder.mel_fps).abs() > 1e-6 {
            return Err(CliError::Validation(format!(
                "frontend frame rate {front_fps} vs encoder mel_fps {}",
                self.model.encoder.mel_fps
            )));
        }
        if self.frontend.sample_rate != self.dataset.spec.sample_rate {
            return Err(CliError::Validation(format!(
                "frontend sample rate {} vs dataset sample rate {}",
                self.frontend.sample_rate, self.dataset.spec.sample_rate
            )));
        }
        if self.median_window % 2 == 0 || self.median_window == 0 {
            return Err(CliError::Validation(format!(
                "median_window {} must be odd",
                self.median_window
            )));
        }
        if self.dataset.train_clips == 0 || self.dataset.eval_clips == 0 {
            return Err(CliError::Validation("clip counts must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out_dir.join("train")
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Validation(format!("cannot read config {}: {e}", p.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}
