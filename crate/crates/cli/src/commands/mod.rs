//! Subcommand implementations plus the plumbing they share: the dataset
//! manifest, output-directory guards, and the per-clip forward pass.

pub mod eval_cmd;
pub mod gen;
pub mod infer;
pub mod selftest;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ovsed_core::decoder::{detector_forward, ModelConfig, QueryAttentionMask};
use ovsed_core::frontend::{log_mel, FrontendConfig, Waveform};
use ovsed_core::numerics::{Graph, ParamSet, Tensor};
use ovsed_core::roster::{EventRoster, Ontology};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;

/// What `gen` wrote, recorded alongside the data for reproducibility.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub train_clips: Vec<String>,
    pub eval_clips: Vec<String>,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Validation(format!(
                "no dataset manifest at {} (run gen first): {e}",
                path.display()
            ))
        })?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(CliError::Validation(format!(
                "manifest version {} unsupported (want {MANIFEST_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn eval_seconds(&self) -> f64 {
        self.eval_clips.len() as f64 * self.clip_seconds
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless forced.
pub fn claim_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Validation(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub struct Dataset {
    pub manifest: Manifest,
    pub train_roster: EventRoster,
    pub eval_roster: EventRoster,
    pub ontology: Ontology,
    pub dir: PathBuf,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dir = cfg.dataset_dir();
    let manifest = Manifest::load(&dir)?;
    let train_roster = EventRoster::load_tsv(&dir.join("roster_train.tsv"))?;
    let eval_roster = EventRoster::load_tsv(&dir.join("roster_eval.tsv"))?;
    let ontology = Ontology::load_tsv(&dir.join("ontology.tsv"))?;
    Ok(Dataset {
        manifest,
        train_roster,
        eval_roster,
        ontology,
        dir,
    })
}

pub fn wav_path(dataset_dir: &Path, split: &str, clip_id: &str) -> PathBuf {
    dataset_dir.join(split).join(format!("{clip_id}.wav"))
}

/// Mel features trimmed to a whole number of coarse patches.
pub fn clip_features(
    wave: &Waveform,
    front: &FrontendConfig,
    model: &ModelConfig,
) -> Result<Tensor, CliError> {
    let mel = log_mel(wave, front)?;
    let frames = mel.values.shape()[0];
    let patch = model.encoder.patch_time;
    let keep = frames - frames % patch;
    if keep == 0 {
        return Err(CliError::Validation(format!(
            "clip too short: {frames} mel frames, need at least {patch}"
        )));
    }
    if keep == frames {
        return Ok(mel.values);
    }
    let bins = mel.values.shape()[1];
    let vals = mel.values.data()[..keep * bins].to_vec();
    Ok(Tensor::from_values(&[keep, bins], &vals).expect("consistent shape"))
}

/// One forward pass; returns frame scores [T x N] and clip scores [N].
pub fn forward_scores(
    params: &ParamSet,
    model: &ModelConfig,
    features: Tensor,
    queries: &Tensor,
    mask: &QueryAttentionMask,
) -> Result<(Tensor, Tensor), CliError> {
    let mut g = Graph::new();
    let mel_node = g.constant(features);
    let q_node = g.constant(queries.clone());
    let pred = detector_forward(&mut g, params, mel_node, q_node, mask, model)?;
    Ok((g.value(pred.frame).clone(), g.value(pred.clip).clone()))
}

/// Seconds per fused frame for event extraction.
pub fn fused_hop_seconds(model: &ModelConfig) -> f64 {
    model.encoder.time_pool() as f64 / model.encoder.mel_fps
}
