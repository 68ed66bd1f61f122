//! Inference command: run the detector over a directory of WAVs and write
//! per-threshold detections plus a JSON summary at the midpoint threshold.

use std::path::{Path, PathBuf};

use serde::Serialize;

use ovsed_core::decoder::{build_mask, register_model_params};
use ovsed_core::eval::events_at_thresholds;
use ovsed_core::frontend::read_wav;
use ovsed_core::numerics::{load_checkpoint, sha256_file, ParamSet};
use ovsed_core::querybank::{assemble_inference_queries, load_store, query_matrix};
use ovsed_core::roster::EventRoster;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{clip_features, forward_scores, fused_hop_seconds};
use crate::config::RunConfig;
use crate::{CliError, MaskArg};

#[derive(Serialize)]
struct JsonEvent {
    class_id: String,
    onset: f64,
    offset: f64,
    score: f64,
}

#[derive(Serialize)]
struct JsonClip {
    clip_id: String,
    events: Vec<JsonEvent>,
    mask_strategy: String,
    checkpoint_hash: String,
}

fn sorted_wavs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Validation(format!("audio dir {}: {e}", dir.display())))?
        .filter_map(|r| r.ok().map(|d| d.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(CliError::Validation(format!(
            "no .wav files in {}",
            dir.display()
        )));
    }
    Ok(wavs)
}

pub fn run(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    queries: Option<&Path>,
    audio_dir: Option<&Path>,
    mask_arg: MaskArg,
) -> Result<(), CliError> {
    let tdir = cfg.train_dir();
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| tdir.join("checkpoint.ovck"));
    let store_path = queries
        .map(Path::to_path_buf)
        .unwrap_or_else(|| tdir.join("queries.ovqs"));
    let wav_dir = audio_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.dataset_dir().join("eval"));

    let store = load_store(&store_path).map_err(|e| {
        CliError::Validation(format!(
            "query store {} (run train first): {e}",
            store_path.display()
        ))
    })?;
    if store.dim() != 0 && store.dim() != cfg.model.decoder.dim {
        return Err(CliError::Validation(format!(
            "query store dimension {} does not match model dimension {}",
            store.dim(),
            cfg.model.decoder.dim
        )));
    }
    let combined = assemble_inference_queries(&store, store.novel())?;
    let classes: Vec<String> = combined.iter().map(|q| q.class_id.clone()).collect();
    let q_matrix = query_matrix(&combined)?;
    let mask = build_mask(
        store.base().len(),
        store.novel().len(),
        mask_arg.strategy(),
    );
    let mask_name = format!("{:?}", mask_arg.strategy());

    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    register_model_params(&cfg.model, &mut params, &mut rng)?;
    load_checkpoint(&mut params, &ckpt_path).map_err(|e| {
        CliError::Validation(format!("checkpoint {}: {e}", ckpt_path.display()))
    })?;
    let checkpoint_hash = sha256_file(&ckpt_path)?;

    let hop = fused_hop_seconds(&cfg.model);
    // The JSON summary reports the configured threshold closest to 0.5.
    let mid_tau = cfg
        .eval
        .thresholds
        .iter()
        .copied()
        .min_by(|a, b| {
            (a - 0.5).abs().partial_cmp(&(b - 0.5).abs()).unwrap()
        })
        .expect("validated nonempty thresholds");

    let mut per_threshold: Vec<(f64, EventRoster)> = cfg
        .eval
        .thresholds
        .iter()
        .map(|&t| (t, EventRoster::new()))
        .collect();
    let mut json_clips: Vec<JsonClip> = Vec::new();

    for wav in sorted_wavs(&wav_dir)? {
        let clip_id = wav
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Validation(format!("bad wav name {}", wav.display())))?
            .to_string();
        let wave = read_wav(&wav)?;
        let features = clip_features(&wave, &cfg.frontend, &cfg.model)?;
        let (frame_scores, _clip_scores) =
            forward_scores(&params, &cfg.model, features, &q_matrix, &mask)?;
        let rows = events_at_thresholds(
            &frame_scores,
            &classes,
            &cfg.eval.thresholds,
            hop,
            cfg.median_window,
        )?;
        let mut mid_events: Vec<JsonEvent> = Vec::new();
        for ((tau, dets), sink) in rows.into_iter().zip(per_threshold.iter_mut()) {
            debug_assert!((tau - sink.0).abs() < 1e-12);
            if (tau - mid_tau).abs() < 1e-12 {
                mid_events = dets
                    .iter()
                    .map(|d| JsonEvent {
                        class_id: d.class_id.clone(),
                        onset: d.onset,
                        offset: d.offset,
                        score: d.threshold,
                    })
                    .collect();
            }
            for d in dets {
                let label =
                    ovsed_core::roster::StrongLabel::new(&d.class_id, d.onset, d.offset)?;
                sink.1.push(&clip_id, label);
            }
        }
        json_clips.push(JsonClip {
            clip_id,
            events: mid_events,
            mask_strategy: mask_name.clone(),
            checkpoint_hash: checkpoint_hash.clone(),
        });
    }

    let out = cfg.out_dir.join("infer");
    std::fs::create_dir_all(&out)?;
    ovsed_core::eval::save_detections_tsv(&out.join("detections.tsv"), &per_threshold)?;
    std::fs::write(
        out.join("detections.json"),
        serde_json::to_string_pretty(&json_clips)?,
    )?;

    let n_events: usize = json_clips.iter().map(|c| c.events.len()).sum();
    println!(
        "inferred {} clips at {} thresholds ({} events at tau {:.2}); wrote {}",
        json_clips.len(),
        per_threshold.len(),
        n_events,
        mid_tau,
        out.join("detections.tsv").display()
    );
    Ok(())
}
