//! Audio-query duration sweep: rebuild each novel class's query from real
//! event crops of varying total length and score the rare subset at each
//! budget.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ovsed_core::decoder::{build_mask, register_model_params, MaskStrategy};
use ovsed_core::eval::{events_at_thresholds, psds};
use ovsed_core::frontend::{log_mel, read_wav, MelSpectrogram, Waveform};
use ovsed_core::numerics::{load_checkpoint, ParamSet};
use ovsed_core::querybank::{
    assemble_inference_queries, build_audio_query, load_store, query_matrix, QueryVector, Role,
    StubProvider,
};
use ovsed_core::roster::{label_augment, EventRoster, StrongLabel};

use super::{clip_features, forward_scores, fused_hop_seconds, load_dataset, wav_path, Dataset};
use crate::config::RunConfig;
use crate::plot::{line_chart, Series};
use crate::CliError;

/// Where one class is audible: split, clip, and the event span.
struct Crop {
    split: &'static str,
    clip_id: String,
    onset: f64,
    offset: f64,
}

fn collect_crops(roster: &EventRoster, split: &'static str, class_id: &str, out: &mut Vec<Crop>) {
    for (clip_id, events) in roster.clips() {
        for e in events {
            if e.class_id == class_id {
                out.push(Crop {
                    split,
                    clip_id: clip_id.to_string(),
                    onset: e.onset,
                    offset: e.offset,
                });
            }
        }
    }
}

fn crop_mel(
    data: &Dataset,
    crop: &Crop,
    cfg: &RunConfig,
) -> Result<MelSpectrogram, CliError> {
    let wave = read_wav(&wav_path(&data.dir, crop.split, &crop.clip_id))?;
    let sr = wave.sample_rate as f64;
    let a = (crop.onset * sr).round() as usize;
    let b = ((crop.offset * sr).round() as usize).min(wave.samples.len());
    if b <= a {
        return Err(CliError::Runtime(format!(
            "empty crop {} [{}, {})",
            crop.clip_id, crop.onset, crop.offset
        )));
    }
    let seg = Waveform::new(wave.samples[a..b].to_vec(), wave.sample_rate)?;
    Ok(log_mel(&seg, &cfg.frontend)?)
}

pub fn run(
    cfg: &RunConfig,
    durations: &[f64],
    checkpoint: Option<&Path>,
    queries: Option<&Path>,
) -> Result<(), CliError> {
    for &d in durations {
        if !d.is_finite() || d <= 0.0 {
            return Err(CliError::Validation(format!(
                "query durations must be positive seconds, got {d}"
            )));
        }
    }

    let tdir = cfg.train_dir();
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| tdir.join("checkpoint.ovck"));
    let store_path = queries
        .map(Path::to_path_buf)
        .unwrap_or_else(|| tdir.join("queries.ovqs"));

    let store = load_store(&store_path).map_err(|e| {
        CliError::Validation(format!(
            "query store {} (run train first): {e}",
            store_path.display()
        ))
    })?;
    if store.novel().is_empty() {
        return Err(CliError::Validation(
            "query store has no novel classes; train with --protocol partial first".into(),
        ));
    }
    if store.dim() != 0 && store.dim() != cfg.model.decoder.dim {
        return Err(CliError::Validation(format!(
            "query store dimension {} does not match model dimension {}",
            store.dim(),
            cfg.model.decoder.dim
        )));
    }
    let novel_classes: Vec<String> =
        store.novel().iter().map(|q| q.class_id.clone()).collect();

    let data = load_dataset(cfg)?;
    // Augmented rosters so ancestor classes inherit their descendants'
    // event spans, both for scoring and for query-audio harvesting.
    let train_aug = label_augment(&data.train_roster, &data.ontology).roster;
    let refs = label_augment(&data.eval_roster, &data.ontology).roster;
    let ref_classes: BTreeSet<String> = refs.class_ids().into_iter().collect();
    let scored: Vec<String> = novel_classes
        .iter()
        .filter(|c| ref_classes.contains(*c))
        .cloned()
        .collect();
    if scored.is_empty() {
        return Err(CliError::Validation(
            "no novel class appears in the evaluation references".into(),
        ));
    }

    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    register_model_params(&cfg.model, &mut params, &mut rng)?;
    load_checkpoint(&mut params, &ckpt_path).map_err(|e| {
        CliError::Validation(format!("checkpoint {}: {e}", ckpt_path.display()))
    })?;

    let provider = StubProvider::new(cfg.model.decoder.dim, cfg.seed);
    let hop = fused_hop_seconds(&cfg.model);
    let dataset_seconds = data.manifest.eval_seconds();
    let mask = build_mask(
        store.base().len(),
        novel_classes.len(),
        MaskStrategy::BaseVisibleToNovel,
    );

    // Eval features are fixed across durations; compute them once.
    let mut eval_feats: Vec<(String, ovsed_core::numerics::Tensor)> = Vec::new();
    for (clip_id, _) in data.eval_roster.clips() {
        let wave = read_wav(&wav_path(&data.dir, "eval", clip_id))?;
        eval_feats.push((
            clip_id.to_string(),
            clip_features(&wave, &cfg.frontend, &cfg.model)?,
        ));
    }

    let mut rows: Vec<(f64, f64)> = Vec::new();
    for (di, &dur) in durations.iter().enumerate() {
        let mut novel_queries: Vec<QueryVector> = Vec::with_capacity(novel_classes.len());
        for class_id in &novel_classes {
            let mut crops = Vec::new();
            collect_crops(&train_aug, "train", class_id, &mut crops);
            collect_crops(&refs, "eval", class_id, &mut crops);
            if crops.is_empty() {
                return Err(CliError::Validation(format!(
                    "no audio examples of novel class {class_id} in the dataset"
                )));
            }
            let mut pick_rng =
                ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(di as u64));
            crops.shuffle(&mut pick_rng);
            let mut segments: Vec<MelSpectrogram> = Vec::new();
            let mut total = 0.0;
            for crop in &crops {
                if total >= dur {
                    break;
                }
                segments.push(crop_mel(&data, crop, cfg)?);
                total += crop.offset - crop.onset;
            }
            if total < dur {
                eprintln!(
                    "warning: {class_id} has only {total:.1} s of audio, requested {dur:.1} s"
                );
            }
            novel_queries.push(build_audio_query(class_id, Role::Novel, &segments, &provider)?);
        }

        let combined = assemble_inference_queries(&store, &novel_queries)?;
        let classes: Vec<String> = combined.iter().map(|q| q.class_id.clone()).collect();
        let q_matrix = query_matrix(&combined)?;

        let mut per_threshold: Vec<(f64, EventRoster)> = cfg
            .eval
            .thresholds
            .iter()
            .map(|&t| (t, EventRoster::new()))
            .collect();
        for (clip_id, feats) in &eval_feats {
            let (frame_scores, _) =
                forward_scores(&params, &cfg.model, feats.clone(), &q_matrix, &mask)?;
            let dets = events_at_thresholds(
                &frame_scores,
                &classes,
                &cfg.eval.thresholds,
                hop,
                cfg.median_window,
            )?;
            for ((_, events), sink) in dets.into_iter().zip(per_threshold.iter_mut()) {
                for e in events {
                    sink.1
                        .push(clip_id, StrongLabel::new(&e.class_id, e.onset, e.offset)?);
                }
            }
        }

        let report = psds(&per_threshold, &refs, &scored, dataset_seconds, &cfg.eval)?;
        rows.push((dur, report.score));
    }

    let out = cfg.out_dir.join("sweep");
    std::fs::create_dir_all(&out)?;
    let mut tsv = String::from("duration_seconds\tpsds_rare\n");
    for (d, s) in &rows {
        tsv.push_str(&format!("{d}\t{s}\n"));
    }
    std::fs::write(out.join("sweep.tsv"), &tsv)?;
    let svg = line_chart(
        "Rare-class score vs audio query duration",
        "total query audio (s)",
        "psds (rare)",
        &[Series {
            name: "rare".to_string(),
            points: rows.clone(),
        }],
    );
    std::fs::write(out.join("sweep.svg"), svg)?;

    println!("duration_s\tpsds_rare");
    for (d, s) in &rows {
        println!("{d:.1}\t{s:.4}");
    }
    Ok(())
}
