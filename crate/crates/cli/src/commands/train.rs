//! Training command: label augmentation, the full/partial protocol split,
//! query-store construction, and the optimization run.

use std::io::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ovsed_core::decoder::register_model_params;
use ovsed_core::frontend::read_wav;
use ovsed_core::numerics::{save_checkpoint, sha256_file, ParamSet};
use ovsed_core::querybank::{build_text_query, query_matrix, save_store, QueryStore, Role};
use ovsed_core::roster::{label_augment, resample_weights, split_common_rare, strip_classes};
use ovsed_core::training::{prepare_sample, train, TrainSample};

use super::{claim_dir, load_dataset, wav_path};
use crate::config::RunConfig;
use crate::{AblationFlag, CliError, Protocol};

#[derive(Serialize)]
struct TrainSummary {
    protocol: &'static str,
    base_classes: Vec<String>,
    novel_classes: Vec<String>,
    steps: usize,
    final_loss: f64,
    final_frame_loss: f64,
    checkpoint_hash: String,
    dropped_clips: Vec<String>,
}

pub fn run(
    cfg: &RunConfig,
    protocol: Protocol,
    ablations: &[AblationFlag],
    force: bool,
) -> Result<(), CliError> {
    let tdir = cfg.train_dir();
    claim_dir(&tdir, force)?;
    let data = load_dataset(cfg)?;

    let aug = label_augment(&data.train_roster, &data.ontology);
    if !aug.dropped_clips.is_empty() {
        eprintln!(
            "warning: dropped {} clips with classes missing from the ontology",
            aug.dropped_clips.len()
        );
    }

    let mut all_classes = aug.roster.class_ids();
    all_classes.sort();
    let (base, novel, train_roster) = match protocol {
        Protocol::Full => (all_classes, Vec::new(), aug.roster.clone()),
        Protocol::Partial => {
            let (mut common, mut rare) =
                split_common_rare(&aug.roster, cfg.dataset.rare_threshold_seconds);
            common.sort();
            rare.sort();
            if common.is_empty() {
                return Err(CliError::Validation(format!(
                    "no classes reach {} s of audio; partial protocol needs base classes",
                    cfg.dataset.rare_threshold_seconds
                )));
            }
            let stripped = strip_classes(&aug.roster, &rare);
            (common, rare, stripped)
        }
    };

    let mut model = cfg.model.clone();
    let mut train_cfg = cfg.train;
    for a in ablations {
        match a {
            AblationFlag::NoEventDecoder => model.ablation.no_event_decoder = true,
            AblationFlag::NoContext => model.ablation.no_context = true,
            AblationFlag::NoClipPrior => model.ablation.no_clip_prior = true,
            AblationFlag::NoClipLoss => train_cfg.loss.clip_weight = 0.0,
        }
    }

    let provider =
        ovsed_core::querybank::StubProvider::new(model.decoder.dim, cfg.seed);
    let base_queries: Result<Vec<_>, _> = base
        .iter()
        .map(|c| build_text_query(c, Role::Base, &provider))
        .collect();
    let novel_queries: Result<Vec<_>, _> = novel
        .iter()
        .map(|c| build_text_query(c, Role::Novel, &provider))
        .collect();
    let store = QueryStore::new(base_queries?, novel_queries?)?;
    save_store(&store, &tdir.join("queries.ovqs"))?;
    let queries = query_matrix(store.base())?;

    let mut samples: Vec<TrainSample> = Vec::with_capacity(train_roster.clip_count());
    for (clip_id, labels) in train_roster.clips() {
        let wave = read_wav(&wav_path(&data.dir, "train", clip_id))?;
        samples.push(prepare_sample(
            clip_id,
            &wave,
            labels,
            &base,
            &cfg.frontend,
            &model,
        )?);
    }

    let weights: Option<Vec<f64>> = if cfg.dataset.resample {
        let w = resample_weights(&train_roster);
        for ((clip_id, _), s) in w.iter().zip(&samples) {
            assert_eq!(clip_id, &s.clip_id, "weight/sample order out of sync");
        }
        Some(w.into_iter().map(|(_, x)| x).collect())
    } else {
        None
    };

    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    register_model_params(&model, &mut params, &mut rng)?;

    let mut metrics = std::fs::File::create(tdir.join("metrics.jsonl"))?;
    let report = train(
        &mut params,
        &model,
        &queries,
        &samples,
        weights.as_deref(),
        &train_cfg,
        Some(&mut metrics),
    )?;
    metrics.flush()?;

    let ckpt = tdir.join("checkpoint.ovck");
    save_checkpoint(&params, &ckpt)?;
    let checkpoint_hash = sha256_file(&ckpt)?;

    let mut resolved = cfg.clone();
    resolved.model = model;
    resolved.train = train_cfg;
    let resolved_text = toml::to_string(&resolved)
        .map_err(|e| CliError::Runtime(format!("resolved config encode: {e}")))?;
    std::fs::write(tdir.join("resolved_config.toml"), resolved_text)?;

    let last = report.metrics.last().expect("steps > 0");
    let summary = TrainSummary {
        protocol: match protocol {
            Protocol::Full => "full",
            Protocol::Partial => "partial",
        },
        base_classes: base,
        novel_classes: novel,
        steps: train_cfg.steps,
        final_loss: last.loss,
        final_frame_loss: last.frame_loss,
        checkpoint_hash: checkpoint_hash.clone(),
        dropped_clips: aug.dropped_clips,
    };
    std::fs::write(
        tdir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    println!(
        "trained {} steps; loss {:.4} -> {:.4}; checkpoint {} ({})",
        train_cfg.steps,
        report.first_loss(),
        report.last_loss(),
        ckpt.display(),
        &checkpoint_hash[..12]
    );
    Ok(())
}
