//! Scoring command: match stored detections against references and report
//! the detection score over all classes and the common/rare splits.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use ovsed_core::eval::{load_detections_tsv, psds, save_roc_jsonl, PsdsReport};
use ovsed_core::roster::{label_augment, split_common_rare, EventRoster, Ontology};

use super::Manifest;
use crate::config::RunConfig;
use crate::plot::{line_chart, timeline_chart, Series, TimelineRow};
use crate::{CliError, EvalMode, SubsetArg};

#[derive(Serialize)]
struct SubsetReport {
    classes: Vec<String>,
    score: f64,
}

#[derive(Serialize)]
struct EvalReportJson {
    mode: &'static str,
    dataset_seconds: f64,
    all: Option<SubsetReport>,
    common: Option<SubsetReport>,
    rare: Option<SubsetReport>,
}

fn score_subset(
    per_threshold: &[(f64, EventRoster)],
    refs: &EventRoster,
    classes: Vec<String>,
    dataset_seconds: f64,
    cfg: &ovsed_core::eval::PsdsConfig,
) -> Result<Option<(SubsetReport, PsdsReport)>, CliError> {
    if classes.is_empty() {
        return Ok(None);
    }
    let report = psds(per_threshold, refs, &classes, dataset_seconds, cfg)?;
    Ok(Some((
        SubsetReport {
            classes,
            score: report.score,
        },
        report,
    )))
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    cfg: &RunConfig,
    detections: Option<&Path>,
    references: Option<&Path>,
    mode: EvalMode,
    subset: SubsetArg,
    dataset_seconds: Option<f64>,
    timelines: bool,
) -> Result<(), CliError> {
    let det_path = detections
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("infer").join("detections.tsv"));
    let ref_path = references
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.dataset_dir().join("roster_eval.tsv"));

    let per_threshold = load_detections_tsv(&det_path).map_err(|e| {
        CliError::Validation(format!("detections {}: {e}", det_path.display()))
    })?;
    let raw_refs = EventRoster::load_tsv(&ref_path).map_err(|e| {
        CliError::Validation(format!("references {}: {e}", ref_path.display()))
    })?;

    // References get the same ancestor expansion the training labels got,
    // so hierarchy-level detections score against hierarchy-level truth.
    let onto_path = cfg.dataset_dir().join("ontology.tsv");
    let refs = if onto_path.exists() {
        let onto = Ontology::load_tsv(&onto_path)?;
        let aug = label_augment(&raw_refs, &onto);
        if !aug.dropped_clips.is_empty() {
            eprintln!(
                "warning: {} reference clips dropped (classes outside the ontology)",
                aug.dropped_clips.len()
            );
        }
        aug.roster
    } else {
        raw_refs
    };

    let ref_classes: BTreeSet<String> = refs.class_ids().into_iter().collect();
    let mut unknown: BTreeSet<String> = BTreeSet::new();
    for (_, roster) in &per_threshold {
        for c in roster.class_ids() {
            if !ref_classes.contains(&c) {
                unknown.insert(c);
            }
        }
    }
    // Not an error: a detector may query classes the (small) reference set
    // never exhibits. Those detections are simply not scored.
    if !unknown.is_empty() {
        eprintln!(
            "warning: detections contain classes with no reference events: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        );
    }

    let dataset_seconds = match dataset_seconds {
        Some(s) if s > 0.0 => s,
        Some(s) => {
            return Err(CliError::Validation(format!(
                "dataset_seconds must be positive, got {s}"
            )))
        }
        None => Manifest::load(&cfg.dataset_dir())
            .map_err(|_| {
                CliError::Validation(
                    "no dataset manifest found; pass --dataset-seconds".into(),
                )
            })?
            .eval_seconds(),
    };

    let mut psds_cfg = cfg.eval.clone();
    let mode_name = match mode {
        EvalMode::As => {
            psds_cfg.alpha_st = 0.0;
            "as"
        }
        EvalMode::Desed => {
            psds_cfg.alpha_st = 1.0;
            "desed"
        }
    };

    let all_classes: Vec<String> = ref_classes.iter().cloned().collect();
    let (mut common, mut rare) = split_common_rare(&refs, cfg.dataset.rare_threshold_seconds);
    common.sort();
    rare.sort();

    let all = score_subset(&per_threshold, &refs, all_classes, dataset_seconds, &psds_cfg)?;
    let common = score_subset(&per_threshold, &refs, common, dataset_seconds, &psds_cfg)?;
    let rare = score_subset(&per_threshold, &refs, rare, dataset_seconds, &psds_cfg)?;

    let out = cfg.out_dir.join("eval");
    std::fs::create_dir_all(&out)?;

    let picked = match subset {
        SubsetArg::All => all.as_ref(),
        SubsetArg::Common => common.as_ref(),
        SubsetArg::Rare => rare.as_ref(),
    };
    if let Some((_, report)) = picked {
        save_roc_jsonl(&out.join("roc.jsonl"), report)?;
        let points: Vec<(f64, f64)> = report
            .roc
            .iter()
            .map(|p| (p.efpr, p.etpr))
            .collect();
        if !points.is_empty() {
            let svg = line_chart(
                "Detection ROC",
                "eFPR (per hour)",
                "eTPR",
                &[Series {
                    name: subset_name(subset).to_string(),
                    points,
                }],
            );
            std::fs::write(out.join("roc.svg"), svg)?;
        }
    } else {
        return Err(CliError::Validation(format!(
            "subset {} has no scored classes",
            subset_name(subset)
        )));
    }

    if timelines {
        write_timelines(&out, &per_threshold, &refs)?;
    }

    let report_json = EvalReportJson {
        mode: mode_name,
        dataset_seconds,
        all: all.map(|(s, _)| s),
        common: common.map(|(s, _)| s),
        rare: rare.map(|(s, _)| s),
    };
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report_json)?,
    )?;

    let fmt = |r: &Option<SubsetReport>| match r {
        Some(s) => format!("{:.4} ({} classes)", s.score, s.classes.len()),
        None => "n/a".to_string(),
    };
    println!("mode {mode_name}, {dataset_seconds:.0} s of audio");
    println!("psds all    {}", fmt(&report_json.all));
    println!("psds common {}", fmt(&report_json.common));
    println!("psds rare   {}", fmt(&report_json.rare));
    Ok(())
}

fn subset_name(s: SubsetArg) -> &'static str {
    match s {
        SubsetArg::All => "all",
        SubsetArg::Common => "common",
        SubsetArg::Rare => "rare",
    }
}

/// First clips side by side: gray reference bars, outlined detections at
/// the threshold nearest 0.5.
fn write_timelines(
    out: &Path,
    per_threshold: &[(f64, EventRoster)],
    refs: &EventRoster,
) -> Result<(), CliError> {
    let mid = per_threshold
        .iter()
        .min_by(|a, b| {
            (a.0 - 0.5)
                .abs()
                .partial_cmp(&(b.0 - 0.5).abs())
                .expect("finite thresholds")
        })
        .ok_or_else(|| CliError::Validation("no detection thresholds".into()))?;
    let mut rows: Vec<TimelineRow> = Vec::new();
    let mut total = 0.0f64;
    for (clip_id, ref_events) in refs.clips().take(8) {
        let det_events = mid.1.clip_events(clip_id).unwrap_or(&[]);
        for e in ref_events.iter().chain(det_events) {
            total = total.max(e.offset);
        }
        rows.push(TimelineRow {
            label: clip_id.to_string(),
            ref_spans: ref_events.iter().map(|e| (e.onset, e.offset)).collect(),
            det_spans: det_events.iter().map(|e| (e.onset, e.offset)).collect(),
        });
    }
    let svg = timeline_chart(
        &format!("Detections at tau {:.2}", mid.0),
        total,
        &rows,
    );
    std::fs::write(out.join("timelines.svg"), svg)?;
    Ok(())
}
