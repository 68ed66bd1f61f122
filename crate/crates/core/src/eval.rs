//! Post-processing and scoring: median smoothing of frame posteriors,
//! threshold-and-merge event extraction, intersection-based matching, and
//! the polyphonic detection score over a bank of operating points.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::roster::{EventRoster, RosterError, StrongLabel};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Roster(#[from] RosterError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("encode: {0}")]
    Json(#[from] serde_json::Error),
}

/// One extracted event together with the operating threshold it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedEvent {
    pub class_id: String,
    pub onset: f64,
    pub offset: f64,
    pub threshold: f64,
}

/// Scoring parameters. `alpha_st` is 0 in the multi-label large-vocabulary
/// mode and 1 in the strict style that penalizes cross-class variance.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsdsConfig {
    pub dtc: f64,
    pub gtc: f64,
    pub cttc: f64,
    pub alpha_ct: f64,
    pub alpha_st: f64,
    pub e_max_per_hour: f64,
    pub thresholds: Vec<f64>,
}

impl Default for PsdsConfig {
    fn default() -> Self {
        PsdsConfig {
            dtc: 0.7,
            gtc: 0.7,
            cttc: 0.3,
            alpha_ct: 0.0,
            alpha_st: 0.0,
            e_max_per_hour: 100.0,
            thresholds: default_thresholds(),
        }
    }
}

/// 50 uniform operating points strictly inside (0.01, 0.99).
pub fn default_thresholds() -> Vec<f64> {
    let (lo, hi, n) = (0.01, 0.99, 50);
    (1..=n).map(|k| lo + k as f64 * (hi - lo) / (n + 1) as f64).collect()
}

impl PsdsConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, v) in [("dtc", self.dtc), ("gtc", self.gtc), ("cttc", self.cttc)] {
            if !(0.0 < v && v <= 1.0) {
                return Err(EvalError::Config(format!("{name} {v} outside (0, 1]")));
            }
        }
        if self.alpha_ct < 0.0 || self.alpha_st < 0.0 {
            return Err(EvalError::Config("alpha terms must be nonnegative".into()));
        }
        if self.e_max_per_hour <= 0.0 {
            return Err(EvalError::Config("e_max must be positive".into()));
        }
        if self.thresholds.len() < 2 {
            return Err(EvalError::Config(format!(
                "need at least 2 operating points, got {}",
                self.thresholds.len()
            )));
        }
        for t in &self.thresholds {
            if !(0.0 < *t && *t < 1.0) {
                return Err(EvalError::Config(format!("threshold {t} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Smoothing and extraction
// ---------------------------------------------------------------------------

/// Per-class sliding median with edge replication. The window must be odd
/// and no longer than the sequence.
pub fn median_filter(scores: &Tensor, window: usize) -> Result<Tensor, EvalError> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(EvalError::Input(format!("scores must be rank 2, got {shape:?}")));
    }
    let (t, n) = (shape[0], shape[1]);
    if window % 2 == 0 || window == 0 {
        return Err(EvalError::Config(format!("median window {window} must be odd")));
    }
    if window > t {
        return Err(EvalError::Config(format!(
            "median window {window} exceeds {t} frames"
        )));
    }
    let half = window / 2;
    let mut out = vec![0.0; t * n];
    let mut buf = vec![0.0; window];
    for c in 0..n {
        for ti in 0..t {
            for (k, slot) in buf.iter_mut().enumerate() {
                let idx = (ti + k).saturating_sub(half).min(t - 1);
                *slot = scores.at2(idx, c);
            }
            buf.sort_by(f64::total_cmp);
            out[ti * n + c] = buf[half];
        }
    }
    Ok(Tensor::from_values(&[t, n], &out).expect("consistent shape"))
}

/// Maximal runs of frames scoring at or above the threshold become events;
/// the onset is the first frame's start, the offset the last frame's end.
pub fn extract_events(
    scores: &Tensor,
    classes: &[String],
    threshold: f64,
    hop_seconds: f64,
) -> Result<Vec<DetectedEvent>, EvalError> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[1] != classes.len() {
        return Err(EvalError::Input(format!(
            "scores {shape:?} vs {} classes",
            classes.len()
        )));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(EvalError::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    if hop_seconds <= 0.0 {
        return Err(EvalError::Config(format!("hop {hop_seconds} must be positive")));
    }
    let t = shape[0];
    let mut out = Vec::new();
    for (c, class) in classes.iter().enumerate() {
        let mut run_start: Option<usize> = None;
        for ti in 0..=t {
            let active = ti < t && scores.at2(ti, c) >= threshold;
            match (active, run_start) {
                (true, None) => run_start = Some(ti),
                (false, Some(s)) => {
                    out.push(DetectedEvent {
                        class_id: class.clone(),
                        onset: s as f64 * hop_seconds,
                        offset: ti as f64 * hop_seconds,
                        threshold,
                    });
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Smooths once, then extracts events at every threshold. Returns pairs of
/// (threshold, events) in the given threshold order.
pub fn events_at_thresholds(
    scores: &Tensor,
    classes: &[String],
    thresholds: &[f64],
    hop_seconds: f64,
    median_window: usize,
) -> Result<Vec<(f64, Vec<DetectedEvent>)>, EvalError> {
    let filtered = median_filter(scores, median_window)?;
    thresholds
        .iter()
        .map(|&tau| Ok((tau, extract_events(&filtered, classes, tau, hop_seconds)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// Per-class true-positive and false-positive counts at one operating point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchCounts {
    pub tp: BTreeMap<String, usize>,
    pub fp: BTreeMap<String, usize>,
}

fn overlap(a: &StrongLabel, b: &StrongLabel) -> f64 {
    (a.offset.min(b.offset) - a.onset.max(b.onset)).max(0.0)
}

/// Intersection matching: a detection is valid when its total same-class,
/// same-clip intersection with references covers at least `dtc` of its own
/// duration; a reference counts as detected when valid detections cover at
/// least `gtc` of it. Invalid detections count as false positives.
pub fn match_events(dets: &EventRoster, refs: &EventRoster, dtc: f64, gtc: f64) -> MatchCounts {
    let mut counts = MatchCounts::default();
    let mut clip_ids: Vec<&str> = dets.clips().map(|(id, _)| id).collect();
    for (id, _) in refs.clips() {
        if !clip_ids.contains(&id) {
            clip_ids.push(id);
        }
    }
    for clip_id in clip_ids {
        let d_events = dets.clip_events(clip_id).unwrap_or(&[]);
        let r_events = refs.clip_events(clip_id).unwrap_or(&[]);
        let mut classes: Vec<&str> = d_events.iter().map(|e| e.class_id.as_str()).collect();
        classes.extend(r_events.iter().map(|e| e.class_id.as_str()));
        classes.sort_unstable();
        classes.dedup();
        for class in classes {
            let ds: Vec<&StrongLabel> =
                d_events.iter().filter(|e| e.class_id == class).collect();
            let rs: Vec<&StrongLabel> =
                r_events.iter().filter(|e| e.class_id == class).collect();
            let valid: Vec<bool> = ds
                .iter()
                .map(|d| {
                    let covered: f64 = rs.iter().map(|r| overlap(d, r)).sum();
                    covered >= dtc * d.duration()
                })
                .collect();
            for (&d, &ok) in ds.iter().zip(&valid) {
                if !ok {
                    *counts.fp.entry(d.class_id.clone()).or_insert(0) += 1;
                }
            }
            for r in &rs {
                let covered: f64 = ds
                    .iter()
                    .zip(&valid)
                    .filter(|(_, &ok)| ok)
                    .map(|(d, _)| overlap(d, r))
                    .sum();
                if covered >= gtc * r.duration() {
                    *counts.tp.entry(r.class_id.clone()).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// PSDS
// ---------------------------------------------------------------------------

/// Raw effective rates at one operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub efpr: f64,
    pub etpr: f64,
}

#[derive(Clone, Debug)]
pub struct PsdsReport {
    pub score: f64,
    pub roc: Vec<RocPoint>,
}

/// Polyphonic detection score over pre-extracted per-threshold rosters.
///
/// Scored classes are the subset classes that carry at least one reference
/// event; detections of any other class are ignored. Per operating point
/// the effective TPR is the class mean of TP/N_ref minus `alpha_st` times
/// the population standard deviation, and the effective FPR is the class
/// mean of FP * 3600 / dataset_seconds. The ROC over the points is made
/// monotone by a running maximum and integrated as a step function from 0
/// to `e_max`, normalized by `e_max`.
pub fn psds(
    per_threshold: &[(f64, EventRoster)],
    refs: &EventRoster,
    class_subset: &[String],
    dataset_seconds: f64,
    cfg: &PsdsConfig,
) -> Result<PsdsReport, EvalError> {
    cfg.validate()?;
    if dataset_seconds <= 0.0 {
        return Err(EvalError::Input(format!(
            "dataset duration {dataset_seconds} must be positive"
        )));
    }
    if per_threshold.len() < 2 {
        return Err(EvalError::Input(format!(
            "need at least 2 operating points, got {}",
            per_threshold.len()
        )));
    }

    let mut n_ref: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, events) in refs.clips() {
        for e in events {
            if class_subset.contains(&e.class_id) {
                *n_ref.entry(e.class_id.as_str()).or_insert(0) += 1;
            }
        }
    }
    let scored: Vec<&str> = n_ref.keys().copied().collect();
    if scored.is_empty() {
        return Ok(PsdsReport {
            score: 0.0,
            roc: per_threshold
                .iter()
                .map(|(t, _)| RocPoint {
                    threshold: *t,
                    efpr: 0.0,
                    etpr: 0.0,
                })
                .collect(),
        });
    }

    let mut roc = Vec::with_capacity(per_threshold.len());
    for (tau, dets) in per_threshold {
        let counts = match_events(dets, refs, cfg.dtc, cfg.gtc);
        let tprs: Vec<f64> = scored
            .iter()
            .map(|c| *counts.tp.get(*c).unwrap_or(&0) as f64 / n_ref[c] as f64)
            .collect();
        let fprs: Vec<f64> = scored
            .iter()
            .map(|c| *counts.fp.get(*c).unwrap_or(&0) as f64 * 3600.0 / dataset_seconds)
            .collect();
        let k = scored.len() as f64;
        let mean_tpr = tprs.iter().sum::<f64>() / k;
        let std_tpr = (tprs.iter().map(|t| (t - mean_tpr).powi(2)).sum::<f64>() / k).sqrt();
        let etpr = (mean_tpr - cfg.alpha_st * std_tpr).max(0.0);
        let efpr = fprs.iter().sum::<f64>() / k;
        roc.push(RocPoint {
            threshold: *tau,
            efpr,
            etpr,
        });
    }

    // monotone step curve: sort by eFPR, run a maximum over TPR, integrate
    let mut pts: Vec<(f64, f64)> = roc.iter().map(|p| (p.efpr, p.etpr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut best = 0.0f64;
    for p in &mut pts {
        best = best.max(p.1);
        p.1 = best;
    }
    let e_max = cfg.e_max_per_hour;
    let mut area = 0.0;
    for (i, &(e, tpr)) in pts.iter().enumerate() {
        let start = e.min(e_max);
        let end = match pts.get(i + 1) {
            Some(&(next, _)) => next.min(e_max),
            None => e_max,
        };
        area += (end - start).max(0.0) * tpr;
    }
    Ok(PsdsReport {
        score: area / e_max,
        roc,
    })
}

// ---------------------------------------------------------------------------
// I/O
// ---------------------------------------------------------------------------

/// Detections across thresholds as 5-column TSV:
/// clip_id, class_id, onset, offset, threshold.
pub fn save_detections_tsv(
    path: &Path,
    per_threshold: &[(f64, EventRoster)],
) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    for (tau, roster) in per_threshold {
        for (clip_id, events) in roster.clips() {
            for e in events {
                writeln!(
                    f,
                    "{clip_id}\t{}\t{:.6}\t{:.6}\t{tau:.6}",
                    e.class_id, e.onset, e.offset
                )?;
            }
        }
    }
    Ok(())
}

pub fn load_detections_tsv(path: &Path) -> Result<Vec<(f64, EventRoster)>, EvalError> {
    let f = std::fs::File::open(path)?;
    let mut by_tau: Vec<(f64, EventRoster)> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(EvalError::Input(format!(
                "line {}: expected 5 tab-separated fields, got {}",
                i + 1,
                parts.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64, EvalError> {
            s.parse()
                .map_err(|_| EvalError::Input(format!("line {}: bad {what} {s:?}", i + 1)))
        };
        let onset = parse(parts[2], "onset")?;
        let offset = parse(parts[3], "offset")?;
        let tau = parse(parts[4], "threshold")?;
        let label = StrongLabel::new(parts[1], onset, offset)
            .map_err(|e| EvalError::Input(format!("line {}: {e}", i + 1)))?;
        let slot = match by_tau.iter_mut().find(|(t, _)| (*t - tau).abs() < 1e-9) {
            Some((_, r)) => r,
            None => {
                by_tau.push((tau, EventRoster::new()));
                &mut by_tau.last_mut().unwrap().1
            }
        };
        slot.push(parts[0], label);
    }
    by_tau.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(by_tau)
}

/// ROC table as line-delimited JSON, one operating point per line.
pub fn save_roc_jsonl(path: &Path, report: &PsdsReport) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    for p in &report.roc {
        writeln!(f, "{}", serde_json::to_string(p)?)?;
    }
    Ok(())
}

pub fn load_roc_jsonl(path: &Path) -> Result<Vec<RocPoint>, EvalError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Frame-level score
// ---------------------------------------------------------------------------

/// Macro-averaged frame F1 at one threshold. A class with no positive
/// frames on either side counts as perfect.
pub fn frame_macro_f1(pred: &Tensor, target: &Tensor, threshold: f64) -> Result<f64, EvalError> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 {
        return Err(EvalError::Input(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (t, n) = (pred.shape()[0], pred.shape()[1]);
    let mut sum = 0.0;
    for c in 0..n {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for ti in 0..t {
            let p = pred.at2(ti, c) >= threshold;
            let y = target.at2(ti, c) >= 0.5;
            match (p, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fneg;
        sum += if denom == 0 {
            1.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(values: &[f64]) -> Tensor {
        Tensor::from_values(&[values.len(), 1], values).unwrap()
    }

    #[test]
    fn median_keeps_constant_columns() {
        let x = col(&[0.4; 9]);
        let y = median_filter(&x, 5).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn median_kills_isolated_spike() {
        let x = col(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        let y = median_filter(&x, 5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0), "{:?}", y.data());
    }

    #[test]
    fn median_rejects_bad_windows() {
        let x = col(&[0.1; 6]);
        assert!(matches!(median_filter(&x, 4), Err(EvalError::Config(_))));
        assert!(matches!(median_filter(&x, 7), Err(EvalError::Config(_))));
    }

    fn naive_median(values: &[f64], window: usize) -> Vec<f64> {
        let t = values.len();
        let half = window / 2;
        (0..t)
            .map(|ti| {
                let mut w: Vec<f64> = (0..window)
                    .map(|k| values[(ti + k).saturating_sub(half).min(t - 1)])
                    .collect();
                w.sort_by(f64::total_cmp);
                w[half]
            })
            .collect()
    }

    #[test]
    fn median_matches_sort_oracle_on_random_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..100 {
            let t = rng.gen_range(5..40);
            let vals: Vec<f64> = (0..t).map(|_| rng.gen::<f64>()).collect();
            let x = col(&vals);
            let got = median_filter(&x, 5).unwrap();
            let want = naive_median(x.data(), 5);
            assert_eq!(got.data(), want.as_slice(), "case {case}");
            for (i, v) in got.data().iter().enumerate() {
                assert!(x.data().contains(v), "output {v} at {i} not an input value");
            }
        }
    }

    #[test]
    fn extraction_turns_runs_into_events() {
        let hop = 0.02; // 50 fps
        let mut vals = vec![0.0; 15];
        for v in &mut vals[5..10] {
            *v = 0.9;
        }
        let events =
            extract_events(&col(&vals), &["tone".to_string()], 0.5, hop).unwrap();
        assert_eq!(events.len(), 1);
        assert!((events[0].onset - 0.10).abs() < 1e-9);
        assert!((events[0].offset - 0.20).abs() < 1e-9);

        let quiet = extract_events(&col(&[0.1; 8]), &["tone".to_string()], 0.5, hop).unwrap();
        assert!(quiet.is_empty());

        let mut two = vec![0.9, 0.9, 0.2, 0.9, 0.9];
        let events = extract_events(&col(&two), &["tone".to_string()], 0.5, hop).unwrap();
        assert_eq!(events.len(), 2, "one sub-threshold frame splits the run");
        two[2] = 0.5; // exactly at threshold joins the runs
        let events = extract_events(&col(&two), &["tone".to_string()], 0.5, hop).unwrap();
        assert_eq!(events.len(), 1);

        assert!(extract_events(&col(&two), &["tone".to_string()], 1.0, hop).is_err());
    }

    fn roster(rows: &[(&str, &str, f64, f64)]) -> EventRoster {
        let mut r = EventRoster::new();
        for (clip, class, on, off) in rows {
            r.push(clip, StrongLabel::new(*class, *on, *off).unwrap());
        }
        r
    }

    #[test]
    fn exact_match_is_one_tp() {
        let refs = roster(&[("c", "dog", 1.0, 3.0)]);
        let dets = roster(&[("c", "dog", 1.0, 3.0)]);
        let m = match_events(&dets, &refs, 0.7, 0.7);
        assert_eq!(m.tp.get("dog"), Some(&1));
        assert_eq!(m.fp.get("dog"), None);
    }

    #[test]
    fn disjoint_detection_is_one_fp() {
        let refs = roster(&[("c", "dog", 1.0, 3.0)]);
        let dets = roster(&[("c", "dog", 5.0, 6.0)]);
        let m = match_events(&dets, &refs, 0.7, 0.7);
        assert_eq!(m.tp.get("dog"), None);
        assert_eq!(m.fp.get("dog"), Some(&1));
    }

    #[test]
    fn dtc_rejects_sprawling_detection() {
        // intersection 6 < 0.7 * detection length 10 -> invalid, so FP and
        // the reference stays undetected
        let refs = roster(&[("c", "dog", 0.0, 6.0)]);
        let dets = roster(&[("c", "dog", 0.0, 10.0)]);
        let m = match_events(&dets, &refs, 0.7, 0.7);
        assert_eq!(m.tp.get("dog"), None);
        assert_eq!(m.fp.get("dog"), Some(&1));
    }

    #[test]
    fn split_detections_jointly_cover_a_reference() {
        // two valid detections each covering 45%: together 90% >= gtc
        let refs = roster(&[("c", "dog", 0.0, 10.0)]);
        let dets = roster(&[("c", "dog", 0.0, 4.5), ("c", "dog", 5.0, 9.5)]);
        let m = match_events(&dets, &refs, 0.7, 0.7);
        assert_eq!(m.tp.get("dog"), Some(&1));
        assert_eq!(m.fp.get("dog"), None);
    }

    fn perfect_bank(refs: &EventRoster, thresholds: &[f64]) -> Vec<(f64, EventRoster)> {
        thresholds.iter().map(|t| (*t, refs.clone())).collect()
    }

    #[test]
    fn perfect_detections_score_exactly_one() {
        let refs = roster(&[
            ("c1", "dog", 0.0, 2.0),
            ("c1", "cat", 1.0, 3.0),
            ("c2", "dog", 0.5, 1.5),
        ]);
        let cfg = PsdsConfig::default();
        let bank = perfect_bank(&refs, &cfg.thresholds);
        let classes = ["dog".to_string(), "cat".to_string()];
        let report = psds(&bank, &refs, &classes, 30.0, &cfg).unwrap();
        assert_eq!(report.score, 1.0);
    }

    #[test]
    fn empty_detections_score_exactly_zero() {
        let refs = roster(&[("c1", "dog", 0.0, 2.0)]);
        let cfg = PsdsConfig::default();
        let bank: Vec<(f64, EventRoster)> = cfg
            .thresholds
            .iter()
            .map(|t| (*t, EventRoster::new()))
            .collect();
        let report = psds(&bank, &refs, &["dog".to_string()], 30.0, &cfg).unwrap();
        assert_eq!(report.score, 0.0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let refs = roster(&[("c1", "dog", 0.0, 2.0)]);
        let cfg = PsdsConfig::default();
        let bank = perfect_bank(&refs, &cfg.thresholds);
        assert!(matches!(
            psds(&bank, &refs, &["dog".to_string()], 0.0, &cfg),
            Err(EvalError::Input(_))
        ));
        assert!(matches!(
            psds(&bank[..1], &refs, &["dog".to_string()], 30.0, &cfg),
            Err(EvalError::Input(_))
        ));
        let bad = PsdsConfig {
            dtc: 0.0,
            ..PsdsConfig::default()
        };
        assert!(matches!(
            psds(&bank, &refs, &["dog".to_string()], 30.0, &bad),
            Err(EvalError::Config(_))
        ));
    }

    /// Direct-definition scorer used only by this test: recomputes matching
    /// and the step integral with independent loops.
    fn brute_force_psds(
        bank: &[(f64, EventRoster)],
        refs: &EventRoster,
        classes: &[String],
        dataset_seconds: f64,
        cfg: &PsdsConfig,
    ) -> f64 {
        let ref_rows: Vec<(String, String, f64, f64)> = refs
            .clips()
            .flat_map(|(id, ls)| {
                ls.iter()
                    .map(move |l| (id.to_string(), l.class_id.clone(), l.onset, l.offset))
            })
            .collect();
        let scored: Vec<&String> = classes
            .iter()
            .filter(|c| ref_rows.iter().any(|(_, rc, _, _)| rc == *c))
            .collect();
        if scored.is_empty() {
            return 0.0;
        }
        let mut points: Vec<(f64, f64)> = Vec::new();
        for (_, dets) in bank {
            let det_rows: Vec<(String, String, f64, f64)> = dets
                .clips()
                .flat_map(|(id, ls)| {
                    ls.iter()
                        .map(move |l| (id.to_string(), l.class_id.clone(), l.onset, l.offset))
                })
                .collect();
            let inter = |a_on: f64, a_off: f64, b_on: f64, b_off: f64| -> f64 {
                (a_off.min(b_off) - a_on.max(b_on)).max(0.0)
            };
            let mut tpr_sum = 0.0;
            let mut fpr_sum = 0.0;
            for class in &scored {
                let valid: Vec<bool> = det_rows
                    .iter()
                    .map(|(dclip, dclass, don, doff)| {
                        if dclass != *class {
                            return true; // other classes never count here
                        }
                        let cov: f64 = ref_rows
                            .iter()
                            .filter(|(rclip, rclass, _, _)| rclip == dclip && rclass == dclass)
                            .map(|(_, _, ron, roff)| inter(*don, *doff, *ron, *roff))
                            .sum();
                        cov >= cfg.dtc * (doff - don)
                    })
                    .collect();
                let fp = det_rows
                    .iter()
                    .zip(&valid)
                    .filter(|((_, dclass, _, _), ok)| dclass == *class && !**ok)
                    .count();
                let mut tp = 0usize;
                let mut n_ref = 0usize;
                for (rclip, rclass, ron, roff) in &ref_rows {
                    if rclass != *class {
                        continue;
                    }
                    n_ref += 1;
                    let cov: f64 = det_rows
                        .iter()
                        .zip(&valid)
                        .filter(|((dclip, dclass, _, _), ok)| {
                            dclip == rclip && dclass == rclass && **ok
                        })
                        .map(|((_, _, don, doff), _)| inter(*don, *doff, *ron, *roff))
                        .sum();
                    if cov >= cfg.gtc * (roff - ron) {
                        tp += 1;
                    }
                }
                tpr_sum += tp as f64 / n_ref as f64;
                fpr_sum += fp as f64 * 3600.0 / dataset_seconds;
            }
            let k = scored.len() as f64;
            points.push((fpr_sum / k, tpr_sum / k));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut best = 0.0f64;
        let mut area = 0.0;
        for i in 0..points.len() {
            best = best.max(points[i].1);
            let start = points[i].0.min(cfg.e_max_per_hour);
            let end = points
                .get(i + 1)
                .map(|p| p.0.min(cfg.e_max_per_hour))
                .unwrap_or(cfg.e_max_per_hour);
            area += (end - start).max(0.0) * best;
        }
        area / cfg.e_max_per_hour
    }

    #[test]
    fn engine_matches_brute_force_on_hand_built_case() {
        // 2 classes, 3 clips, detections degrade as the threshold rises
        let refs = roster(&[
            ("c1", "dog", 0.0, 2.0),
            ("c1", "cat", 3.0, 5.0),
            ("c2", "dog", 1.0, 4.0),
            ("c3", "cat", 0.0, 1.0),
        ]);
        let low = roster(&[
            ("c1", "dog", 0.0, 2.0),
            ("c1", "cat", 3.0, 5.0),
            ("c1", "dog", 6.0, 8.0),
            ("c2", "dog", 1.0, 4.0),
            ("c2", "cat", 2.0, 3.0),
            ("c3", "cat", 0.0, 1.0),
        ]);
        let mid = roster(&[
            ("c1", "dog", 0.0, 2.0),
            ("c2", "dog", 1.0, 3.5),
            ("c3", "cat", 0.0, 0.9),
        ]);
        let high = roster(&[("c1", "dog", 0.2, 1.9)]);
        let bank = vec![(0.2, low), (0.5, mid), (0.8, high)];
        let classes = ["dog".to_string(), "cat".to_string()];
        let cfg = PsdsConfig {
            thresholds: vec![0.2, 0.5, 0.8],
            ..PsdsConfig::default()
        };
        let report = psds(&bank, &refs, &classes, 60.0, &cfg).unwrap();
        let oracle = brute_force_psds(&bank, &refs, &classes, 60.0, &cfg);
        assert!(
            (report.score - oracle).abs() < 1e-9,
            "engine {} vs oracle {oracle}",
            report.score
        );
        assert!(report.score > 0.0 && report.score < 1.0);
    }

    #[test]
    fn adding_a_true_positive_never_hurts() {
        let refs = roster(&[
            ("c1", "dog", 0.0, 2.0),
            ("c2", "dog", 1.0, 3.0),
            ("c2", "cat", 0.0, 1.0),
        ]);
        let cfg = PsdsConfig {
            thresholds: vec![0.3, 0.6],
            ..PsdsConfig::default()
        };
        let classes = ["dog".to_string(), "cat".to_string()];
        let partial = roster(&[("c1", "dog", 0.0, 2.0), ("c2", "cat", 0.0, 1.0)]);
        let bank = vec![(0.3, partial.clone()), (0.6, partial.clone())];
        let before = psds(&bank, &refs, &classes, 120.0, &cfg).unwrap().score;
        let mut more = partial;
        more.push("c2", StrongLabel::new("dog", 1.0, 3.0).unwrap());
        let bank2 = vec![(0.3, more), (0.6, bank[1].1.clone())];
        let after = psds(&bank2, &refs, &classes, 120.0, &cfg).unwrap().score;
        assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn score_survives_relabeling_and_clip_reorder() {
        let refs = roster(&[
            ("c1", "dog", 0.0, 2.0),
            ("c2", "cat", 1.0, 3.0),
            ("c3", "dog", 0.5, 1.0),
        ]);
        let dets_lo = roster(&[
            ("c1", "dog", 0.0, 2.0),
            ("c2", "cat", 1.0, 2.5),
            ("c3", "dog", 4.0, 5.0),
        ]);
        let dets_hi = roster(&[("c1", "dog", 0.1, 1.9)]);
        let cfg = PsdsConfig {
            thresholds: vec![0.3, 0.7],
            ..PsdsConfig::default()
        };
        let classes = ["dog".to_string(), "cat".to_string()];
        let base = psds(
            &[(0.3, dets_lo.clone()), (0.7, dets_hi.clone())],
            &refs,
            &classes,
            90.0,
            &cfg,
        )
        .unwrap()
        .score;

        let rename = |r: &EventRoster| {
            let mut out = EventRoster::new();
            // reversed clip order, swapped class names
            let mut clips: Vec<(String, Vec<StrongLabel>)> = r
                .clips()
                .map(|(id, ls)| (format!("z_{id}"), ls.to_vec()))
                .collect();
            clips.reverse();
            for (id, ls) in clips {
                for mut l in ls {
                    l.class_id = match l.class_id.as_str() {
                        "dog" => "feline".into(),
                        "cat" => "canine".into(),
                        other => other.to_string(),
                    };
                    out.push(&id, l);
                }
            }
            out
        };
        let renamed_classes = ["feline".to_string(), "canine".to_string()];
        let renamed = psds(
            &[(0.3, rename(&dets_lo)), (0.7, rename(&dets_hi))],
            &rename(&refs),
            &renamed_classes,
            90.0,
            &cfg,
        )
        .unwrap()
        .score;
        assert!((base - renamed).abs() < 1e-12);
    }

    #[test]
    fn detections_and_roc_round_trip_on_disk() {
        let refs = roster(&[("c1", "dog", 0.0, 2.0), ("c2", "cat", 1.0, 3.0)]);
        let bank = vec![
            (0.3, refs.clone()),
            (0.7, roster(&[("c1", "dog", 0.0, 1.5)])),
        ];
        let dir = std::env::temp_dir();
        let dpath = dir.join(format!("ovsed_dets_{}.tsv", std::process::id()));
        save_detections_tsv(&dpath, &bank).unwrap();
        let back = load_detections_tsv(&dpath).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back[0].0 - 0.3).abs() < 1e-9);
        assert_eq!(back[0].1.event_count(), refs.event_count());
        assert_eq!(back[1].1.event_count(), 1);

        let cfg = PsdsConfig {
            thresholds: vec![0.3, 0.7],
            ..PsdsConfig::default()
        };
        let report = psds(&bank, &refs, &["dog".to_string(), "cat".to_string()], 60.0, &cfg)
            .unwrap();
        let rpath = dir.join(format!("ovsed_roc_{}.jsonl", std::process::id()));
        save_roc_jsonl(&rpath, &report).unwrap();
        let points = load_roc_jsonl(&rpath).unwrap();
        assert_eq!(points, report.roc);
        std::fs::remove_file(&dpath).ok();
        std::fs::remove_file(&rpath).ok();
    }

    #[test]
    fn frame_f1_worked_examples() {
        let target = Tensor::from_values(&[4, 2], &[1., 0., 1., 0., 0., 1., 0., 1.]).unwrap();
        assert_eq!(frame_macro_f1(&target, &target, 0.5).unwrap(), 1.0);
        let inverted = Tensor::from_values(&[4, 2], &[0., 1., 0., 1., 1., 0., 1., 0.]).unwrap();
        assert_eq!(frame_macro_f1(&inverted, &target, 0.5).unwrap(), 0.0);
        // one class perfect, one class half right:
        // class 0: tp 2 fp 0 fn 0 -> 1.0; class 1: tp 1 fp 0 fn 1 -> 2/3
        let mixed = Tensor::from_values(&[4, 2], &[1., 0., 1., 0., 0., 1., 0., 0.]).unwrap();
        let f1 = frame_macro_f1(&mixed, &target, 0.5).unwrap();
        assert!((f1 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }
}
