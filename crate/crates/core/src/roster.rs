//! Strong event labels, the class ontology, and roster-level operations:
//! hypernym augmentation, common/rare splitting, and resampling weights.
//!
//! Roster file format: one event per line, tab-separated
//! `clip_id<TAB>class_id<TAB>onset<TAB>offset`. Ontology file format: one
//! edge per line, `child<TAB>parent`; a line with a bare name declares a
//! parentless class.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RosterError {
    #[error("bad label span [{onset}, {offset})")]
    BadSpan { onset: f64, offset: f64 },
    #[error("ontology cycle involving {0:?}")]
    Cycle(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("roster line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One annotated event with exact boundaries in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct StrongLabel {
    pub class_id: String,
    pub onset: f64,
    pub offset: f64,
}

impl StrongLabel {
    pub fn new(class_id: impl Into<String>, onset: f64, offset: f64) -> Result<Self, RosterError> {
        if !(onset.is_finite() && offset.is_finite() && 0.0 <= onset && onset < offset) {
            return Err(RosterError::BadSpan { onset, offset });
        }
        Ok(StrongLabel {
            class_id: class_id.into(),
            onset,
            offset,
        })
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// All events of a dataset split, grouped per clip in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventRoster {
    clips: Vec<(String, Vec<StrongLabel>)>,
    index: HashMap<String, usize>,
}

impl EventRoster {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, clip_id: &str, label: StrongLabel) {
        match self.index.get(clip_id) {
            Some(&i) => self.clips[i].1.push(label),
            None => {
                self.index.insert(clip_id.to_string(), self.clips.len());
                self.clips.push((clip_id.to_string(), vec![label]));
            }
        }
    }

    /// Registers a clip that has no events (a pure-negative clip).
    pub fn push_empty_clip(&mut self, clip_id: &str) {
        if !self.index.contains_key(clip_id) {
            self.index.insert(clip_id.to_string(), self.clips.len());
            self.clips.push((clip_id.to_string(), Vec::new()));
        }
    }

    pub fn clips(&self) -> impl Iterator<Item = (&str, &[StrongLabel])> {
        self.clips.iter().map(|(id, ls)| (id.as_str(), ls.as_slice()))
    }

    pub fn clip_events(&self, clip_id: &str) -> Option<&[StrongLabel]> {
        self.index.get(clip_id).map(|&i| self.clips[i].1.as_slice())
    }

    pub fn clip_count(&self) -> usize {
        self.clips.len()
    }

    pub fn event_count(&self) -> usize {
        self.clips.iter().map(|(_, ls)| ls.len()).sum()
    }

    /// Distinct class ids in first-appearance order.
    pub fn class_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (_, labels) in &self.clips {
            for l in labels {
                if seen.insert(l.class_id.clone()) {
                    out.push(l.class_id.clone());
                }
            }
        }
        out
    }

    /// Total annotated seconds per class.
    pub fn class_durations(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (_, labels) in &self.clips {
            for l in labels {
                *out.entry(l.class_id.clone()).or_insert(0.0) += l.duration();
            }
        }
        out
    }

    pub fn save_tsv(&self, path: &Path) -> Result<(), RosterError> {
        let mut f = std::fs::File::create(path)?;
        for (clip_id, labels) in &self.clips {
            for l in labels {
                writeln!(f, "{clip_id}\t{}\t{:.6}\t{:.6}", l.class_id, l.onset, l.offset)?;
            }
            if labels.is_empty() {
                // empty clips round-trip through a sentinel row
                writeln!(f, "{clip_id}\t-\t0.000000\t0.000000")?;
            }
        }
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<Self, RosterError> {
        let f = std::fs::File::open(path)?;
        let mut roster = EventRoster::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(RosterError::Parse {
                    line: i + 1,
                    msg: format!("expected 4 tab-separated fields, got {}", parts.len()),
                });
            }
            if parts[1] == "-" {
                roster.push_empty_clip(parts[0]);
                continue;
            }
            let onset: f64 = parts[2].parse().map_err(|_| RosterError::Parse {
                line: i + 1,
                msg: format!("bad onset {:?}", parts[2]),
            })?;
            let offset: f64 = parts[3].parse().map_err(|_| RosterError::Parse {
                line: i + 1,
                msg: format!("bad offset {:?}", parts[3]),
            })?;
            let label = StrongLabel::new(parts[1], onset, offset).map_err(|e| RosterError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            roster.push(parts[0], label);
        }
        Ok(roster)
    }
}

/// Class hierarchy with possibly multiple parents per class (acyclic).
#[derive(Clone, Debug, Default)]
pub struct Ontology {
    parents: BTreeMap<String, Vec<String>>,
}

impl Ontology {
    /// Builds from child->parent edges plus optional parentless declarations.
    pub fn new(edges: &[(String, String)], roots: &[String]) -> Result<Self, RosterError> {
        let mut parents: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in roots {
            parents.entry(r.clone()).or_default();
        }
        for (child, parent) in edges {
            parents.entry(parent.clone()).or_default();
            let entry = parents.entry(child.clone()).or_default();
            if !entry.contains(parent) {
                entry.push(parent.clone());
            }
        }
        let ont = Ontology { parents };
        ont.check_acyclic()?;
        Ok(ont)
    }

    fn check_acyclic(&self) -> Result<(), RosterError> {
        // colors: 0 unvisited, 1 on stack, 2 done
        let mut color: HashMap<&str, u8> = HashMap::new();
        fn visit<'a>(
            node: &'a str,
            parents: &'a BTreeMap<String, Vec<String>>,
            color: &mut HashMap<&'a str, u8>,
        ) -> Result<(), RosterError> {
            match color.get(node) {
                Some(1) => return Err(RosterError::Cycle(node.to_string())),
                Some(2) => return Ok(()),
                _ => {}
            }
            color.insert(node, 1);
            if let Some(ps) = parents.get(node) {
                for p in ps {
                    visit(p, parents, color)?;
                }
            }
            color.insert(node, 2);
            Ok(())
        }
        for node in self.parents.keys() {
            visit(node, &self.parents, &mut color)?;
        }
        Ok(())
    }

    pub fn contains(&self, class_id: &str) -> bool {
        self.parents.contains_key(class_id)
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.parents.keys().map(|s| s.as_str())
    }

    /// All strict ancestors of a class, deduplicated, breadth-first order.
    pub fn ancestors(&self, class_id: &str) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut queue: Vec<&str> = vec![class_id];
        let mut out = Vec::new();
        while let Some(node) = queue.pop() {
            if let Some(ps) = self.parents.get(node) {
                for p in ps {
                    if seen.insert(p.clone()) {
                        out.push(p.clone());
                        queue.push(p);
                    }
                }
            }
        }
        out
    }

    pub fn save_tsv(&self, path: &Path) -> Result<(), RosterError> {
        let mut f = std::fs::File::create(path)?;
        for (child, ps) in &self.parents {
            if ps.is_empty() {
                writeln!(f, "{child}")?;
            }
            for p in ps {
                writeln!(f, "{child}\t{p}")?;
            }
        }
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<Self, RosterError> {
        let f = std::fs::File::open(path)?;
        let mut edges = Vec::new();
        let mut roots = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            match parts.len() {
                1 => roots.push(parts[0].to_string()),
                2 => edges.push((parts[0].to_string(), parts[1].to_string())),
                n => {
                    return Err(RosterError::Parse {
                        line: i + 1,
                        msg: format!("expected 1 or 2 fields, got {n}"),
                    })
                }
            }
        }
        Ontology::new(&edges, &roots)
    }
}

/// Result of hypernym augmentation: the closed roster plus ids of clips
/// dropped because they referenced classes missing from the ontology.
#[derive(Clone, Debug)]
pub struct AugmentedRoster {
    pub roster: EventRoster,
    pub dropped_clips: Vec<String>,
}

/// Merges overlapping or touching spans of one class.
fn merge_spans(mut spans: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    spans.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(spans.len());
    for (on, off) in spans {
        match out.last_mut() {
            Some(last) if on <= last.1 => last.1 = last.1.max(off),
            _ => out.push((on, off)),
        }
    }
    out
}

/// Adds an identical-span event for every ancestor of every event's class
/// and merges same-class overlaps. Clips referencing unknown classes are
/// dropped and reported. Idempotent.
pub fn label_augment(roster: &EventRoster, ont: &Ontology) -> AugmentedRoster {
    let mut out = EventRoster::new();
    let mut dropped = Vec::new();
    for (clip_id, labels) in roster.clips() {
        if labels.iter().any(|l| !ont.contains(&l.class_id)) {
            dropped.push(clip_id.to_string());
            continue;
        }
        // class -> spans, preserving first-appearance class order
        let mut order: Vec<String> = Vec::new();
        let mut spans: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
        let mut add = |class: &str, on: f64, off: f64, order: &mut Vec<String>| {
            let e = spans.entry(class.to_string()).or_insert_with(|| {
                order.push(class.to_string());
                Vec::new()
            });
            e.push((on, off));
        };
        for l in labels {
            add(&l.class_id, l.onset, l.offset, &mut order);
            for anc in ont.ancestors(&l.class_id) {
                add(&anc, l.onset, l.offset, &mut order);
            }
        }
        if labels.is_empty() {
            out.push_empty_clip(clip_id);
            continue;
        }
        for class in order {
            for (on, off) in merge_spans(spans.remove(&class).unwrap()) {
                out.push(
                    clip_id,
                    StrongLabel {
                        class_id: class.clone(),
                        onset: on,
                        offset: off,
                    },
                );
            }
        }
    }
    AugmentedRoster {
        roster: out,
        dropped_clips: dropped,
    }
}

/// Splits classes by total annotated duration: ≥ threshold seconds is
/// common, below is rare.
pub fn split_common_rare(
    roster: &EventRoster,
    threshold_seconds: f64,
) -> (Vec<String>, Vec<String>) {
    let mut common = Vec::new();
    let mut rare = Vec::new();
    for (class, dur) in roster.class_durations() {
        if dur >= threshold_seconds {
            common.push(class);
        } else {
            rare.push(class);
        }
    }
    (common, rare)
}

/// Removes all labels of the given classes; clips left without labels stay
/// in the roster as empty (negative) clips.
pub fn strip_classes(roster: &EventRoster, remove: &[String]) -> EventRoster {
    let removed: HashSet<&str> = remove.iter().map(|s| s.as_str()).collect();
    let mut out = EventRoster::new();
    for (clip_id, labels) in roster.clips() {
        let kept: Vec<&StrongLabel> = labels
            .iter()
            .filter(|l| !removed.contains(l.class_id.as_str()))
            .collect();
        if kept.is_empty() {
            out.push_empty_clip(clip_id);
        } else {
            for l in kept {
                out.push(clip_id, l.clone());
            }
        }
    }
    out
}

/// Per-clip sampling weights: max over the clip's classes of inverse class
/// frequency (clip-occurrence counts), normalized to mean 1. Clips without
/// labels get the mean weight.
pub fn resample_weights(roster: &EventRoster) -> Vec<(String, f64)> {
    let mut clip_count_per_class: HashMap<&str, usize> = HashMap::new();
    for (_, labels) in roster.clips() {
        let classes: HashSet<&str> = labels.iter().map(|l| l.class_id.as_str()).collect();
        for c in classes {
            *clip_count_per_class.entry(c).or_insert(0) += 1;
        }
    }
    let mut raw: Vec<(String, f64)> = roster
        .clips()
        .map(|(clip_id, labels)| {
            let w = labels
                .iter()
                .map(|l| 1.0 / clip_count_per_class[l.class_id.as_str()] as f64)
                .fold(0.0, f64::max);
            (clip_id.to_string(), w)
        })
        .collect();
    let labeled: Vec<f64> = raw.iter().map(|(_, w)| *w).filter(|w| *w > 0.0).collect();
    if labeled.is_empty() {
        for (_, w) in &mut raw {
            *w = 1.0;
        }
        return raw;
    }
    let mean = labeled.iter().sum::<f64>() / labeled.len() as f64;
    for (_, w) in &mut raw {
        *w = if *w > 0.0 { *w / mean } else { 1.0 };
    }
    raw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_ontology() -> Ontology {
        let edges = vec![
            ("leaf".to_string(), "mid".to_string()),
            ("mid".to_string(), "root".to_string()),
            ("leaf2".to_string(), "mid".to_string()),
        ];
        Ontology::new(&edges, &[]).unwrap()
    }

    #[test]
    fn chain_closure_adds_all_ancestors() {
        let ont = simple_ontology();
        let mut r = EventRoster::new();
        r.push("c1", StrongLabel::new("leaf", 1.0, 2.0).unwrap());
        let aug = label_augment(&r, &ont);
        let events = aug.roster.clip_events("c1").unwrap();
        assert_eq!(events.len(), 3);
        let classes: Vec<&str> = events.iter().map(|e| e.class_id.as_str()).collect();
        assert!(classes.contains(&"leaf") && classes.contains(&"mid") && classes.contains(&"root"));
        for e in events {
            assert_eq!((e.onset, e.offset), (1.0, 2.0));
        }
    }

    #[test]
    fn root_event_is_unchanged() {
        let ont = simple_ontology();
        let mut r = EventRoster::new();
        r.push("c1", StrongLabel::new("root", 0.5, 1.5).unwrap());
        let aug = label_augment(&r, &ont);
        assert_eq!(
            aug.roster.clip_events("c1").unwrap(),
            &[StrongLabel::new("root", 0.5, 1.5).unwrap()]
        );
    }

    #[test]
    fn adjacent_ancestor_spans_merge() {
        let ont = simple_ontology();
        let mut r = EventRoster::new();
        r.push("c1", StrongLabel::new("leaf", 0.0, 1.0).unwrap());
        r.push("c1", StrongLabel::new("leaf2", 1.0, 2.0).unwrap());
        let aug = label_augment(&r, &ont);
        let events = aug.roster.clip_events("c1").unwrap();
        let mids: Vec<&StrongLabel> = events.iter().filter(|e| e.class_id == "mid").collect();
        assert_eq!(mids.len(), 1, "adjacent mid spans should merge");
        assert_eq!((mids[0].onset, mids[0].offset), (0.0, 2.0));
        let roots: Vec<&StrongLabel> = events.iter().filter(|e| e.class_id == "root").collect();
        assert_eq!(roots.len(), 1);
        assert_eq!((roots[0].onset, roots[0].offset), (0.0, 2.0));
    }

    #[test]
    fn label_augment_is_idempotent() {
        let ont = simple_ontology();
        let mut r = EventRoster::new();
        r.push("c1", StrongLabel::new("leaf", 0.0, 1.0).unwrap());
        r.push("c1", StrongLabel::new("leaf", 0.5, 1.5).unwrap());
        r.push("c1", StrongLabel::new("mid", 3.0, 4.0).unwrap());
        r.push("c2", StrongLabel::new("leaf2", 2.0, 2.5).unwrap());
        let once = label_augment(&r, &ont);
        let twice = label_augment(&once.roster, &ont);
        assert_eq!(once.roster, twice.roster);
    }

    #[test]
    fn unknown_class_drops_whole_clip() {
        let ont = simple_ontology();
        let mut r = EventRoster::new();
        r.push("good", StrongLabel::new("leaf", 0.0, 1.0).unwrap());
        r.push("bad", StrongLabel::new("leaf", 0.0, 1.0).unwrap());
        r.push("bad", StrongLabel::new("mystery", 1.0, 2.0).unwrap());
        let aug = label_augment(&r, &ont);
        assert_eq!(aug.dropped_clips, ["bad"]);
        assert!(aug.roster.clip_events("bad").is_none());
        assert!(aug.roster.clip_events("good").is_some());
    }

    #[test]
    fn ontology_rejects_cycles() {
        let edges = vec![
            ("a".to_string(), "b".to_string()),
            ("b".to_string(), "c".to_string()),
            ("c".to_string(), "a".to_string()),
        ];
        assert!(matches!(Ontology::new(&edges, &[]), Err(RosterError::Cycle(_))));
    }

    #[test]
    fn split_boundary_seconds() {
        let mut r = EventRoster::new();
        // class at exactly 360 s and class at 359 s
        for i in 0..10 {
            r.push(
                &format!("c{i}"),
                StrongLabel::new("at_360", i as f64 * 40.0, i as f64 * 40.0 + 36.0).unwrap(),
            );
            r.push(
                &format!("c{i}"),
                StrongLabel::new("at_359", 0.0, 35.9).unwrap(),
            );
        }
        let (common, rare) = split_common_rare(&r, 360.0);
        assert_eq!(common, ["at_360"]);
        assert_eq!(rare, ["at_359"]);

        let empty = EventRoster::new();
        let (c, rr) = split_common_rare(&empty, 360.0);
        assert!(c.is_empty() && rr.is_empty());
    }

    #[test]
    fn equal_frequencies_give_unit_weights() {
        let mut r = EventRoster::new();
        for i in 0..4 {
            r.push(&format!("c{i}"), StrongLabel::new("a", 0.0, 1.0).unwrap());
            r.push(&format!("c{i}"), StrongLabel::new("b", 1.0, 2.0).unwrap());
        }
        let w = resample_weights(&r);
        for (_, weight) in &w {
            assert!((weight - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rarest_class_gets_max_weight_and_mean_is_one() {
        let mut r = EventRoster::new();
        for i in 0..9 {
            r.push(&format!("c{i}"), StrongLabel::new("common", 0.0, 1.0).unwrap());
        }
        r.push("c9", StrongLabel::new("rare", 0.0, 1.0).unwrap());
        let w = resample_weights(&r);
        let max = w.iter().map(|(_, x)| *x).fold(0.0, f64::max);
        let rare_w = w.iter().find(|(id, _)| id == "c9").unwrap().1;
        assert_eq!(rare_w, max);
        let sum: f64 = w.iter().map(|(_, x)| *x).sum();
        assert!((sum - w.len() as f64).abs() < 1e-6);
    }

    #[test]
    fn roster_round_trips_through_tsv() {
        let mut r = EventRoster::new();
        r.push("clip_a", StrongLabel::new("dog", 0.25, 1.5).unwrap());
        r.push("clip_a", StrongLabel::new("cat", 2.0, 3.0).unwrap());
        r.push("clip_b", StrongLabel::new("dog", 0.0, 10.0).unwrap());
        r.push_empty_clip("clip_c");
        let path = std::env::temp_dir().join(format!("ovsed_roster_{}.tsv", std::process::id()));
        r.save_tsv(&path).unwrap();
        let back = EventRoster::load_tsv(&path).unwrap();
        assert_eq!(back.clip_count(), 3);
        assert_eq!(back.clip_events("clip_a").unwrap().len(), 2);
        assert_eq!(back.clip_events("clip_c").unwrap().len(), 0);
        let orig = r.clip_events("clip_a").unwrap();
        let got = back.clip_events("clip_a").unwrap();
        for (a, b) in orig.iter().zip(got) {
            assert_eq!(a.class_id, b.class_id);
            assert!((a.onset - b.onset).abs() < 1e-6);
            assert!((a.offset - b.offset).abs() < 1e-6);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn ontology_round_trips_through_tsv() {
        let ont = simple_ontology();
        let path = std::env::temp_dir().join(format!("ovsed_ont_{}.tsv", std::process::id()));
        ont.save_tsv(&path).unwrap();
        let back = Ontology::load_tsv(&path).unwrap();
        assert!(back.contains("leaf") && back.contains("root"));
        assert_eq!(back.ancestors("leaf"), ont.ancestors("leaf"));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_span_is_rejected() {
        assert!(StrongLabel::new("x", 2.0, 1.0).is_err());
        assert!(StrongLabel::new("x", -0.5, 1.0).is_err());
        assert!(StrongLabel::new("x", 1.0, 1.0).is_err());
    }

    #[test]
    fn strip_classes_keeps_clips_as_negatives() {
        let mut r = EventRoster::new();
        r.push("c1", StrongLabel::new("keep", 0.0, 1.0).unwrap());
        r.push("c1", StrongLabel::new("drop", 1.0, 2.0).unwrap());
        r.push("c2", StrongLabel::new("drop", 0.0, 1.0).unwrap());
        let out = strip_classes(&r, &["drop".to_string()]);
        assert_eq!(out.clip_events("c1").unwrap().len(), 1);
        assert_eq!(out.clip_events("c2").unwrap().len(), 0);
        assert_eq!(out.clip_count(), 2);
    }
}
