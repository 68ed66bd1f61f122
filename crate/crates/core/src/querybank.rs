//! Event query vectors: construction from text prompts or audio exemplars,
//! persistent storage, and assembly of the inference-time query sequence.
//!
//! Base-class queries always precede novel-class queries, so prediction
//! column i refers to the same class for the whole run.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::frontend::MelSpectrogram;
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum QuerybankError {
    #[error("empty class name")]
    EmptyClassName,
    #[error("no audio segments given")]
    NoSegments,
    #[error("degenerate embedding (norm {0:.3e})")]
    DegenerateEmbedding(f64),
    #[error("duplicate class id {0:?}")]
    DuplicateClassId(String),
    #[error("query dimension mismatch: {got} vs {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("class {0:?} has neither modality available")]
    NoModality(String),
    #[error("store file: {0}")]
    Format(String),
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Audio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    Novel,
}

/// How query modality is chosen per training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    TextOnly,
    AudioOnly,
    Mixed,
}

/// One event query: unit-normalized D-vector plus identity and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryVector {
    pub class_id: String,
    pub embedding: Tensor,
    pub modality: Modality,
    pub role: Role,
    /// Prompt text, or a description of the source segments.
    pub provenance: String,
}

/// Maps text prompts and audio features into the query embedding space.
///
/// `embed_audio` is time-distributed: one D-vector per input frame.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed_text(&self, prompt: &str) -> Result<Tensor, QuerybankError>;
    fn embed_audio(&self, features: &MelSpectrogram) -> Result<Tensor, QuerybankError>;
}

/// Deterministic embedding stub. Text prompts hash to a seeded Gaussian
/// vector; audio frames pass through a fixed seeded linear map. Both are
/// pure functions of their input bytes, so stored queries are reproducible
/// without any pretrained weights.
pub struct StubProvider {
    dim: usize,
    seed: u64,
}

impl StubProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        StubProvider { dim, seed }
    }

    fn audio_map(&self, mel_bins: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_a0d1_0000_0000 ^ mel_bins as u64);
        let scale = 1.0 / (mel_bins as f64).sqrt();
        Tensor::from_fn(&[mel_bins, self.dim], |_| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        })
    }
}

impl EmbeddingProvider for StubProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, prompt: &str) -> Result<Tensor, QuerybankError> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(prompt.as_bytes());
        let digest = h.finalize();
        let mut seed_bytes = [0u8; 8];
        seed_bytes.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed_bytes));
        Ok(Tensor::from_fn(&[self.dim], |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        }))
    }

    fn embed_audio(&self, features: &MelSpectrogram) -> Result<Tensor, QuerybankError> {
        let map = self.audio_map(features.mel_bins);
        let frames = features.frames();
        let mut out = vec![0.0; frames * self.dim];
        for t in 0..frames {
            let row = features.values.row(t);
            for (j, o) in out[t * self.dim..(t + 1) * self.dim].iter_mut().enumerate() {
                let mut acc = 0.0;
                for (b, &x) in row.iter().enumerate() {
                    acc += x * map.at2(b, j);
                }
                *o = acc;
            }
        }
        Ok(Tensor::from_values(&[frames, self.dim], &out).expect("shape consistent"))
    }
}

fn normalize(v: &[f64]) -> Result<Vec<f64>, QuerybankError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(QuerybankError::DegenerateEmbedding(norm));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Embeds "sound of {class}" and unit-normalizes.
pub fn build_text_query(
    class_id: &str,
    role: Role,
    provider: &dyn EmbeddingProvider,
) -> Result<QueryVector, QuerybankError> {
    if class_id.trim().is_empty() {
        return Err(QuerybankError::EmptyClassName);
    }
    let prompt = format!("sound of {class_id}");
    let raw = provider.embed_text(&prompt)?;
    let unit = normalize(raw.data())?;
    Ok(QueryVector {
        class_id: class_id.to_string(),
        embedding: Tensor::from_values(&[provider.dim()], &unit).expect("dim consistent"),
        modality: Modality::Text,
        role,
        provenance: prompt,
    })
}

/// Builds an audio query from event-only crops: per-segment time mean,
/// then a segment average weighted by frame count, then normalization.
pub fn build_audio_query(
    class_id: &str,
    role: Role,
    segments: &[MelSpectrogram],
    provider: &dyn EmbeddingProvider,
) -> Result<QueryVector, QuerybankError> {
    if class_id.trim().is_empty() {
        return Err(QuerybankError::EmptyClassName);
    }
    if segments.is_empty() {
        return Err(QuerybankError::NoSegments);
    }
    let d = provider.dim();
    let mut acc = vec![0.0; d];
    let mut total_frames = 0usize;
    for seg in segments {
        let emb = provider.embed_audio(seg)?;
        let frames = emb.shape()[0];
        // length-weighted average of time means = frame-weighted sum
        for t in 0..frames {
            for (a, &e) in acc.iter_mut().zip(emb.row(t)) {
                *a += e;
            }
        }
        total_frames += frames;
    }
    for a in &mut acc {
        *a /= total_frames as f64;
    }
    let unit = normalize(&acc)?;
    Ok(QueryVector {
        class_id: class_id.to_string(),
        embedding: Tensor::from_values(&[d], &unit).expect("dim consistent"),
        modality: Modality::Audio,
        role,
        provenance: format!("{} audio segment(s), {} frames", segments.len(), total_frames),
    })
}

/// Picks a query modality for one training example.
pub fn sample_modality(
    class_id: &str,
    has_text: bool,
    has_audio: bool,
    mode: ModalityMode,
    rng: &mut impl Rng,
) -> Result<Modality, QuerybankError> {
    if !has_text && !has_audio {
        return Err(QuerybankError::NoModality(class_id.to_string()));
    }
    Ok(match mode {
        ModalityMode::TextOnly if has_text => Modality::Text,
        ModalityMode::AudioOnly if has_audio => Modality::Audio,
        _ => {
            if !has_text {
                Modality::Audio
            } else if !has_audio {
                Modality::Text
            } else {
                match mode {
                    ModalityMode::TextOnly => Modality::Text,
                    ModalityMode::AudioOnly => Modality::Audio,
                    ModalityMode::Mixed => {
                        if rng.gen_bool(0.5) {
                            Modality::Text
                        } else {
                            Modality::Audio
                        }
                    }
                }
            }
        }
    })
}

/// Ordered query collection: all base entries first, then novel entries.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryStore {
    entries: Vec<QueryVector>,
    base_count: usize,
}

impl QueryStore {
    pub fn new(base: Vec<QueryVector>, novel: Vec<QueryVector>) -> Result<Self, QuerybankError> {
        let base_count = base.len();
        let mut entries = base;
        entries.extend(novel);
        let mut seen = HashSet::new();
        let mut dim = None;
        for (i, q) in entries.iter().enumerate() {
            if !seen.insert(q.class_id.clone()) {
                return Err(QuerybankError::DuplicateClassId(q.class_id.clone()));
            }
            let d = q.embedding.len();
            match dim {
                None => dim = Some(d),
                Some(w) if w != d => {
                    return Err(QuerybankError::DimMismatch { got: d, want: w })
                }
                _ => {}
            }
            let want_role = if i < base_count { Role::Base } else { Role::Novel };
            if q.role != want_role {
                return Err(QuerybankError::Format(format!(
                    "entry {i} ({:?}) has role {:?}",
                    q.class_id, q.role
                )));
            }
        }
        Ok(QueryStore {
            entries,
            base_count,
        })
    }

    pub fn entries(&self) -> &[QueryVector] {
        &self.entries
    }

    pub fn base(&self) -> &[QueryVector] {
        &self.entries[..self.base_count]
    }

    pub fn novel(&self) -> &[QueryVector] {
        &self.entries[self.base_count..]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |q| q.embedding.len())
    }

    pub fn find(&self, class_id: &str) -> Option<&QueryVector> {
        self.entries.iter().find(|q| q.class_id == class_id)
    }
}

const STORE_MAGIC: &[u8; 4] = b"OVQS";
pub const STORE_VERSION: u32 = 1;

/// Writes the store as a versioned little-endian binary table.
pub fn save_store(store: &QueryStore, path: &Path) -> Result<(), QuerybankError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(store.base_count as u32).to_le_bytes());
    for q in &store.entries {
        for s in [&q.class_id, &q.provenance] {
            let b = s.as_bytes();
            buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
            buf.extend_from_slice(b);
        }
        buf.push(match q.modality {
            Modality::Text => 0,
            Modality::Audio => 1,
        });
        buf.push(match q.role {
            Role::Base => 0,
            Role::Novel => 1,
        });
        buf.extend_from_slice(&(q.embedding.len() as u32).to_le_bytes());
        for v in q.embedding.to_f32_vec() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], QuerybankError> {
        if self.pos + n > self.bytes.len() {
            return Err(QuerybankError::Format("truncated store file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, QuerybankError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, max: usize, what: &str) -> Result<String, QuerybankError> {
        let len = self.u32()? as usize;
        if len > max {
            return Err(QuerybankError::Format(format!("implausible {what} length")));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| QuerybankError::Format(format!("{what} not utf-8")))
    }
}

/// Reads a store written by `save_store`. Round-trips bit-exactly.
pub fn load_store(path: &Path) -> Result<QueryStore, QuerybankError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };

    if cur.take(4)? != STORE_MAGIC {
        return Err(QuerybankError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != STORE_VERSION {
        return Err(QuerybankError::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let base_count = cur.u32()? as usize;
    if base_count > count || count > 1_000_000 {
        return Err(QuerybankError::Format("implausible counts".into()));
    }
    let mut base = Vec::new();
    let mut novel = Vec::new();
    for i in 0..count {
        let class_id = cur.string(4096, "id")?;
        let provenance = cur.string(1 << 20, "provenance")?;
        let modality = match cur.take(1)?[0] {
            0 => Modality::Text,
            1 => Modality::Audio,
            m => return Err(QuerybankError::Format(format!("bad modality byte {m}"))),
        };
        let role = match cur.take(1)?[0] {
            0 => Role::Base,
            1 => Role::Novel,
            r => return Err(QuerybankError::Format(format!("bad role byte {r}"))),
        };
        let d = cur.u32()? as usize;
        if d == 0 || d > 1 << 16 {
            return Err(QuerybankError::Format("implausible dimension".into()));
        }
        let raw = cur.take(4 * d)?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let q = QueryVector {
            class_id,
            embedding: Tensor::from_values(&[d], &vals).expect("dim consistent"),
            modality,
            role,
            provenance,
        };
        if i < base_count {
            base.push(q);
        } else {
            novel.push(q);
        }
    }
    if cur.pos != bytes.len() {
        return Err(QuerybankError::Format("trailing bytes".into()));
    }
    QueryStore::new(base, novel)
}

/// Concatenates novel queries after the store's base queries, preserving
/// order, and returns the combined sequence.
pub fn assemble_inference_queries(
    store: &QueryStore,
    novel: &[QueryVector],
) -> Result<Vec<QueryVector>, QuerybankError> {
    let mut out: Vec<QueryVector> = store.base().to_vec();
    let mut seen: HashSet<String> = out.iter().map(|q| q.class_id.clone()).collect();
    let dim = store.dim();
    for q in novel {
        if !seen.insert(q.class_id.clone()) {
            return Err(QuerybankError::DuplicateClassId(q.class_id.clone()));
        }
        if dim != 0 && q.embedding.len() != dim {
            return Err(QuerybankError::DimMismatch {
                got: q.embedding.len(),
                want: dim,
            });
        }
        out.push(q.clone());
    }
    Ok(out)
}

/// Stacks query embeddings into an [N×D] matrix in sequence order.
pub fn query_matrix(queries: &[QueryVector]) -> Result<Tensor, QuerybankError> {
    if queries.is_empty() {
        return Err(QuerybankError::Format("no queries to stack".into()));
    }
    let d = queries[0].embedding.len();
    let mut vals = Vec::with_capacity(queries.len() * d);
    for q in queries {
        if q.embedding.len() != d {
            return Err(QuerybankError::DimMismatch {
                got: q.embedding.len(),
                want: d,
            });
        }
        vals.extend_from_slice(q.embedding.data());
    }
    Ok(Tensor::from_values(&[queries.len(), d], &vals).expect("shape consistent"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn provider() -> StubProvider {
        StubProvider::new(16, 99)
    }

    fn constant_mel(frames: usize, bins: usize, value: f64) -> MelSpectrogram {
        MelSpectrogram {
            values: Tensor::filled(&[frames, bins], value),
            hop_seconds: 0.01,
            mel_bins: bins,
        }
    }

    #[test]
    fn text_query_is_deterministic() {
        let p = provider();
        let a = build_text_query("engine", Role::Base, &p).unwrap();
        let b = build_text_query("engine", Role::Base, &p).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.provenance, "sound of engine");
    }

    #[test]
    fn distinct_names_give_distinct_vectors() {
        let p = provider();
        let a = build_text_query("cat", Role::Base, &p).unwrap();
        let b = build_text_query("dog", Role::Base, &p).unwrap();
        let cos: f64 = a
            .embedding
            .data()
            .iter()
            .zip(b.embedding.data())
            .map(|(&x, &y)| x * y)
            .sum();
        assert!(cos < 1.0 - 1e-6, "cosine {cos}");
    }

    #[test]
    fn text_query_is_unit_norm() {
        let p = provider();
        let q = build_text_query("rain", Role::Base, &p).unwrap();
        let norm: f64 = q.embedding.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_class_name_is_error() {
        let p = provider();
        assert!(matches!(
            build_text_query("  ", Role::Base, &p),
            Err(QuerybankError::EmptyClassName)
        ));
        assert!(matches!(
            build_audio_query("", Role::Novel, &[constant_mel(2, 8, 1.0)], &p),
            Err(QuerybankError::EmptyClassName)
        ));
    }

    #[test]
    fn single_frame_segment_is_normalized_frame_embedding() {
        let p = provider();
        let seg = constant_mel(1, 8, 0.7);
        let q = build_audio_query("beep", Role::Novel, &[seg.clone()], &p).unwrap();
        let emb = p.embed_audio(&seg).unwrap();
        let norm: f64 = emb.row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        for (got, want) in q.embedding.data().iter().zip(emb.row(0)) {
            assert!((got - want / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn repeated_segments_match_single_segment() {
        let p = provider();
        let seg = constant_mel(5, 8, 0.3);
        let one = build_audio_query("hum", Role::Novel, &[seg.clone()], &p).unwrap();
        let three =
            build_audio_query("hum", Role::Novel, &[seg.clone(), seg.clone(), seg], &p).unwrap();
        assert!(one.embedding.max_abs_diff(&three.embedding) < 1e-9);
    }

    #[test]
    fn segment_average_is_length_weighted() {
        let p = provider();
        // constant features u (1 frame) and v (3 frames)
        let u = constant_mel(1, 8, 1.0);
        let v = constant_mel(3, 8, -0.5);
        let q = build_audio_query("mix", Role::Novel, &[u.clone(), v.clone()], &p).unwrap();
        let eu = p.embed_audio(&u).unwrap();
        let ev = p.embed_audio(&v).unwrap();
        let want_raw: Vec<f64> = (0..p.dim())
            .map(|j| (eu.at2(0, j) + 3.0 * ev.at2(0, j)) / 4.0)
            .collect();
        let norm: f64 = want_raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (got, want) in q.embedding.data().iter().zip(&want_raw) {
            assert!((got - want / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_segment_list_is_error() {
        let p = provider();
        assert!(matches!(
            build_audio_query("x", Role::Novel, &[], &p),
            Err(QuerybankError::NoSegments)
        ));
    }

    #[test]
    fn fixed_modes_are_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(
                sample_modality("a", true, true, ModalityMode::TextOnly, &mut rng).unwrap(),
                Modality::Text
            );
            assert_eq!(
                sample_modality("a", true, true, ModalityMode::AudioOnly, &mut rng).unwrap(),
                Modality::Audio
            );
        }
    }

    #[test]
    fn missing_modality_falls_back_to_available_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(
            sample_modality("a", true, false, ModalityMode::Mixed, &mut rng).unwrap(),
            Modality::Text
        );
        assert_eq!(
            sample_modality("a", false, true, ModalityMode::TextOnly, &mut rng).unwrap(),
            Modality::Audio
        );
        assert!(matches!(
            sample_modality("a", false, false, ModalityMode::Mixed, &mut rng),
            Err(QuerybankError::NoModality(_))
        ));
    }

    #[test]
    fn mixed_mode_is_a_fair_coin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut text = 0usize;
        for _ in 0..10_000 {
            if sample_modality("a", true, true, ModalityMode::Mixed, &mut rng).unwrap()
                == Modality::Text
            {
                text += 1;
            }
        }
        let frac = text as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "text fraction {frac}");
    }

    fn store_with(base_names: &[&str], novel_names: &[&str]) -> QueryStore {
        let p = provider();
        let base = base_names
            .iter()
            .map(|n| build_text_query(n, Role::Base, &p).unwrap())
            .collect();
        let novel = novel_names
            .iter()
            .map(|n| build_text_query(n, Role::Novel, &p).unwrap())
            .collect();
        QueryStore::new(base, novel).unwrap()
    }

    #[test]
    fn store_orders_base_before_novel() {
        let s = store_with(&["a", "b"], &["c"]);
        let ids: Vec<&str> = s.entries().iter().map(|q| q.class_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(s.base().len(), 2);
        assert_eq!(s.novel().len(), 1);
    }

    #[test]
    fn store_rejects_duplicate_ids() {
        let p = provider();
        let base = vec![build_text_query("a", Role::Base, &p).unwrap()];
        let novel = vec![build_text_query("a", Role::Novel, &p).unwrap()];
        assert!(matches!(
            QueryStore::new(base, novel),
            Err(QuerybankError::DuplicateClassId(_))
        ));
    }

    #[test]
    fn store_round_trips_bit_exactly() {
        let p = provider();
        let base = vec![
            build_text_query("alarm", Role::Base, &p).unwrap(),
            build_audio_query("engine", Role::Base, &[constant_mel(4, 8, 0.2)], &p).unwrap(),
        ];
        let novel = vec![build_text_query("novel siren", Role::Novel, &p).unwrap()];
        let store = QueryStore::new(base, novel).unwrap();
        let path = std::env::temp_dir().join(format!("ovsed_store_{}.bin", std::process::id()));
        save_store(&store, &path).unwrap();
        let back = load_store(&path).unwrap();
        assert_eq!(store.base_count, back.base_count);
        assert_eq!(store.entries.len(), back.entries.len());
        for (a, b) in store.entries.iter().zip(&back.entries) {
            assert_eq!(a.class_id, b.class_id);
            assert_eq!(a.modality, b.modality);
            assert_eq!(a.role, b.role);
            assert_eq!(a.provenance, b.provenance);
            // bit-exact: every stored value is f32-representable
            assert_eq!(a.embedding.data(), b.embedding.data());
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn load_rejects_corrupted_header() {
        let path = std::env::temp_dir().join(format!("ovsed_badstore_{}.bin", std::process::id()));
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_store(&path).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn assemble_appends_novel_after_base() {
        let s = store_with(&["a", "b"], &[]);
        let p = provider();
        let novel = vec![build_text_query("c", Role::Novel, &p).unwrap()];
        let q = assemble_inference_queries(&s, &novel).unwrap();
        let ids: Vec<&str> = q.iter().map(|v| v.class_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);

        let unchanged = assemble_inference_queries(&s, &[]).unwrap();
        assert_eq!(unchanged.len(), 2);
        assert_eq!(unchanged[0].class_id, "a");
    }

    #[test]
    fn assemble_rejects_duplicate_class() {
        let s = store_with(&["a"], &[]);
        let p = provider();
        let novel = vec![build_text_query("a", Role::Novel, &p).unwrap()];
        assert!(matches!(
            assemble_inference_queries(&s, &novel),
            Err(QuerybankError::DuplicateClassId(_))
        ));
    }

    #[test]
    fn query_matrix_stacks_in_order() {
        let s = store_with(&["a", "b", "c"], &[]);
        let m = query_matrix(s.entries()).unwrap();
        assert_eq!(m.shape(), &[3, 16]);
        for (i, q) in s.entries().iter().enumerate() {
            assert_eq!(m.row(i), q.embedding.data());
        }
    }
}
