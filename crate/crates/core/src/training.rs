//! Training: the asymmetric focal objective, target rasterization, a
//! decoupled-weight-decay Adam optimizer with backbone/head groups, a
//! synthetic clip generator for desk-scale runs, and the train loop.

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{build_mask, detector_forward, DecoderError, MaskStrategy, ModelConfig};
use crate::frontend::{log_mel, mixup, FrontendConfig, FrontendError, MelSpectrogram, Waveform};
use crate::numerics::{Graph, NodeId, NumericsError, ParamGroup, ParamSet, Tensor};
use crate::roster::{Ontology, RosterError, StrongLabel};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    ShapeMismatch(String),
    #[error(
        "inconsistent targets for class {class}: clip target {clip} but frame-target max {frame_max}"
    )]
    InconsistentTargets {
        class: usize,
        clip: f64,
        frame_max: f64,
    },
    #[error("loss became non-finite at step {step} (frame {frame}, clip {clip})")]
    Diverged { step: usize, frame: f64, clip: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Roster(#[from] RosterError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Asymmetric focal loss settings. With both exponents at zero and no
/// margin this reduces to plain binary cross-entropy.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Subtracted from the probability before the negative term; easy
    /// negatives below the margin contribute exactly zero.
    pub prob_margin: f64,
    /// Probabilities are clamped to [eps, 1 - eps] before any log.
    pub clamp_eps: f64,
    /// Weight of the clip-level term relative to the frame-level term.
    pub clip_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 2.0,
            prob_margin: 0.05,
            clamp_eps: 1e-7,
            clip_weight: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(TrainingError::Config(format!(
                "clamp_eps {} outside (0, 0.5)",
                self.clamp_eps
            )));
        }
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 || self.prob_margin < 0.0 {
            return Err(TrainingError::Config(
                "focal exponents and margin must be nonnegative".into(),
            ));
        }
        if self.clip_weight < 0.0 {
            return Err(TrainingError::Config("clip_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean asymmetric focal loss between predicted probabilities and targets
/// of the same shape, composed from graph primitives so it backpropagates.
///
/// Per element, with p clamped and p_m = max(p - margin, 0):
///   -y (1-p)^g+ ln p  -  (1-y) p_m^g- ln(1 - p_m)
pub fn asymmetric_focal_loss(
    g: &mut Graph,
    pred: NodeId,
    target: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId, TrainingError> {
    cfg.validate()?;
    if g.shape(pred) != g.shape(target) {
        return Err(TrainingError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let eps = cfg.clamp_eps;
    let p = g.clamp(pred, eps, 1.0 - eps);

    let neg_p = g.scale(p, -1.0);
    let one_minus_p = g.add_const(neg_p, 1.0);
    let ln_p = g.ln(p);
    let pos_focal = g.pow_const(one_minus_p, cfg.gamma_pos);
    let pos_inner = g.mul(pos_focal, ln_p)?;
    let pos = g.mul(target, pos_inner)?;

    let shifted = g.add_const(p, -cfg.prob_margin);
    let p_m = g.relu(shifted);
    let neg_pm = g.scale(p_m, -1.0);
    // 1 - p_m >= eps because p <= 1 - eps
    let one_minus_pm = g.add_const(neg_pm, 1.0);
    let ln_1mpm = g.ln(one_minus_pm);
    let neg_focal = g.pow_const(p_m, cfg.gamma_neg);
    let neg_inner = g.mul(neg_focal, ln_1mpm)?;
    let neg_target = g.scale(target, -1.0);
    let one_minus_y = g.add_const(neg_target, 1.0);
    let neg = g.mul(one_minus_y, neg_inner)?;

    let both = g.add(pos, neg)?;
    let flipped = g.scale(both, -1.0);
    Ok(g.mean_all(flipped))
}

/// The three loss nodes of one clip: total = frame + clip_weight * clip.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub frame: NodeId,
    pub clip: NodeId,
}

/// Validates target consistency (the clip target must equal the maximum of
/// the class's frame targets) and composes the combined objective.
pub fn total_loss(
    g: &mut Graph,
    frame_pred: NodeId,
    clip_pred: NodeId,
    frame_targets: &Tensor,
    clip_targets: &Tensor,
    cfg: &LossConfig,
) -> Result<LossNodes, TrainingError> {
    let fshape = frame_targets.shape().to_vec();
    if fshape.len() != 2 || clip_targets.shape() != [fshape[1]] {
        return Err(TrainingError::ShapeMismatch(format!(
            "frame targets {:?} vs clip targets {:?}",
            fshape,
            clip_targets.shape()
        )));
    }
    let (t, n) = (fshape[0], fshape[1]);
    for i in 0..n {
        let mut frame_max: f64 = 0.0;
        for ti in 0..t {
            frame_max = frame_max.max(frame_targets.at2(ti, i));
        }
        let clip = clip_targets.data()[i];
        if (clip - frame_max).abs() > 1e-6 {
            return Err(TrainingError::InconsistentTargets {
                class: i,
                clip,
                frame_max,
            });
        }
    }
    let frame_t = g.constant(frame_targets.clone());
    let clip_t = g.constant(clip_targets.clone());
    let frame = asymmetric_focal_loss(g, frame_pred, frame_t, cfg)?;
    let clip = asymmetric_focal_loss(g, clip_pred, clip_t, cfg)?;
    let clip_scaled = g.scale(clip, cfg.clip_weight);
    let total = g.add(frame, clip_scaled)?;
    Ok(LossNodes { total, frame, clip })
}

/// Rasterizes strong labels onto the model's frame grid: frame t is
/// positive for a class when the frame center (t + 0.5) / fps falls inside
/// one of that class's spans. Labels whose class is not listed are ignored.
pub fn rasterize_frame_targets(
    labels: &[StrongLabel],
    classes: &[String],
    t_frames: usize,
    fps: f64,
) -> Result<Tensor, TrainingError> {
    if fps <= 0.0 || t_frames == 0 || classes.is_empty() {
        return Err(TrainingError::Config(format!(
            "rasterize needs positive fps/frames/classes, got fps {fps}, t {t_frames}, n {}",
            classes.len()
        )));
    }
    let mut vals = vec![0.0; t_frames * classes.len()];
    for (i, class) in classes.iter().enumerate() {
        for l in labels.iter().filter(|l| &l.class_id == class) {
            for ti in 0..t_frames {
                let center = (ti as f64 + 0.5) / fps;
                if l.onset <= center && center < l.offset {
                    vals[ti * classes.len() + i] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::from_values(&[t_frames, classes.len()], &vals).expect("consistent shape"))
}

/// Clip targets derived from frame targets: per-class maximum over time.
pub fn clip_targets_from_frames(frame_targets: &Tensor) -> Result<Tensor, TrainingError> {
    let shape = frame_targets.shape();
    if shape.len() != 2 {
        return Err(TrainingError::ShapeMismatch(format!(
            "frame targets must be rank 2, got {shape:?}"
        )));
    }
    let (t, n) = (shape[0], shape[1]);
    let mut vals = vec![0.0f64; n];
    for i in 0..n {
        for ti in 0..t {
            vals[i] = vals[i].max(frame_targets.at2(ti, i));
        }
    }
    Ok(Tensor::from_values(&[n], &vals).expect("consistent shape"))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay and two learning-rate groups. The
/// backbone trains much slower than the heads (1:13 by default) and can be
/// frozen entirely for the first part of a run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_backbone: 1e-4,
            lr_head: 1.3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.lr_backbone < 0.0 || self.lr_head < 0.0 || self.weight_decay < 0.0 {
            return Err(TrainingError::Config(
                "learning rates and weight decay must be nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainingError::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(TrainingError::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// Moment state lives in f64; parameter values are quantized back to f32
/// precision after every update to keep stored weights on the f32 grid.
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: usize,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet) -> Result<Self, TrainingError> {
        cfg.validate()?;
        let m = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Ok(AdamW {
            cfg,
            m,
            v,
            step_count: 0,
        })
    }

    /// One update from the gradients currently accumulated in `params`.
    /// Frozen backbone parameters are skipped entirely, moments included.
    pub fn step(&mut self, params: &mut ParamSet, freeze_backbone: bool) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let p = params.param_mut(id);
            if freeze_backbone && p.group == ParamGroup::Backbone {
                continue;
            }
            let lr = match p.group {
                ParamGroup::Backbone => self.cfg.lr_backbone,
                ParamGroup::Head => self.cfg.lr_head,
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let grad = p.grad.data().to_vec();
            let value = p.value.data_mut();
            for (k, gk) in grad.iter().enumerate() {
                m[k] = self.cfg.beta1 * m[k] + (1.0 - self.cfg.beta1) * gk;
                v[k] = self.cfg.beta2 * v[k] + (1.0 - self.cfg.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * value[k]);
            }
            p.value.quantize();
        }
    }
}

/// Hex digest over the names and f32 payloads of one parameter group.
/// Equal hashes mean the group's weights did not move.
pub fn param_group_hash(params: &ParamSet, group: ParamGroup) -> String {
    let mut h = Sha256::new();
    for (_, p) in params.iter() {
        if p.group != group {
            continue;
        }
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update((*v as f32).to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic clips
// ---------------------------------------------------------------------------

/// Parametric families the generator can place on a noise floor. Each leaf
/// class binds one family instance with fixed parameters, so a class always
/// sounds the same up to phase and timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "family")]
pub enum SoundFamily {
    Tone { freq_hz: f64 },
    Chirp { start_hz: f64, end_hz: f64 },
    NoiseBand { low_hz: f64, high_hz: f64 },
    AmTone { freq_hz: f64, rate_hz: f64 },
}

impl SoundFamily {
    /// Mid-level ontology node this family hangs under.
    pub fn group_name(&self) -> &'static str {
        match self {
            SoundFamily::Tone { .. } => "tonal",
            SoundFamily::Chirp { .. } => "swept",
            SoundFamily::NoiseBand { .. } => "noisy",
            SoundFamily::AmTone { .. } => "modulated",
        }
    }
}

// no deny_unknown_fields here: serde cannot combine it with flatten
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthClass {
    pub class_id: String,
    #[serde(flatten)]
    pub family: SoundFamily,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: Vec<SynthClass>,
    /// Relative draw weights per class; None means uniform. Skewed weights
    /// make some classes genuinely rare, which the common/rare split needs.
    pub class_weights: Option<Vec<f64>>,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub min_events: usize,
    pub max_events: usize,
    pub min_event_seconds: f64,
    pub max_event_seconds: f64,
    /// Noise floor RMS in dB full scale.
    pub noise_floor_db: f64,
    /// Event RMS above the floor, in dB.
    pub snr_db: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: default_synth_classes(),
            class_weights: None,
            clip_seconds: 2.56,
            sample_rate: 16_000,
            min_events: 1,
            max_events: 4,
            min_event_seconds: 0.3,
            max_event_seconds: 1.2,
            noise_floor_db: -50.0,
            snr_db: 20.0,
        }
    }
}

/// Sixteen leaf classes spread over the four families.
pub fn default_synth_classes() -> Vec<SynthClass> {
    let mut out = Vec::new();
    for (id, f) in [
        ("tone_250hz", 250.0),
        ("tone_500hz", 500.0),
        ("tone_1000hz", 1000.0),
        ("tone_2000hz", 2000.0),
    ] {
        out.push(SynthClass {
            class_id: id.into(),
            family: SoundFamily::Tone { freq_hz: f },
        });
    }
    for (id, a, b) in [
        ("chirp_up_low", 300.0, 900.0),
        ("chirp_down_low", 900.0, 300.0),
        ("chirp_up_high", 1000.0, 3000.0),
        ("chirp_down_high", 3000.0, 1000.0),
    ] {
        out.push(SynthClass {
            class_id: id.into(),
            family: SoundFamily::Chirp {
                start_hz: a,
                end_hz: b,
            },
        });
    }
    for (id, lo, hi) in [
        ("band_low", 300.0, 700.0),
        ("band_mid", 1000.0, 2000.0),
        ("band_high", 2500.0, 4000.0),
        ("band_top", 5000.0, 7000.0),
    ] {
        out.push(SynthClass {
            class_id: id.into(),
            family: SoundFamily::NoiseBand {
                low_hz: lo,
                high_hz: hi,
            },
        });
    }
    for (id, f, r) in [
        ("am_500hz_4hz", 500.0, 4.0),
        ("am_800hz_16hz", 800.0, 16.0),
        ("am_1500hz_8hz", 1500.0, 8.0),
        ("am_3000hz_2hz", 3000.0, 2.0),
    ] {
        out.push(SynthClass {
            class_id: id.into(),
            family: SoundFamily::AmTone {
                freq_hz: f,
                rate_hz: r,
            },
        });
    }
    out
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.classes.is_empty() {
            return Err(TrainingError::Config("no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if c.class_id.trim().is_empty() {
                return Err(TrainingError::Config("empty class id".into()));
            }
            if !seen.insert(c.class_id.as_str()) {
                return Err(TrainingError::Config(format!(
                    "duplicate class id {:?}",
                    c.class_id
                )));
            }
        }
        if self.clip_seconds <= 0.0 || self.sample_rate == 0 {
            return Err(TrainingError::Config("clip length and sample rate must be positive".into()));
        }
        if self.min_events > self.max_events {
            return Err(TrainingError::Config(format!(
                "min_events {} > max_events {}",
                self.min_events, self.max_events
            )));
        }
        if !(0.0 < self.min_event_seconds && self.min_event_seconds <= self.max_event_seconds) {
            return Err(TrainingError::Config("bad event duration range".into()));
        }
        if self.max_event_seconds > self.clip_seconds {
            return Err(TrainingError::Config(format!(
                "max event {} s does not fit in a {} s clip",
                self.max_event_seconds, self.clip_seconds
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.classes.len() {
                return Err(TrainingError::Config(format!(
                    "{} class weights vs {} classes",
                    w.len(),
                    self.classes.len()
                )));
            }
            if w.iter().any(|x| *x < 0.0 || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
                return Err(TrainingError::Config(
                    "class weights must be nonnegative with positive sum".into(),
                ));
            }
        }
        Ok(())
    }

    /// Three-level ontology over the spec's classes: leaves under family
    /// groups under a single root.
    pub fn ontology(&self) -> Ontology {
        let mut edges = Vec::new();
        for c in &self.classes {
            edges.push((c.class_id.clone(), c.family.group_name().to_string()));
        }
        for group in ["tonal", "swept", "noisy", "modulated"] {
            edges.push((group.to_string(), "sound".to_string()));
        }
        Ontology::new(&edges, &[]).expect("family tree is acyclic")
    }

    /// All class ids the generated rosters can mention once labels are
    /// closed over the ontology: leaves, family groups, root.
    pub fn all_class_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = self.classes.iter().map(|c| c.class_id.clone()).collect();
        for group in ["tonal", "swept", "noisy", "modulated"] {
            out.push(group.to_string());
        }
        out.push("sound".to_string());
        out
    }
}

/// Raw event samples at unit-ish amplitude with 10 ms edge ramps.
fn synth_event_samples(family: &SoundFamily, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dur = n as f64 / sr;
    let mut out = vec![0.0; n];
    match family {
        SoundFamily::Tone { freq_hz } => {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for (i, o) in out.iter_mut().enumerate() {
                *o = (std::f64::consts::TAU * freq_hz * i as f64 / sr + phase).sin();
            }
        }
        SoundFamily::Chirp { start_hz, end_hz } => {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let inst = start_hz * t + (end_hz - start_hz) * t * t / (2.0 * dur);
                *o = (std::f64::consts::TAU * inst + phase).sin();
            }
        }
        SoundFamily::NoiseBand { low_hz, high_hz } => {
            // dense random sinusoids across the band
            const K: usize = 48;
            for _ in 0..K {
                let f = rng.gen_range(*low_hz..*high_hz);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for (i, o) in out.iter_mut().enumerate() {
                    *o += (std::f64::consts::TAU * f * i as f64 / sr + phase).sin();
                }
            }
        }
        SoundFamily::AmTone { freq_hz, rate_hz } => {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let env = 0.6 + 0.4 * (std::f64::consts::TAU * rate_hz * t).sin();
                *o = env * (std::f64::consts::TAU * freq_hz * t + phase).sin();
            }
        }
    }
    let ramp = ((0.01 * sr) as usize).min(n / 2).max(1);
    for i in 0..ramp {
        let w = i as f64 / ramp as f64;
        out[i] *= w;
        out[n - 1 - i] *= w;
    }
    out
}

fn rms(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len().max(1) as f64).sqrt()
}

/// One clip: gaussian noise floor plus `min..=max` events of classes drawn
/// uniformly, each RMS-calibrated to sit `snr_db` above the floor. Event
/// boundaries are snapped to sample positions; events may overlap. Returns
/// the waveform and its onset-sorted labels (empty when zero events drawn).
pub fn generate_synthetic_clip(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Waveform, Vec<StrongLabel>), TrainingError> {
    spec.validate()?;
    let sr = spec.sample_rate as f64;
    let n = (spec.clip_seconds * sr).round() as usize;
    let floor_rms = 10f64.powf(spec.noise_floor_db / 20.0);
    let normal = Normal::new(0.0, floor_rms).expect("positive sigma");
    let mut samples: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();

    let n_events = rng.gen_range(spec.min_events..=spec.max_events);
    let target_rms = floor_rms * 10f64.powf(spec.snr_db / 20.0);
    let class_picker = spec
        .class_weights
        .as_ref()
        .map(|w| WeightedIndex::new(w).expect("validated weights"));
    let mut labels = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        let class = &spec.classes[match &class_picker {
            Some(p) => p.sample(rng),
            None => rng.gen_range(0..spec.classes.len()),
        }];
        let dur = rng.gen_range(spec.min_event_seconds..=spec.max_event_seconds);
        let dur_samples = ((dur * sr).round() as usize).clamp(2, n);
        let start = rng.gen_range(0..=n - dur_samples);
        let mut ev = synth_event_samples(&class.family, dur_samples, sr, rng);
        let r = rms(&ev);
        if r > 0.0 {
            let s = target_rms / r;
            for x in &mut ev {
                *x *= s;
            }
        }
        for (i, x) in ev.iter().enumerate() {
            samples[start + i] += x;
        }
        labels.push(StrongLabel::new(
            class.class_id.clone(),
            start as f64 / sr,
            (start + dur_samples) as f64 / sr,
        )?);
    }
    labels.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class_id.cmp(&b.class_id)));
    Ok((
        Waveform {
            samples,
            sample_rate: spec.sample_rate,
        },
        labels,
    ))
}

/// Deterministic per-clip RNG: clips are independent of dataset size and
/// generation order.
pub fn clip_rng(dataset_seed: u64, clip_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(dataset_seed ^ clip_index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// ---------------------------------------------------------------------------
// Train loop
// ---------------------------------------------------------------------------

/// One prepared training clip: log-mel features plus frame targets already
/// on the model's fused time grid.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub clip_id: String,
    pub mel: MelSpectrogram,
    pub frame_targets: Tensor,
}

/// Computes features and rasterizes targets for one clip. Mel frames are
/// trimmed down to a multiple of the coarse patch length; targets land on
/// the fused grid (one row per `time_pool` mel frames).
pub fn prepare_sample(
    clip_id: &str,
    wave: &Waveform,
    labels: &[StrongLabel],
    classes: &[String],
    front_cfg: &FrontendConfig,
    model_cfg: &ModelConfig,
) -> Result<TrainSample, TrainingError> {
    let mut mel = log_mel(wave, front_cfg)?;
    let frames = mel.values.shape()[0];
    let patch = model_cfg.encoder.patch_time;
    let keep = frames - frames % patch;
    if keep == 0 {
        return Err(TrainingError::ShapeMismatch(format!(
            "clip {clip_id:?} yields {frames} mel frames, fewer than one {patch}-frame patch"
        )));
    }
    if keep != frames {
        let bins = mel.values.shape()[1];
        let vals: Vec<f64> = mel.values.data()[..keep * bins].to_vec();
        mel.values = Tensor::from_values(&[keep, bins], &vals).expect("consistent shape");
    }
    let t_fused = keep / model_cfg.encoder.time_pool();
    let fused_fps = model_cfg.encoder.mel_fps / model_cfg.encoder.time_pool() as f64;
    let frame_targets = rasterize_frame_targets(labels, classes, t_fused, fused_fps)?;
    Ok(TrainSample {
        clip_id: clip_id.to_string(),
        mel,
        frame_targets,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Backbone parameters stay frozen for this many leading steps.
    pub freeze_steps: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Beta(alpha, alpha) feature/label mixing; None disables it.
    pub mixup_alpha: Option<f64>,
    pub mask: MaskStrategy,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 16,
            freeze_steps: 100,
            seed: 7,
            log_every: 10,
            mixup_alpha: None,
            mask: MaskStrategy::TrainNoMask,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

/// Per-step averages, serialized as one JSON line each when a log sink is
/// given.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub frame_loss: f64,
    pub clip_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.metrics.first().map(|m| m.loss).unwrap_or(f64::NAN)
    }
    pub fn last_loss(&self) -> f64 {
        self.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN)
    }
}

/// Minibatch training over prepared samples. Weighted sampling when
/// `weights` is given; when `batch_size == samples.len()` and no weights
/// are set, every step sees the whole set in order (full-batch mode).
/// Per-clip graphs are built, summed, and backpropagated in batch order,
/// so runs with equal configs reproduce bit for bit.
pub fn train(
    params: &mut ParamSet,
    model: &ModelConfig,
    queries: &Tensor,
    samples: &[TrainSample],
    weights: Option<&[f64]>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport, TrainingError> {
    model.validate()?;
    cfg.optimizer.validate()?;
    cfg.loss.validate()?;
    if samples.is_empty() {
        return Err(TrainingError::Config("no training samples".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(TrainingError::Config("steps and batch_size must be positive".into()));
    }
    let qshape = queries.shape();
    if qshape.len() != 2 || qshape[1] != model.decoder.dim {
        return Err(TrainingError::ShapeMismatch(format!(
            "queries {qshape:?} vs model dim {}",
            model.decoder.dim
        )));
    }
    let n_classes = qshape[0];
    for s in samples {
        let ts = s.frame_targets.shape();
        if ts.len() != 2 || ts[1] != n_classes {
            return Err(TrainingError::ShapeMismatch(format!(
                "clip {:?} targets {ts:?} vs {n_classes} query classes",
                s.clip_id
            )));
        }
    }
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(TrainingError::ShapeMismatch(format!(
                "{} weights vs {} samples",
                w.len(),
                samples.len()
            )));
        }
    }
    if let Some(a) = cfg.mixup_alpha {
        if a <= 0.0 {
            return Err(TrainingError::Config("mixup_alpha must be positive".into()));
        }
    }

    let mask = build_mask(n_classes, 0, cfg.mask);
    let mut opt = AdamW::new(cfg.optimizer, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = weights
        .map(|w| WeightedIndex::new(w).map_err(|e| TrainingError::Config(format!("weights: {e}"))))
        .transpose()?;
    let full_batch = sampler.is_none() && cfg.batch_size == samples.len();
    let beta = cfg
        .mixup_alpha
        .map(|a| rand_distr::Beta::new(a, a).expect("positive alpha"));

    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let indices: Vec<usize> = if full_batch {
            (0..samples.len()).collect()
        } else {
            (0..cfg.batch_size)
                .map(|_| match &sampler {
                    Some(s) => s.sample(&mut rng),
                    None => rng.gen_range(0..samples.len()),
                })
                .collect()
        };

        params.zero_grads();
        let mut sums = (0.0, 0.0, 0.0);
        for &i in &indices {
            let (mel, frame_targets) = match &beta {
                Some(b) => {
                    let j = match &sampler {
                        Some(s) => s.sample(&mut rng),
                        None => rng.gen_range(0..samples.len()),
                    };
                    let lambda = b.sample(&mut rng);
                    let (m, t) = mixup(
                        &samples[i].mel,
                        &samples[j].mel,
                        &samples[i].frame_targets,
                        &samples[j].frame_targets,
                        lambda,
                    )?;
                    (m, t)
                }
                None => (samples[i].mel.clone(), samples[i].frame_targets.clone()),
            };
            let clip_targets = clip_targets_from_frames(&frame_targets)?;

            let mut g = Graph::new();
            let mel_node = g.constant(mel.values);
            let q_node = g.constant(queries.clone());
            let pred = detector_forward(&mut g, params, mel_node, q_node, &mask, model)?;
            let loss = total_loss(
                &mut g,
                pred.frame,
                pred.clip,
                &frame_targets,
                &clip_targets,
                &cfg.loss,
            )?;
            let frame_v = g.value(loss.frame).data()[0];
            let clip_v = g.value(loss.clip).data()[0];
            let total_v = g.value(loss.total).data()[0];
            if !total_v.is_finite() {
                return Err(TrainingError::Diverged {
                    step,
                    frame: frame_v,
                    clip: clip_v,
                });
            }
            sums.0 += total_v;
            sums.1 += frame_v;
            sums.2 += clip_v;

            let scaled = g.scale(loss.total, 1.0 / indices.len() as f64);
            let grads = g.backward(scaled)?;
            grads.accumulate_into(params);
        }
        opt.step(params, step < cfg.freeze_steps);

        let b = indices.len() as f64;
        let m = StepMetrics {
            step,
            loss: sums.0 / b,
            frame_loss: sums.1 / b,
            clip_loss: sums.2 / b,
        };
        metrics.push(m);
        if let Some(sink) = log.as_deref_mut() {
            if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
                let line = serde_json::to_string(&m)
                    .map_err(|e| TrainingError::Config(format!("metrics encode: {e}")))?;
                writeln!(sink, "{line}")?;
            }
        }
    }
    Ok(TrainReport { metrics })
}
