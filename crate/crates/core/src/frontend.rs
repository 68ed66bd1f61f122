//! Audio frontend: waveforms, log-mel spectrograms, and training-time
//! augmentations.
//!
//! Framing pads the signal symmetrically by (win − hop)/2 zeros on each
//! side, so a clip of `len` samples yields exactly floor(len / hop) frames;
//! a 10 s clip at 16 kHz with the default 160-sample hop gives 1000 frames
//! (100 per second).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::path::Path;
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("waveform too short: {len} samples, window {win}")]
    TooShort { len: usize, win: usize },
    #[error("empty waveform")]
    Empty,
    #[error("sample rate {got} Hz, pipeline expects {want} Hz")]
    SampleRate { got: u32, want: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("time shift {shift} out of range for {frames} frames")]
    BadShift { shift: i64, frames: usize },
    #[error("bad frontend config: {0}")]
    BadConfig(String),
    #[error("wav file: {0}")]
    Wav(String),
    #[error("wav i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            win: 1024,
            hop: 160,
            mel_bins: 64,
            fmin_hz: 0.0,
            fmax_hz: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<(), FrontendError> {
        if self.win == 0 || self.hop == 0 || self.hop > self.win {
            return Err(FrontendError::BadConfig(format!(
                "win {} / hop {}",
                self.win, self.hop
            )));
        }
        if self.mel_bins == 0 {
            return Err(FrontendError::BadConfig("zero mel bins".into()));
        }
        if !(self.fmin_hz >= 0.0 && self.fmax_hz > self.fmin_hz) {
            return Err(FrontendError::BadConfig(format!(
                "band [{}, {}] Hz",
                self.fmin_hz, self.fmax_hz
            )));
        }
        if self.fmax_hz > self.sample_rate as f64 / 2.0 {
            return Err(FrontendError::BadConfig(format!(
                "fmax {} above Nyquist",
                self.fmax_hz
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(FrontendError::BadConfig("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }
}

/// Mono audio in [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, FrontendError> {
        if samples.is_empty() {
            return Err(FrontendError::Empty);
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a mono 16-bit PCM WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform, FrontendError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| FrontendError::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(FrontendError::Wav(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(FrontendError::Wav(format!(
            "{}: expected 16-bit PCM",
            path.display()
        )));
    }
    let samples: Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples.map_err(|e| FrontendError::Wav(e.to_string()))?;
    Waveform::new(
        samples.iter().map(|&s| s as f64 / 32768.0).collect(),
        spec.sample_rate,
    )
}

/// Writes a mono 16-bit PCM WAV file; samples are clamped to [-1, 1].
pub fn write_wav(w: &Waveform, path: &Path) -> Result<(), FrontendError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| FrontendError::Wav(e.to_string()))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| FrontendError::Wav(e.to_string()))?;
    }
    writer.finalize().map_err(|e| FrontendError::Wav(e.to_string()))?;
    Ok(())
}

/// Log-power mel spectrogram, [frames×mel_bins].
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub hop_seconds: f64,
    pub mel_bins: usize,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency (Hz) of mel band `m` under `cfg`'s filterbank.
pub fn mel_band_center_hz(cfg: &FrontendConfig, m: usize) -> f64 {
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    let step = (hi - lo) / (cfg.mel_bins + 1) as f64;
    mel_to_hz(lo + step * (m + 1) as f64)
}

/// Triangular HTK-style filterbank, rows = mel bands, cols = FFT bins.
fn mel_filterbank(cfg: &FrontendConfig, n_fft: usize) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    let step = (hi - lo) / (cfg.mel_bins + 1) as f64;
    let edges_hz: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;

    let mut bank = vec![vec![0.0; n_bins]; cfg.mel_bins];
    for m in 0..cfg.mel_bins {
        let (l, c, r) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        for (k, w) in bank[m].iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > l && f < c {
                *w = (f - l) / (c - l);
            } else if f == c {
                *w = 1.0;
            } else if f > c && f < r {
                *w = (r - f) / (r - c);
            }
        }
    }
    bank
}

/// STFT power → mel filterbank → ln(max(x, floor)).
pub fn log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<MelSpectrogram, FrontendError> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(FrontendError::SampleRate {
            got: w.sample_rate,
            want: cfg.sample_rate,
        });
    }
    if w.samples.len() < cfg.win {
        return Err(FrontendError::TooShort {
            len: w.samples.len(),
            win: cfg.win,
        });
    }

    let pad = cfg.win - cfg.hop;
    let left = pad / 2;
    let mut padded = vec![0.0; w.samples.len() + pad];
    padded[left..left + w.samples.len()].copy_from_slice(&w.samples);
    let frames = (padded.len() - cfg.win) / cfg.hop + 1;

    // periodic Hann window
    let window: Vec<f64> = (0..cfg.win)
        .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / cfg.win as f64).cos()))
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.win);
    let n_bins = cfg.win / 2 + 1;
    let bank = mel_filterbank(cfg, cfg.win);

    let mut out = vec![0.0; frames * cfg.mel_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.win];
    let mut power = vec![0.0; n_bins];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(&w, &p)| w * p).sum();
            out[t * cfg.mel_bins + m] = e.max(cfg.log_floor).ln();
        }
    }

    Ok(MelSpectrogram {
        values: Tensor::from_values(&[frames, cfg.mel_bins], &out).expect("shape consistent"),
        hop_seconds: cfg.hop_seconds(),
        mel_bins: cfg.mel_bins,
    })
}

/// Convex feature/label mixture: λ·a + (1−λ)·b. Exact identity at λ∈{0,1}.
pub fn mixup(
    a: &MelSpectrogram,
    b: &MelSpectrogram,
    labels_a: &Tensor,
    labels_b: &Tensor,
    lambda: f64,
) -> Result<(MelSpectrogram, Tensor), FrontendError> {
    if a.values.shape() != b.values.shape() {
        return Err(FrontendError::ShapeMismatch(format!(
            "features {:?} vs {:?}",
            a.values.shape(),
            b.values.shape()
        )));
    }
    if labels_a.shape() != labels_b.shape() {
        return Err(FrontendError::ShapeMismatch(format!(
            "labels {:?} vs {:?}",
            labels_a.shape(),
            labels_b.shape()
        )));
    }
    let mix = |x: &Tensor, y: &Tensor| {
        let vals: Vec<f64> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&xa, &xb)| lambda * xa + (1.0 - lambda) * xb)
            .collect();
        Tensor::from_values(x.shape(), &vals).expect("shape consistent")
    };
    Ok((
        MelSpectrogram {
            values: mix(&a.values, &b.values),
            hop_seconds: a.hop_seconds,
            mel_bins: a.mel_bins,
        },
        mix(labels_a, labels_b),
    ))
}

/// Circular shift along time, applied identically to features and frame
/// labels. Positive shift moves content toward later frames.
pub fn time_shift(
    s: &MelSpectrogram,
    labels: &Tensor,
    shift: i64,
) -> Result<(MelSpectrogram, Tensor), FrontendError> {
    let frames = s.frames();
    if labels.shape()[0] != frames {
        return Err(FrontendError::ShapeMismatch(format!(
            "labels have {} rows, features {frames}",
            labels.shape()[0]
        )));
    }
    if shift.unsigned_abs() as usize >= frames {
        return Err(FrontendError::BadShift {
            shift,
            frames,
        });
    }
    let rotate = |x: &Tensor| {
        let cols = x.shape()[1];
        let mut vals = vec![0.0; x.len()];
        for t in 0..frames {
            let src = (t as i64 - shift).rem_euclid(frames as i64) as usize;
            vals[t * cols..(t + 1) * cols].copy_from_slice(x.row(src));
        }
        Tensor::from_values(x.shape(), &vals).expect("shape consistent")
    };
    Ok((
        MelSpectrogram {
            values: rotate(&s.values),
            hop_seconds: s.hop_seconds,
            mel_bins: s.mel_bins,
        },
        rotate(labels),
    ))
}

/// Rectangle masked by spec_augment, for verification and logging.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskRect {
    pub time_start: usize,
    pub time_width: usize,
    pub freq_start: usize,
    pub freq_width: usize,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            time_masks: 2,
            max_time_width: 25,
            freq_masks: 2,
            max_freq_width: 8,
        }
    }
}

/// Masks random time and frequency stripes with the spectrogram mean
/// (computed before masking). Widths are clamped to the extents.
pub fn spec_augment(
    s: &MelSpectrogram,
    cfg: &SpecAugmentConfig,
    rng: &mut impl rand::Rng,
) -> (MelSpectrogram, Vec<MaskRect>) {
    let frames = s.frames();
    let bins = s.mel_bins;
    let mean = s.values.data().iter().sum::<f64>() / s.values.len() as f64;
    let mut vals = s.values.data().to_vec();
    let mut rects = Vec::new();

    for _ in 0..cfg.time_masks {
        let w = rng.gen_range(0..=cfg.max_time_width.min(frames.saturating_sub(1)));
        if w == 0 {
            continue;
        }
        let start = rng.gen_range(0..=frames - w);
        rects.push(MaskRect {
            time_start: start,
            time_width: w,
            freq_start: 0,
            freq_width: bins,
        });
        for t in start..start + w {
            vals[t * bins..(t + 1) * bins].fill(mean);
        }
    }
    for _ in 0..cfg.freq_masks {
        let w = rng.gen_range(0..=cfg.max_freq_width.min(bins.saturating_sub(1)));
        if w == 0 {
            continue;
        }
        let start = rng.gen_range(0..=bins - w);
        rects.push(MaskRect {
            time_start: 0,
            time_width: frames,
            freq_start: start,
            freq_width: w,
        });
        for t in 0..frames {
            vals[t * bins + start..t * bins + start + w].fill(mean);
        }
    }

    (
        MelSpectrogram {
            values: Tensor::from_values(s.values.shape(), &vals).expect("shape consistent"),
            hop_seconds: s.hop_seconds,
            mel_bins: s.mel_bins,
        },
        rects,
    )
}
