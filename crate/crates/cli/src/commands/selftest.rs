//! Built-in invariant checks that run in seconds with no dataset: storage
//! round trips, the frame/clip score bound, query masking isolation, the
//! median filter against a naive reference, and the mel frame count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovsed_core::decoder::{
    build_mask, register_model_params, DecoderConfig, MaskStrategy, ModelConfig,
};
use ovsed_core::encoder::EncoderConfig;
use ovsed_core::eval::median_filter;
use ovsed_core::frontend::{log_mel, FrontendConfig, Waveform};
use ovsed_core::numerics::{load_checkpoint, save_checkpoint, ParamSet, Tensor};
use ovsed_core::querybank::{
    build_text_query, load_store, query_matrix, save_store, QueryStore, Role, StubProvider,
};

use super::forward_scores;
use crate::CliError;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            mel_bins: 16,
            dim: 16,
            heads: 2,
            fine_blocks: 1,
            coarse_blocks: 1,
            patch_time: 8,
            upsample_factor: 4,
            mel_fps: 100.0,
        },
        decoder: DecoderConfig {
            dim: 16,
            heads: 2,
            event_blocks: 1,
            context_blocks: 1,
            conv_kernel: 7,
            pe_on_cross_keys: true,
        },
        ablation: Default::default(),
    }
}

fn temp_dir(tag: &str) -> Result<std::path::PathBuf, String> {
    let dir = std::env::temp_dir().join(format!(
        "ovsed-selftest-{}-{}",
        std::process::id(),
        tag
    ));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    Ok(dir)
}

fn random_mel(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> Tensor {
    let vals: Vec<f64> = (0..frames * bins).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Tensor::from_values(&[frames, bins], &vals).expect("shape")
}

fn store_round_trip() -> Result<(), String> {
    let dir = temp_dir("store")?;
    let provider = StubProvider::new(16, 11);
    let base = ["alpha", "beta", "gamma"]
        .iter()
        .map(|c| build_text_query(c, Role::Base, &provider))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let novel = ["delta"]
        .iter()
        .map(|c| build_text_query(c, Role::Novel, &provider))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let store = QueryStore::new(base, novel).map_err(|e| e.to_string())?;
    let path = dir.join("roundtrip.ovqs");
    save_store(&store, &path).map_err(|e| e.to_string())?;
    let loaded = load_store(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);
    if loaded.base().len() != store.base().len() || loaded.novel().len() != store.novel().len() {
        return Err("store shape changed across save/load".into());
    }
    for (a, b) in store
        .base()
        .iter()
        .chain(store.novel())
        .zip(loaded.base().iter().chain(loaded.novel()))
    {
        if a.class_id != b.class_id {
            return Err(format!("class order changed: {} vs {}", a.class_id, b.class_id));
        }
        for (x, y) in a.embedding.data().iter().zip(b.embedding.data()) {
            if x.to_bits() != y.to_bits() {
                return Err(format!("embedding of {} not bit-identical", a.class_id));
            }
        }
    }
    Ok(())
}

fn checkpoint_round_trip() -> Result<(), String> {
    let dir = temp_dir("ckpt")?;
    let model = tiny_model();
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    register_model_params(&model, &mut params, &mut rng).map_err(|e| e.to_string())?;
    let path = dir.join("roundtrip.ovck");
    save_checkpoint(&params, &path).map_err(|e| e.to_string())?;

    let mut reloaded = ParamSet::new();
    let mut rng2 = ChaCha8Rng::seed_from_u64(99);
    register_model_params(&model, &mut reloaded, &mut rng2).map_err(|e| e.to_string())?;
    load_checkpoint(&mut reloaded, &path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);

    for ((_, a), (_, b)) in params.iter().zip(reloaded.iter()) {
        if a.name != b.name {
            return Err(format!("parameter order changed: {} vs {}", a.name, b.name));
        }
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            if x.to_bits() != y.to_bits() {
                return Err(format!("{} not bit-identical after reload", a.name));
            }
        }
    }
    Ok(())
}

fn factorization_bound() -> Result<(), String> {
    let model = tiny_model();
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    register_model_params(&model, &mut params, &mut rng).map_err(|e| e.to_string())?;
    let provider = StubProvider::new(16, 23);
    let queries = ["a", "b", "c"]
        .iter()
        .map(|c| build_text_query(c, Role::Base, &provider))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let q = query_matrix(&queries).map_err(|e| e.to_string())?;
    let mask = build_mask(3, 0, MaskStrategy::TrainNoMask);

    for trial in 0..5 {
        let mel = random_mel(&mut rng, 48, 16);
        let (frame, clip) =
            forward_scores(&params, &model, mel, &q, &mask).map_err(|e| e.to_string())?;
        let t = frame.shape()[0];
        let n = frame.shape()[1];
        for ti in 0..t {
            for ni in 0..n {
                let f = frame.data()[ti * n + ni];
                if f > clip.data()[ni] + 1e-7 {
                    return Err(format!(
                        "trial {trial}: frame score {f} exceeds clip score {} for query {ni}",
                        clip.data()[ni]
                    ));
                }
            }
        }
    }
    Ok(())
}

fn base_mask_invariance() -> Result<(), String> {
    let model = tiny_model();
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    register_model_params(&model, &mut params, &mut rng).map_err(|e| e.to_string())?;
    let provider = StubProvider::new(16, 7);
    let base: Vec<_> = ["a", "b", "c"]
        .iter()
        .map(|c| build_text_query(c, Role::Base, &provider).unwrap())
        .collect();
    let novel: Vec<_> = ["x", "y"]
        .iter()
        .map(|c| build_text_query(c, Role::Novel, &provider).unwrap())
        .collect();
    let q_base = query_matrix(&base).map_err(|e| e.to_string())?;
    let combined: Vec<_> = base.iter().chain(&novel).cloned().collect();
    let q_all = query_matrix(&combined).map_err(|e| e.to_string())?;

    let mel = random_mel(&mut rng, 48, 16);
    let mask_solo = build_mask(3, 0, MaskStrategy::TrainNoMask);
    let (frame_solo, _) = forward_scores(&params, &model, mel.clone(), &q_base, &mask_solo)
        .map_err(|e| e.to_string())?;

    for strategy in [
        MaskStrategy::BaseInvisibleToNovel,
        MaskStrategy::BaseVisibleToNovel,
    ] {
        let mask = build_mask(3, 2, strategy);
        let (frame_all, _) = forward_scores(&params, &model, mel.clone(), &q_all, &mask)
            .map_err(|e| e.to_string())?;
        let t = frame_solo.shape()[0];
        for ti in 0..t {
            for ni in 0..3 {
                let a = frame_solo.data()[ti * 3 + ni];
                let b = frame_all.data()[ti * 5 + ni];
                if (a - b).abs() > 1e-6 {
                    return Err(format!(
                        "{strategy:?}: base query {ni} drifted by {} with novel appended",
                        (a - b).abs()
                    ));
                }
            }
        }
    }
    Ok(())
}

fn median_filter_matches_naive() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for case in 0..200 {
        let t = rng.gen_range(1..40);
        let window = 2 * rng.gen_range(0..4) + 1;
        if window > t {
            continue;
        }
        let raw: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..1.0)).collect();
        let scores = Tensor::from_values(&[t, 1], &raw).expect("shape");
        // compare against the tensor's own storage (f32-quantized)
        let col: Vec<f64> = scores.data().to_vec();
        let filtered = median_filter(&scores, window).map_err(|e| e.to_string())?;
        let half = window / 2;
        for i in 0..t {
            // edge replication, then an odd-length sort median
            let mut w: Vec<f64> = (0..window)
                .map(|k| {
                    let idx = (i + k) as isize - half as isize;
                    col[idx.clamp(0, t as isize - 1) as usize]
                })
                .collect();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want = w[half];
            let got = filtered.data()[i];
            if got != want {
                return Err(format!(
                    "case {case}: t={t} window={window} index {i}: {got} vs {want}"
                ));
            }
        }
    }
    Ok(())
}

fn mel_frame_count() -> Result<(), String> {
    let cfg = FrontendConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for _ in 0..6 {
        let len = rng.gen_range(cfg.win..cfg.sample_rate as usize * 2);
        let samples: Vec<f64> = (0..len).map(|i| (i as f64 * 0.013).sin() * 0.1).collect();
        let wave = Waveform::new(samples, cfg.sample_rate).map_err(|e| e.to_string())?;
        let mel = log_mel(&wave, &cfg).map_err(|e| e.to_string())?;
        let want = (len - cfg.hop) / cfg.hop + 1;
        let got = mel.values.shape()[0];
        if got != want {
            return Err(format!("{len} samples: {got} frames, expected {want}"));
        }
    }
    Ok(())
}

pub fn run() -> Result<(), CliError> {
    let checks: Vec<(&str, fn() -> Result<(), String>)> = vec![
        ("query store round trip is bit exact", store_round_trip),
        ("checkpoint round trip is bit exact", checkpoint_round_trip),
        ("frame scores never exceed clip scores", factorization_bound),
        ("base queries ignore appended novel queries", base_mask_invariance),
        ("median filter matches naive reference", median_filter_matches_naive),
        ("mel frame count follows hop formula", mel_frame_count),
    ];
    let mut failures = Vec::new();
    for (name, f) in checks {
        match f() {
            Ok(()) => println!("ok - {name}"),
            Err(msg) => {
                println!("FAIL - {name}: {msg}");
                failures.push(name);
            }
        }
    }
    if failures.is_empty() {
        println!("all {} checks passed", 6);
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} selftest check(s) failed: {}",
            failures.len(),
            failures.join(", ")
        )))
    }
}
