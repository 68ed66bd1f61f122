//! Dataset generation: seeded synthetic WAVs for the train and eval
//! splits, raw leaf-label rosters, the ontology file, and a manifest.

use ovsed_core::frontend::write_wav;
use ovsed_core::roster::EventRoster;
use ovsed_core::training::{clip_rng, generate_synthetic_clip};

use super::{claim_dir, Manifest, MANIFEST_VERSION};
use crate::config::RunConfig;
use crate::CliError;

pub fn run(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let dir = cfg.dataset_dir();
    claim_dir(&dir, force)?;
    std::fs::create_dir_all(dir.join("train"))?;
    std::fs::create_dir_all(dir.join("eval"))?;

    cfg.dataset.spec.ontology().save_tsv(&dir.join("ontology.tsv"))?;

    // eval clips continue the train index range, so both splits draw from
    // one seeded stream and never collide
    let write_split = |split: &str,
                           count: usize,
                           index_base: u64|
     -> Result<(Vec<String>, EventRoster), CliError> {
        let mut roster = EventRoster::new();
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let clip_id = format!("{split}_{i:05}");
            let mut rng = clip_rng(cfg.seed, index_base + i as u64);
            let (wave, labels) = generate_synthetic_clip(&cfg.dataset.spec, &mut rng)
                .map_err(CliError::validation)?;
            write_wav(&wave, &dir.join(split).join(format!("{clip_id}.wav")))?;
            if labels.is_empty() {
                roster.push_empty_clip(&clip_id);
            }
            for l in labels {
                roster.push(&clip_id, l);
            }
            ids.push(clip_id);
        }
        Ok((ids, roster))
    };

    let (train_ids, train_roster) = write_split("train", cfg.dataset.train_clips, 0)?;
    let (eval_ids, eval_roster) =
        write_split("eval", cfg.dataset.eval_clips, cfg.dataset.train_clips as u64)?;
    train_roster.save_tsv(&dir.join("roster_train.tsv"))?;
    eval_roster.save_tsv(&dir.join("roster_eval.tsv"))?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        clip_seconds: cfg.dataset.spec.clip_seconds,
        sample_rate: cfg.dataset.spec.sample_rate,
        train_clips: train_ids,
        eval_clips: eval_ids,
    };
    manifest.save(&dir)?;

    println!(
        "generated {} train + {} eval clips of {} s in {}",
        manifest.train_clips.len(),
        manifest.eval_clips.len(),
        manifest.clip_seconds,
        dir.display()
    );
    Ok(())
}
