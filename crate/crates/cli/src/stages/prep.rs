//! Data-preparation stages: corpus synthesis, RIR simulation, augmentation,
//! speech-activity accounting, and feature extraction.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::json;

use svkit_core::acoustics::{
    augment_utterance, build_rir_bank, build_training_manifest, AugMode, AugmentResources,
    AugmentationRecipe, NoisePool, RirBank,
};
use svkit_core::audio::write_wav;
use svkit_core::demo::generate_demo_corpus;
use svkit_core::dsp::mfcc::compute_mfcc;
use svkit_core::dsp::sad::energy_sad;
use svkit_core::dsp::{save_feature_file, wpe::wpe_dereverberate};
use svkit_core::manifest::{load_manifest, save_manifest, Manifest, UtteranceRecord};
use svkit_core::util::derive_seed;

use super::{load_split_manifests, manifest_audio_paths, read_utt_audio, Pipeline};
use crate::provenance::{run_stage, StageStatus};
use crate::workspace::{ensure_parent, walk_files};

fn recipe_needs_rirs(recipe: &AugmentationRecipe) -> bool {
    recipe
        .proportions
        .iter()
        .any(|&(mode, p)| p > 0.0 && matches!(mode, AugMode::Reverb | AugMode::ReverbNoise))
}

pub fn demo_corpus(p: &Pipeline) -> Result<StageStatus> {
    let slice = json!({ "demo": p.cfg.demo, "seed": p.cfg.seed });
    let corpus_dir = p.ws.corpus_dir();
    run_stage(&p.ws, "demo-corpus", &slice, &[], p.force, || {
        generate_demo_corpus(&corpus_dir, &p.cfg.demo, p.cfg.seed)?;
        walk_files(&corpus_dir)
    })
}

pub fn simulate_rir(p: &Pipeline) -> Result<StageStatus> {
    let recipe = p.cfg.augmentation.resolve()?;
    let slice = json!({
        "n_rooms": recipe.n_rooms,
        "rirs_per_room": recipe.rirs_per_room,
        "rir_max_order": recipe.rir_max_order,
        "rir_length_s": recipe.rir_length_s,
        "sample_rate": p.cfg.demo.sample_rate,
        "needed": recipe_needs_rirs(&recipe),
        "seed": p.cfg.seed,
    });
    run_stage(&p.ws, "simulate-rir", &slice, &[], p.force, || {
        if !recipe_needs_rirs(&recipe) {
            return Ok(vec![]);
        }
        let bank = build_rir_bank(
            derive_seed(p.cfg.seed, "rir-bank"),
            &recipe,
            p.cfg.demo.sample_rate,
        )?;
        let path = p.ws.rir_bank();
        ensure_parent(&path)?;
        bank.save(&path)?;
        Ok(vec![path])
    })
}

#[derive(serde::Serialize)]
struct AugLogRow<'a> {
    utt_id: &'a str,
    mode: Option<&'static str>,
    room_id: Option<&'a str>,
    noise_id: Option<&'a str>,
    snr_db: Option<f64>,
}

pub fn augment(p: &Pipeline) -> Result<StageStatus> {
    let recipe = p.cfg.augmentation.resolve()?;
    let corpus = p.ws.corpus();
    let source = load_manifest(&corpus.train_manifest)?;

    let mut inputs = vec![corpus.train_manifest.clone()];
    inputs.extend(manifest_audio_paths(&source));
    inputs.extend(walk_files(&corpus.noise_dir)?);
    if recipe_needs_rirs(&recipe) {
        inputs.push(p.ws.rir_bank());
    }
    let slice = json!({ "recipe": recipe, "seed": p.cfg.seed });

    run_stage(&p.ws, "augment", &slice, &inputs, p.force, || {
        let pool = NoisePool::from_dir(&corpus.noise_dir, p.cfg.demo.sample_rate)?;
        let bank = if recipe_needs_rirs(&recipe) {
            Some(RirBank::load(p.ws.rir_bank())?)
        } else {
            None
        };
        let res = AugmentResources { noise_pool: &pool, rir_bank: bank.as_ref() };
        let wav_dir = p.ws.augmented_dir().join("wav");

        let per_source: Vec<Vec<(UtteranceRecord, String)>> = source
            .records
            .par_iter()
            .map(|rec| -> Result<Vec<(UtteranceRecord, String)>> {
                let audio = read_utt_audio(rec)?;
                let mut out = Vec::with_capacity(recipe.copies_per_utterance);
                for c in 0..recipe.copies_per_utterance {
                    let new_id = format!("{}_aug{c}", rec.utt_id);
                    let seed = derive_seed(p.cfg.seed, &format!("augment-{new_id}"));
                    let mut aug =
                        augment_utterance(rec, &audio, &new_id, &recipe, &res, seed)?;
                    let path = wav_dir.join(&rec.speaker_id).join(format!("{new_id}.wav"));
                    ensure_parent(&path)?;
                    write_wav(&path, &aug.audio)?;
                    aug.record.path = path;
                    let log_row = serde_json::to_string(&AugLogRow {
                        utt_id: &aug.record.utt_id,
                        mode: aug.record.augmentation_tag.map(|t| t.as_str()),
                        room_id: aug.room_id.as_deref(),
                        noise_id: aug.noise_id.as_deref(),
                        snr_db: aug.snr_db,
                    })
                    .context("serializing augmentation log row")?;
                    out.push((aug.record, log_row));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        let mut records: Vec<UtteranceRecord> = source.iter().cloned().collect();
        let mut log = String::new();
        let mut outputs = vec![p.ws.aug_manifest(), p.ws.aug_log()];
        for group in per_source {
            for (rec, row) in group {
                log.push_str(&row);
                log.push('\n');
                outputs.push(rec.path.clone());
                records.push(rec);
            }
        }
        save_manifest(p.ws.aug_manifest(), &Manifest::new(records)?)?;
        let log_path = p.ws.aug_log();
        ensure_parent(&log_path)?;
        std::fs::File::create(&log_path)
            .and_then(|mut f| f.write_all(log.as_bytes()))
            .with_context(|| format!("writing {}", log_path.display()))?;
        Ok(outputs)
    })
}

/// Measures speech duration for every utterance of every split, then applies
/// the duration floor and per-utterance cap to form the training manifest.
pub fn sad(p: &Pipeline) -> Result<StageStatus> {
    let recipe = p.cfg.augmentation.resolve()?;
    let corpus = p.ws.corpus();
    let aug = load_manifest(p.ws.aug_manifest())?;
    let dev = load_manifest(&corpus.dev_manifest)?;
    let eval = load_manifest(&corpus.eval_manifest)?;

    let mut inputs = vec![
        p.ws.aug_manifest(),
        corpus.dev_manifest.clone(),
        corpus.eval_manifest.clone(),
    ];
    for m in [&aug, &dev, &eval] {
        inputs.extend(manifest_audio_paths(m));
    }
    let slice = json!({
        "sad": p.cfg.frontend.sad,
        "min_speech_seconds": recipe.min_speech_seconds,
        "per_utterance_cap": recipe.per_utterance_cap,
        "seed": p.cfg.seed,
    });

    run_stage(&p.ws, "sad", &slice, &inputs, p.force, || {
        let all: Vec<&UtteranceRecord> =
            aug.iter().chain(dev.iter()).chain(eval.iter()).collect();
        let shift_s = p.cfg.frontend.sad.frame_shift_ms / 1000.0;
        let durations: Vec<(String, f64)> = all
            .par_iter()
            .map(|&rec| -> Result<(String, f64)> {
                let buf = read_utt_audio(rec)?;
                let mask = energy_sad(&buf, &p.cfg.frontend.sad);
                Ok((rec.utt_id.clone(), mask.n_speech() as f64 * shift_s))
            })
            .collect::<Result<_>>()?;
        let map: BTreeMap<String, f64> = durations.into_iter().collect();

        let report_path = p.ws.sad_report();
        ensure_parent(&report_path)?;
        let text = serde_json::to_string_pretty(&map).context("serializing SAD report")?;
        std::fs::write(&report_path, text)
            .with_context(|| format!("writing {}", report_path.display()))?;

        let speech_seconds: std::collections::HashMap<String, f64> =
            map.clone().into_iter().collect();
        let train = build_training_manifest(
            &aug,
            &recipe,
            &speech_seconds,
            derive_seed(p.cfg.seed, "train-cap"),
        )?;
        save_manifest(p.ws.train_manifest(), &train)?;
        Ok(vec![report_path, p.ws.train_manifest()])
    })
}

/// Extracts features with a speech mask for every train, dev and eval
/// utterance. The mask is stored raw; selection and normalization happen at
/// load time so their order stays a configuration choice.
pub fn features(p: &Pipeline) -> Result<StageStatus> {
    let corpus = p.ws.corpus();
    let splits = load_split_manifests(p)?;

    let mut inputs = vec![
        p.ws.train_manifest(),
        corpus.dev_manifest.clone(),
        corpus.eval_manifest.clone(),
    ];
    for m in [&splits.train, &splits.dev, &splits.eval] {
        inputs.extend(manifest_audio_paths(m));
    }
    let slice = json!({ "frontend": p.cfg.frontend, "seed": p.cfg.seed });

    run_stage(&p.ws, "features", &slice, &inputs, p.force, || {
        std::fs::create_dir_all(p.ws.features_dir())
            .with_context(|| format!("creating {}", p.ws.features_dir().display()))?;
        let all: Vec<&UtteranceRecord> = splits
            .train
            .iter()
            .chain(splits.dev.iter())
            .chain(splits.eval.iter())
            .collect();
        let fe = &p.cfg.frontend;
        let outputs: Vec<PathBuf> = all
            .par_iter()
            .map(|&rec| -> Result<PathBuf> {
                let mut buf = read_utt_audio(rec)?;
                if let Some(wpe) = &fe.wpe {
                    buf = wpe_dereverberate(&buf, wpe)?;
                }
                let feats = compute_mfcc(&buf, &fe.mfcc, &rec.utt_id)?;
                let mask = energy_sad(&buf, &fe.sad);
                let path = p.ws.feature_file(&rec.utt_id);
                save_feature_file(&path, &feats, Some(&mask))?;
                Ok(path)
            })
            .collect::<Result<_>>()?;
        Ok(outputs)
    })
}
