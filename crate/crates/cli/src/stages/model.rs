//! Model stages: extractor training, embedding extraction, and backend
//! transform training.

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::json;

use svkit_core::backend::{train_csml, LabeledEmbedding};
use svkit_core::manifest::{load_manifest, Manifest};
use svkit_core::nnet::{load_model, save_model, ArchSpec, TrainExample};
use svkit_core::util::derive_seed;
use svkit_core::EmbeddingSet;

use super::{all_feature_paths, load_processed_features, load_split_manifests, Pipeline};
use crate::provenance::{run_stage, StageStatus};
use crate::workspace::ensure_parent;

fn arch_for(p: &Pipeline, name: &str, arch: &str, num_speakers: usize) -> Result<ArchSpec> {
    ArchSpec::preset(arch, p.cfg.frontend.mfcc.num_ceps, num_speakers)
        .with_context(|| format!("subsystem {name:?}: unknown architecture preset {arch:?}"))
}

/// Relevant slice for any stage whose outputs depend on how stored features
/// are turned into network input.
fn feature_pipeline_slice(p: &Pipeline) -> serde_json::Value {
    json!({
        "cmn_window_s": p.cfg.frontend.cmn_window_s,
        "cmn_after_selection": p.cfg.frontend.cmn_after_selection,
    })
}

fn train_feature_inputs(p: &Pipeline, train: &Manifest) -> Vec<PathBuf> {
    let mut inputs = vec![p.ws.train_manifest()];
    inputs.extend(train.iter().map(|r| p.ws.feature_file(&r.utt_id)));
    inputs
}

pub fn train_extractor(p: &Pipeline) -> Result<StageStatus> {
    let train = load_manifest(p.ws.train_manifest())?;
    let inputs = train_feature_inputs(p, &train);
    let slice = json!({
        "subsystems": p.cfg.subsystems,
        "input_dim": p.cfg.frontend.mfcc.num_ceps,
        "features": feature_pipeline_slice(p),
        "seed": p.cfg.seed,
    });

    run_stage(&p.ws, "train-extractor", &slice, &inputs, p.force, || {
        let speakers = train.speakers();
        let spk_index: HashMap<&str, usize> =
            speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

        let examples: Vec<(String, TrainExample)> = train
            .records
            .par_iter()
            .map(|rec| -> Result<(String, TrainExample)> {
                let feats = load_processed_features(p, &rec.utt_id)?;
                let speaker = spk_index[rec.speaker_id.as_str()];
                Ok((rec.utt_id.clone(), TrainExample { speaker, feats }))
            })
            .collect::<Result<_>>()?;

        let mut outputs = Vec::new();
        for sub in &p.cfg.subsystems {
            let arch = arch_for(p, &sub.name, &sub.arch, speakers.len())?;
            let min_frames = arch.min_input_frames();
            let usable: Vec<TrainExample> = examples
                .iter()
                .filter(|(utt_id, ex)| {
                    let ok = ex.feats.nrows() >= min_frames;
                    if !ok {
                        log::warn!(
                            "subsystem {}: dropping {utt_id:?}, {} speech frames < \
                             receptive field {min_frames}",
                            sub.name,
                            ex.feats.nrows()
                        );
                    }
                    ok
                })
                .map(|(_, ex)| ex.clone())
                .collect();

            log::info!(
                "subsystem {}: training {} on {} examples, {} speakers",
                sub.name,
                sub.arch,
                usable.len(),
                speakers.len()
            );
            let seed = derive_seed(p.cfg.seed, &format!("extractor-{}", sub.name));
            let (model, train_log) =
                svkit_core::nnet::train_extractor(&arch, &usable, &sub.train, seed)?;

            let model_path = p.ws.extractor(&sub.name);
            ensure_parent(&model_path)?;
            save_model(&model, &model_path)?;
            let log_path = p.ws.train_log(&sub.name);
            let text = serde_json::to_string_pretty(&train_log)
                .context("serializing training log")?;
            std::fs::write(&log_path, text)
                .with_context(|| format!("writing {}", log_path.display()))?;
            log::info!(
                "subsystem {}: final train accuracy {:.3}",
                sub.name,
                train_log.final_train_accuracy
            );
            outputs.push(model_path);
            outputs.push(log_path);
        }
        Ok(outputs)
    })
}

pub fn embed(p: &Pipeline) -> Result<StageStatus> {
    let corpus = p.ws.corpus();
    let splits = load_split_manifests(p)?;

    let mut inputs = vec![
        p.ws.train_manifest(),
        corpus.dev_manifest.clone(),
        corpus.eval_manifest.clone(),
    ];
    inputs.extend(all_feature_paths(p, &splits));
    for sub in &p.cfg.subsystems {
        inputs.push(p.ws.extractor(&sub.name));
    }
    let slice = json!({
        "subsystems": p.cfg.subsystems.iter().map(|s| (&s.name, &s.arch)).collect::<Vec<_>>(),
        "features": feature_pipeline_slice(p),
        "seed": p.cfg.seed,
    });

    run_stage(&p.ws, "embed", &slice, &inputs, p.force, || {
        std::fs::create_dir_all(p.ws.embeddings_dir())
            .with_context(|| format!("creating {}", p.ws.embeddings_dir().display()))?;
        let mut outputs = Vec::new();
        for sub in &p.cfg.subsystems {
            let model = load_model(p.ws.extractor(&sub.name))?;
            let dim = model.arch.embedding_dim();
            for (split, manifest) in
                [("train", &splits.train), ("dev", &splits.dev), ("eval", &splits.eval)]
            {
                let rows: Vec<(String, Vec<f32>)> = manifest
                    .records
                    .par_iter()
                    .map(|rec| -> Result<(String, Vec<f32>)> {
                        let feats = load_processed_features(p, &rec.utt_id)?;
                        let emb = model.embedding(&feats.view()).with_context(|| {
                            format!(
                                "subsystem {}: embedding {:?} failed",
                                sub.name, rec.utt_id
                            )
                        })?;
                        Ok((rec.utt_id.clone(), emb.iter().map(|&v| v as f32).collect()))
                    })
                    .collect::<Result<_>>()?;
                let mut set = EmbeddingSet::new(dim);
                for (id, v) in rows {
                    set.insert(&id, v)?;
                }
                let path = p.ws.embeddings(&sub.name, split);
                set.save(&path)?;
                outputs.push(path);
            }
        }
        Ok(outputs)
    })
}

pub fn train_backend(p: &Pipeline) -> Result<StageStatus> {
    let train = load_manifest(p.ws.train_manifest())?;
    let mut inputs = vec![p.ws.train_manifest()];
    for sub in &p.cfg.subsystems {
        inputs.push(p.ws.embeddings(&sub.name, "train"));
    }
    let slice = json!({ "csml": p.cfg.backend.csml, "seed": p.cfg.seed });

    run_stage(&p.ws, "train-backend", &slice, &inputs, p.force, || {
        let speaker_of: HashMap<&str, &str> = train
            .iter()
            .map(|r| (r.utt_id.as_str(), r.speaker_id.as_str()))
            .collect();
        let mut outputs = Vec::new();
        for sub in &p.cfg.subsystems {
            let set = EmbeddingSet::load(p.ws.embeddings(&sub.name, "train"))?;
            let labeled: Vec<LabeledEmbedding> = set
                .ids()
                .iter()
                .map(|id| -> Result<LabeledEmbedding> {
                    let speaker = speaker_of.get(id.as_str()).with_context(|| {
                        format!("embedding {id:?} is not in the training manifest")
                    })?;
                    let vector = set
                        .get_f64(id)
                        .map(ndarray::Array1::from)
                        .expect("listed id is present");
                    Ok(LabeledEmbedding { speaker: speaker.to_string(), vector })
                })
                .collect::<Result<_>>()?;
            let seed = derive_seed(p.cfg.seed, &format!("csml-{}", sub.name));
            let model = train_csml(&labeled, &p.cfg.backend.csml, seed)?;
            let path = p.ws.csml_model(&sub.name);
            ensure_parent(&path)?;
            model.save(&path)?;
            outputs.push(path);
        }
        Ok(outputs)
    })
}

