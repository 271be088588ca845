//! Pipeline stages. Each stage reads artifacts from the workspace, writes
//! new ones, and is memoized through the provenance records.

mod model;
mod prep;
mod scoring;

pub use model::{embed, train_backend, train_extractor};
pub use prep::{augment, demo_corpus, features, sad, simulate_rir};
pub use scoring::{calibrate, evaluate, evaluate_files, fuse, normalize, score, EvalInputs};

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2};

use svkit_core::audio::{read_wav, AudioBuffer};
use svkit_core::dsp::norm::{apply_cmn_sliding, apply_cmvn_global};
use svkit_core::dsp::sad::select_speech_frames;
use svkit_core::dsp::load_feature_file;
use svkit_core::manifest::{load_manifest, Manifest, UtteranceRecord};
use svkit_core::EmbeddingSet;

use crate::config::ExperimentConfig;
use crate::workspace::Workspace;

/// Everything a stage needs: the experiment configuration, the workspace
/// layout, and whether to ignore cached results.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub ws: Workspace,
    pub force: bool,
    /// Cohort embedding file replacing the training-set cohort, if any.
    pub cohort_override: Option<PathBuf>,
    /// Explicit fusion weights; equal weights when unset.
    pub fuse_weights: Option<Vec<f64>>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, ws: Workspace, force: bool) -> Self {
        Pipeline { cfg, ws, force, cohort_override: None, fuse_weights: None }
    }
}

pub(crate) fn read_utt_audio(rec: &UtteranceRecord) -> Result<AudioBuffer> {
    let buf = read_wav(&rec.path)
        .with_context(|| format!("reading audio for utterance {:?}", rec.utt_id))?;
    if buf.sample_rate != rec.sample_rate {
        bail!(
            "utterance {:?}: file has {} Hz but the manifest says {} Hz",
            rec.utt_id,
            buf.sample_rate,
            rec.sample_rate
        );
    }
    Ok(buf)
}

/// Manifest triple used by the feature and embedding stages.
pub(crate) struct SplitManifests {
    pub train: Manifest,
    pub dev: Manifest,
    pub eval: Manifest,
}

pub(crate) fn load_split_manifests(p: &Pipeline) -> Result<SplitManifests> {
    let corpus = p.ws.corpus();
    Ok(SplitManifests {
        train: load_manifest(p.ws.train_manifest())?,
        dev: load_manifest(&corpus.dev_manifest)?,
        eval: load_manifest(&corpus.eval_manifest)?,
    })
}

/// SAD-selected, mean-normalized features for one utterance, in the same
/// form the extractor was trained on.
pub(crate) fn load_processed_features(p: &Pipeline, utt_id: &str) -> Result<Array2<f64>> {
    let path = p.ws.feature_file(utt_id);
    let (feats, mask) = load_feature_file(&path)
        .with_context(|| format!("loading features for {utt_id:?}"))?;
    let Some(mask) = mask else {
        bail!("feature file {} has no speech mask", path.display());
    };
    if mask.n_speech() == 0 {
        bail!("utterance {utt_id:?} has no speech frames after selection");
    }
    let fe = &p.cfg.frontend;
    let processed = if fe.cmn_after_selection {
        let selected = select_speech_frames(&feats, &mask)?;
        apply_cmn_sliding(&selected, fe.cmn_window_s)?
    } else {
        let normalized = apply_cmn_sliding(&feats, fe.cmn_window_s)?;
        select_speech_frames(&normalized, &mask)?
    };
    Ok(processed.data)
}

/// The clean (unaugmented) training utterances, sorted by id and capped,
/// used as the score-normalization cohort.
pub(crate) fn cohort_utts(p: &Pipeline, train: &Manifest) -> Vec<String> {
    let mut ids: Vec<String> = train
        .iter()
        .filter(|r| r.augmentation_tag.is_none())
        .map(|r| r.utt_id.clone())
        .collect();
    ids.sort();
    ids.truncate(p.cfg.backend.cohort_size);
    ids
}

pub(crate) fn embedding_map(sets: &[&EmbeddingSet]) -> Result<HashMap<String, Array1<f64>>> {
    let mut map = HashMap::new();
    for set in sets {
        for id in set.ids() {
            let v = set
                .get_f64(id)
                .ok_or_else(|| anyhow::anyhow!("embedding set lost id {id:?}"))?;
            map.insert(id.clone(), Array1::from(v));
        }
    }
    Ok(map)
}

/// Feature paths for every utterance of every split, as stage inputs.
pub(crate) fn all_feature_paths(p: &Pipeline, splits: &SplitManifests) -> Vec<PathBuf> {
    splits
        .train
        .iter()
        .chain(splits.dev.iter())
        .chain(splits.eval.iter())
        .map(|r| p.ws.feature_file(&r.utt_id))
        .collect()
}

pub(crate) fn manifest_audio_paths(m: &Manifest) -> Vec<PathBuf> {
    m.iter().map(|r| r.path.clone()).collect()
}
