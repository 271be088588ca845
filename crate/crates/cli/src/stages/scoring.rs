//! Scoring stages: trial scoring, adaptive normalization, fusion,
//! calibration strategies, and metric reporting.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use serde_json::json;

use svkit_core::backend::{embedding_scorer, s_normalize_embeddings, CsmlModel};
use svkit_core::manifest::load_manifest;
use svkit_core::metrics::{
    det_points, fuse as fuse_sets, metric_report, run_strategy, CalibrationModel, DcfParams,
    DevSplit, FusionModel, MetricReport, Strategy, SubsystemScores,
};
use svkit_core::trials::{
    load_scores, load_trial_key, load_trial_list, save_scores, ScoreSet, StageTag, TrialKey,
};
use svkit_core::EmbeddingSet;

use super::{cohort_utts, embedding_map, Pipeline};
use crate::config::ScoringBackend;
use crate::provenance::{run_stage, StageStatus};
use crate::workspace::ensure_parent;

fn load_backend(p: &Pipeline, system: &str) -> Result<Option<CsmlModel>> {
    match p.cfg.backend.scoring {
        ScoringBackend::Cosine => Ok(None),
        ScoringBackend::Csml => Ok(Some(CsmlModel::load(p.ws.csml_model(system))?)),
    }
}

/// Embeddings for everything a subsystem scores: trial sides and cohort.
fn trial_embeddings(p: &Pipeline, system: &str) -> Result<HashMap<String, Array1<f64>>> {
    let dev = EmbeddingSet::load(p.ws.embeddings(system, "dev"))?;
    let eval = EmbeddingSet::load(p.ws.embeddings(system, "eval"))?;
    let train = EmbeddingSet::load(p.ws.embeddings(system, "train"))?;
    embedding_map(&[&dev, &eval, &train])
}

fn per_system_inputs(p: &Pipeline) -> Vec<PathBuf> {
    let mut inputs = Vec::new();
    for sub in &p.cfg.subsystems {
        for split in ["train", "dev", "eval"] {
            inputs.push(p.ws.embeddings(&sub.name, split));
        }
        if p.cfg.backend.scoring == ScoringBackend::Csml {
            inputs.push(p.ws.csml_model(&sub.name));
        }
    }
    inputs
}

pub fn score(p: &Pipeline) -> Result<StageStatus> {
    let corpus = p.ws.corpus();
    let mut inputs = vec![corpus.dev_trials.clone(), corpus.eval_trials.clone()];
    inputs.extend(per_system_inputs(p));
    let slice = json!({ "scoring": p.cfg.backend.scoring, "seed": p.cfg.seed });

    run_stage(&p.ws, "score", &slice, &inputs, p.force, || {
        std::fs::create_dir_all(p.ws.scores_dir())
            .with_context(|| format!("creating {}", p.ws.scores_dir().display()))?;
        let mut outputs = Vec::new();
        for sub in &p.cfg.subsystems {
            let map = trial_embeddings(p, &sub.name)?;
            let backend = load_backend(p, &sub.name)?;
            let mut scorer = embedding_scorer(&map, backend.as_ref());
            for (split, trials_path) in
                [("dev", &corpus.dev_trials), ("eval", &corpus.eval_trials)]
            {
                let list = load_trial_list(trials_path)?;
                let scores: Vec<f64> = list
                    .trials
                    .iter()
                    .map(|t| scorer(&t.model_id, &t.test_id))
                    .collect::<svkit_core::Result<_>>()?;
                let set = ScoreSet::new(list, scores, StageTag::Raw)?;
                let path = p.ws.scores(&sub.name, split, "raw");
                save_scores(&path, &set)?;
                outputs.push(path);
            }
        }
        Ok(outputs)
    })
}

pub fn normalize(p: &Pipeline) -> Result<StageStatus> {
    let mut inputs = vec![p.ws.train_manifest()];
    inputs.extend(per_system_inputs(p));
    for sub in &p.cfg.subsystems {
        for split in ["dev", "eval"] {
            inputs.push(p.ws.scores(&sub.name, split, "raw"));
        }
    }
    if let Some(path) = &p.cohort_override {
        inputs.push(path.clone());
    }
    let slice = json!({
        "snorm_top_k": p.cfg.backend.snorm_top_k,
        "cohort_size": p.cfg.backend.cohort_size,
        "scoring": p.cfg.backend.scoring,
        "cohort_override": p.cohort_override.as_ref().map(|c| c.display().to_string()),
        "seed": p.cfg.seed,
    });

    run_stage(&p.ws, "normalize", &slice, &inputs, p.force, || {
        let train = load_manifest(p.ws.train_manifest())?;
        let override_set = p
            .cohort_override
            .as_ref()
            .map(EmbeddingSet::load)
            .transpose()
            .context("loading cohort override embeddings")?;
        let cohort: Vec<String> = match &override_set {
            Some(set) => {
                let mut ids = set.ids().to_vec();
                ids.sort();
                ids.truncate(p.cfg.backend.cohort_size);
                ids
            }
            None => cohort_utts(p, &train),
        };
        let top_k = p.cfg.backend.snorm_top_k.min(cohort.len());
        log::info!("normalize: cohort of {}, top_k {top_k}", cohort.len());

        let mut outputs = Vec::new();
        for sub in &p.cfg.subsystems {
            let mut map = trial_embeddings(p, &sub.name)?;
            if let Some(set) = &override_set {
                map.extend(embedding_map(&[set])?);
            }
            let backend = load_backend(p, &sub.name)?;
            let mut scorer = embedding_scorer(&map, backend.as_ref());
            for split in ["dev", "eval"] {
                let raw = load_scores(p.ws.scores(&sub.name, split, "raw"), StageTag::Raw)?;
                let snormed = s_normalize_embeddings(&raw, &cohort, top_k, &mut scorer)?;
                let path = p.ws.scores(&sub.name, split, "snorm");
                save_scores(&path, &snormed)?;
                outputs.push(path);
            }
        }
        Ok(outputs)
    })
}

fn load_snormed(p: &Pipeline, system: &str, split: &str) -> Result<ScoreSet> {
    Ok(load_scores(p.ws.scores(system, split, "snorm"), StageTag::Snorm)?)
}

fn snormed_inputs(p: &Pipeline) -> Vec<PathBuf> {
    let mut inputs = Vec::new();
    for sub in &p.cfg.subsystems {
        for split in ["dev", "eval"] {
            inputs.push(p.ws.scores(&sub.name, split, "snorm"));
        }
    }
    inputs
}

pub fn fuse(p: &Pipeline) -> Result<StageStatus> {
    let inputs = snormed_inputs(p);
    let slice = json!({ "weights": p.fuse_weights, "seed": p.cfg.seed });

    run_stage(&p.ws, "fuse", &slice, &inputs, p.force, || {
        let model = match &p.fuse_weights {
            Some(w) => {
                if w.len() != p.cfg.subsystems.len() {
                    bail!(
                        "{} fusion weights for {} subsystems",
                        w.len(),
                        p.cfg.subsystems.len()
                    );
                }
                FusionModel::from_weights(w.clone())?
            }
            None => FusionModel::equal(p.cfg.subsystems.len())?,
        };
        let mut outputs = Vec::new();
        for split in ["dev", "eval"] {
            let sets: Vec<ScoreSet> = p
                .cfg
                .subsystems
                .iter()
                .map(|sub| load_snormed(p, &sub.name, split))
                .collect::<Result<_>>()?;
            let refs: Vec<&ScoreSet> = sets.iter().collect();
            let fused = fuse_sets(&refs, &model)?;
            let path = p.ws.fused_scores(split);
            save_scores(&path, &fused)?;
            outputs.push(path);
        }
        Ok(outputs)
    })
}

/// What the calibrate stage learned, alongside the calibrated scores.
#[derive(Debug, Serialize, Deserialize)]
pub struct StrategyFile {
    pub strategy: Strategy,
    pub weights: Vec<f64>,
    pub calibrations: Vec<CalibrationModel>,
    pub dev_split_seed: u64,
}

pub fn calibrate(p: &Pipeline) -> Result<StageStatus> {
    let corpus = p.ws.corpus();
    let mut inputs = snormed_inputs(p);
    inputs.push(corpus.dev_key.clone());
    let slice = json!({
        "strategy": p.cfg.strategy,
        "prior": p.cfg.calibration_prior,
        "dcf": p.cfg.metrics,
        "dev_split_seed": p.cfg.dev_split_seed(),
        "seed": p.cfg.seed,
    });

    run_stage(&p.ws, "calibrate", &slice, &inputs, p.force, || {
        let systems: Vec<SubsystemScores> = p
            .cfg
            .subsystems
            .iter()
            .map(|sub| -> Result<SubsystemScores> {
                Ok(SubsystemScores {
                    name: sub.name.clone(),
                    dev: load_snormed(p, &sub.name, "dev")?,
                    eval: load_snormed(p, &sub.name, "eval")?,
                })
            })
            .collect::<Result<_>>()?;
        let dev_key = load_trial_key(&corpus.dev_key, &systems[0].dev.list)?;
        let split =
            DevSplit::stratified(&systems[0].dev.list, &dev_key, p.cfg.dev_split_seed())?;
        let out = run_strategy(
            p.cfg.strategy,
            &systems,
            &split,
            p.cfg.calibration_prior,
            &p.cfg.metrics,
        )?;
        save_scores(p.ws.llr_scores(), &out.scores)?;

        let strategy_path = p.ws.strategy_file();
        ensure_parent(&strategy_path)?;
        let file = StrategyFile {
            strategy: p.cfg.strategy,
            weights: out.weights,
            calibrations: out.calibrations,
            dev_split_seed: p.cfg.dev_split_seed(),
        };
        let text =
            serde_json::to_string_pretty(&file).context("serializing strategy file")?;
        std::fs::write(&strategy_path, text)
            .with_context(|| format!("writing {}", strategy_path.display()))?;
        Ok(vec![p.ws.llr_scores(), strategy_path])
    })
}

#[derive(Debug, Serialize)]
struct SplitMetrics {
    raw: MetricReport,
    snorm: MetricReport,
}

#[derive(Debug, Serialize)]
struct FullReport {
    config_version: u32,
    seed: u64,
    dcf: DcfParams,
    /// Per subsystem, per split, before and after normalization.
    systems: BTreeMap<String, BTreeMap<String, SplitMetrics>>,
    /// Fused normalized scores per split.
    fusion: BTreeMap<String, MetricReport>,
    strategy: StrategySummary,
}

#[derive(Debug, Serialize)]
struct StrategySummary {
    name: Strategy,
    weights: Vec<f64>,
    /// Metrics of the calibrated eval scores.
    eval: MetricReport,
}

fn metrics_for(p: &Pipeline, set: &ScoreSet, key: &TrialKey) -> Result<MetricReport> {
    Ok(metric_report(&set.scores, &key.target_mask(), &p.cfg.metrics)?)
}

pub fn evaluate(p: &Pipeline) -> Result<StageStatus> {
    let corpus = p.ws.corpus();
    let mut inputs = snormed_inputs(p);
    for sub in &p.cfg.subsystems {
        for split in ["dev", "eval"] {
            inputs.push(p.ws.scores(&sub.name, split, "raw"));
        }
    }
    for split in ["dev", "eval"] {
        inputs.push(p.ws.fused_scores(split));
    }
    inputs.push(p.ws.llr_scores());
    inputs.push(p.ws.strategy_file());
    inputs.push(corpus.dev_key.clone());
    inputs.push(corpus.eval_key.clone());
    let slice = json!({ "dcf": p.cfg.metrics, "seed": p.cfg.seed });

    run_stage(&p.ws, "evaluate", &slice, &inputs, p.force, || {
        let llr = load_scores(p.ws.llr_scores(), StageTag::Llr)?;
        let eval_key = load_trial_key(&corpus.eval_key, &llr.list)?;
        let final_report = metrics_for(p, &llr, &eval_key)?;

        let mut systems = BTreeMap::new();
        let mut dev_key_cache: Option<TrialKey> = None;
        for sub in &p.cfg.subsystems {
            let mut per_split = BTreeMap::new();
            for split in ["dev", "eval"] {
                let raw = load_scores(p.ws.scores(&sub.name, split, "raw"), StageTag::Raw)?;
                let snorm = load_snormed(p, &sub.name, split)?;
                let key = if split == "dev" {
                    if dev_key_cache.is_none() {
                        dev_key_cache = Some(load_trial_key(&corpus.dev_key, &raw.list)?);
                    }
                    dev_key_cache.clone().expect("just set")
                } else {
                    load_trial_key(&corpus.eval_key, &raw.list)?
                };
                per_split.insert(
                    split.to_string(),
                    SplitMetrics {
                        raw: metrics_for(p, &raw, &key)?,
                        snorm: metrics_for(p, &snorm, &key)?,
                    },
                );
            }
            systems.insert(sub.name.clone(), per_split);
        }

        let mut fusion = BTreeMap::new();
        for (split, key_path) in [("dev", &corpus.dev_key), ("eval", &corpus.eval_key)] {
            let fused = load_scores(p.ws.fused_scores(split), StageTag::Fused)?;
            let key = load_trial_key(key_path, &fused.list)?;
            fusion.insert(split.to_string(), metrics_for(p, &fused, &key)?);
        }

        let strategy_text = std::fs::read_to_string(p.ws.strategy_file())
            .with_context(|| format!("reading {}", p.ws.strategy_file().display()))?;
        let strategy: StrategyFile =
            serde_json::from_str(&strategy_text).context("parsing strategy file")?;

        let eval_path = p.ws.eval_report();
        ensure_parent(&eval_path)?;
        let text =
            serde_json::to_string_pretty(&final_report).context("serializing metrics")?;
        std::fs::write(&eval_path, text)
            .with_context(|| format!("writing {}", eval_path.display()))?;

        let report = FullReport {
            config_version: p.cfg.version,
            seed: p.cfg.seed,
            dcf: p.cfg.metrics,
            systems,
            fusion,
            strategy: StrategySummary {
                name: strategy.strategy,
                weights: strategy.weights,
                eval: final_report,
            },
        };

        let full_path = p.ws.full_report();
        let text = serde_json::to_string_pretty(&report).context("serializing report")?;
        std::fs::write(&full_path, text)
            .with_context(|| format!("writing {}", full_path.display()))?;

        let det_path = p.ws.det_curve();
        write_det_csv(&det_path, &llr.scores, &eval_key.target_mask())?;
        Ok(vec![eval_path, full_path, det_path])
    })
}

fn write_det_csv(path: &PathBuf, scores: &[f64], mask: &[bool]) -> Result<()> {
    let points = det_points(scores, mask)?;
    let mut text = String::from("pfa,pmiss\n");
    for (fa, miss) in points {
        text.push_str(&format!("{fa:.6},{miss:.6}\n"));
    }
    ensure_parent(path)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Ad-hoc evaluation of an arbitrary score file against a key, outside the
/// workspace pipeline.
#[derive(Debug)]
pub struct EvalInputs {
    pub scores: PathBuf,
    pub key: PathBuf,
    pub det: Option<PathBuf>,
}

pub fn evaluate_files(inp: &EvalInputs, dcf: &DcfParams) -> Result<MetricReport> {
    let set = load_scores(&inp.scores, StageTag::Llr)?;
    let key = load_trial_key(&inp.key, &set.list)?;
    let mask = key.target_mask();
    let report = metric_report(&set.scores, &mask, dcf)?;
    if let Some(det) = &inp.det {
        write_det_csv(det, &set.scores, &mask)?;
    }
    Ok(report)
}
