//! Submission strategies built from a two-way development split: per-system
//! score standardization, fusion, and calibration composed in fixed recipes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::calibration::{calibrate, CalibrationModel};
use crate::metrics::detection::{min_dcf, DcfParams};
use crate::trials::{ScoreSet, StageTag, Trial, TrialKey, TrialList};
use crate::util::{derive_seed, rng_from_seed};

/// Floor for the per-half score standard deviation.
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fixed1,
    Fixed2,
    Fixed3,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed1" => Ok(Strategy::Fixed1),
            "fixed2" => Ok(Strategy::Fixed2),
            "fixed3" => Ok(Strategy::Fixed3),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Two disjoint halves of the development trials, each with its key.
#[derive(Debug, Clone)]
pub struct DevSplit {
    pub dev1: TrialList,
    pub dev1_key: TrialKey,
    pub dev2: TrialList,
    pub dev2_key: TrialKey,
}

impl DevSplit {
    /// Random half split stratified by target/nontarget label. Odd class
    /// counts leave the extra trial in the first half. Seed-deterministic.
    pub fn stratified(list: &TrialList, key: &TrialKey, seed: u64) -> Result<Self> {
        if key.labels.len() != list.len() {
            return Err(Error::Shape(format!(
                "{} trials vs {} key labels",
                list.len(),
                key.labels.len()
            )));
        }
        let mask = key.target_mask();
        let mut rng = rng_from_seed(derive_seed(seed, "dev-split"));
        let mut first = Vec::new();
        let mut second = Vec::new();
        for class in [true, false] {
            let mut idxs: Vec<usize> =
                (0..list.len()).filter(|&i| mask[i] == class).collect();
            use rand::seq::SliceRandom;
            idxs.shuffle(&mut rng);
            let cut = idxs.len().div_ceil(2);
            first.extend_from_slice(&idxs[..cut]);
            second.extend_from_slice(&idxs[cut..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        let build = |idxs: &[usize]| -> Result<(TrialList, TrialKey)> {
            let trials: Vec<Trial> = idxs.iter().map(|&i| list.trials[i].clone()).collect();
            let labels = idxs.iter().map(|&i| key.labels[i]).collect();
            Ok((TrialList::new(trials)?, TrialKey { labels }))
        };
        let (dev1, dev1_key) = build(&first)?;
        let (dev2, dev2_key) = build(&second)?;
        if dev1.is_empty() || dev2.is_empty() {
            return Err(Error::Config("development set too small to split".into()));
        }
        Ok(DevSplit { dev1, dev1_key, dev2, dev2_key })
    }
}

/// One subsystem's scores over the full development list and the eval list.
#[derive(Debug, Clone)]
pub struct SubsystemScores {
    pub name: String,
    pub dev: ScoreSet,
    pub eval: ScoreSet,
}

#[derive(Debug, Clone)]
pub struct StrategyOutput {
    /// Calibrated LLR scores on the eval trial list.
    pub scores: ScoreSet,
    /// Fusion weights per subsystem (per branch for Fixed1, identical lists).
    pub weights: Vec<f64>,
    /// Calibration models fitted along the way, one per branch.
    pub calibrations: Vec<CalibrationModel>,
}

/// Pull the scores for `list`'s trials out of a (superset) score set.
fn extract(set: &ScoreSet, list: &TrialList) -> Result<Vec<f64>> {
    let index: HashMap<(&str, &str), usize> = set
        .list
        .trials
        .iter()
        .enumerate()
        .map(|(i, t)| ((t.model_id.as_str(), t.test_id.as_str()), i))
        .collect();
    list.trials
        .iter()
        .map(|t| {
            index
                .get(&(t.model_id.as_str(), t.test_id.as_str()))
                .map(|&i| set.scores[i])
                .ok_or_else(|| {
                    Error::Config(format!(
                        "scores missing trial ({}, {})",
                        t.model_id, t.test_id
                    ))
                })
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

fn standardize(xs: &[f64], mean: f64, std: f64) -> Vec<f64> {
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// Per-system score matrices for one half plus eval, all row-aligned.
struct HalfScores {
    per_system: Vec<Vec<f64>>,
}

fn gather(systems: &[SubsystemScores], list: &TrialList, from_eval: bool) -> Result<HalfScores> {
    let per_system = systems
        .iter()
        .map(|s| extract(if from_eval { &s.eval } else { &s.dev }, list))
        .collect::<Result<Vec<_>>>()?;
    Ok(HalfScores { per_system })
}

fn weighted_sum(columns: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let n = columns[0].len();
    let mut out = vec![0.0; n];
    for (col, &w) in columns.iter().zip(weights) {
        for (acc, &x) in out.iter_mut().zip(col) {
            *acc += w * x;
        }
    }
    out
}

/// standardize (stats from the norm half) -> weighted fuse -> calibrate on
/// the calibration half -> apply to eval. The shared branch body.
fn branch(
    systems: &[SubsystemScores],
    eval_list: &TrialList,
    norm: &HalfScores,
    cal: &HalfScores,
    cal_list: &TrialList,
    cal_key: &TrialKey,
    weights: &[f64],
    prior: f64,
) -> Result<(Vec<f64>, CalibrationModel)> {
    let mut z_cal = Vec::with_capacity(systems.len());
    let mut z_eval = Vec::with_capacity(systems.len());
    for (i, sys) in systems.iter().enumerate() {
        let (m, s) = mean_std(&norm.per_system[i]);
        z_cal.push(standardize(&cal.per_system[i], m, s));
        z_eval.push(standardize(&extract(&sys.eval, eval_list)?, m, s));
    }
    let fused_cal = weighted_sum(&z_cal, weights);
    let fused_eval = weighted_sum(&z_eval, weights);
    let cal_set = ScoreSet::new(cal_list.clone(), fused_cal, StageTag::Fused)?;
    let model = calibrate(&cal_set, cal_key, prior)?;
    let llr = fused_eval.iter().map(|&s| model.a * s + model.b).collect();
    Ok((llr, model))
}

/// Fusion weights proportional to 1/minDCF of each subsystem on the
/// normalization half, renormalized to sum to one.
pub fn empirical_weights(
    systems: &[SubsystemScores],
    split: &DevSplit,
    dcf: &DcfParams,
) -> Result<Vec<f64>> {
    let mask = split.dev2_key.target_mask();
    let mut raw = Vec::with_capacity(systems.len());
    for sys in systems {
        let scores = extract(&sys.dev, &split.dev2)?;
        let (cost, _) = min_dcf(&scores, &mask, dcf)?;
        raw.push(1.0 / cost.max(1e-6));
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Fixed3 with explicit weights: normalize and calibrate on the second half.
pub fn run_fixed3(
    systems: &[SubsystemScores],
    split: &DevSplit,
    weights: &[f64],
    prior: f64,
) -> Result<StrategyOutput> {
    check_inputs(systems, weights.len())?;
    let eval_list = &systems[0].eval.list;
    let dev2 = gather(systems, &split.dev2, false)?;
    let (llr, model) = branch(
        systems,
        eval_list,
        &dev2,
        &dev2,
        &split.dev2,
        &split.dev2_key,
        weights,
        prior,
    )?;
    Ok(StrategyOutput {
        scores: ScoreSet::new(eval_list.clone(), llr, StageTag::Llr)?,
        weights: weights.to_vec(),
        calibrations: vec![model],
    })
}

fn check_inputs(systems: &[SubsystemScores], n_weights: usize) -> Result<()> {
    if systems.is_empty() {
        return Err(Error::Config("strategy needs at least one subsystem".into()));
    }
    if n_weights != systems.len() {
        return Err(Error::Shape(format!(
            "{} weights vs {} subsystems",
            n_weights,
            systems.len()
        )));
    }
    for sys in &systems[1..] {
        if !sys.eval.same_trials(&systems[0].eval) {
            return Err(Error::Config("subsystems cover different eval trials".into()));
        }
    }
    Ok(())
}

pub fn run_strategy(
    strategy: Strategy,
    systems: &[SubsystemScores],
    split: &DevSplit,
    prior: f64,
    dcf: &DcfParams,
) -> Result<StrategyOutput> {
    check_inputs(systems, systems.len())?;
    let n = systems.len();
    let equal = vec![1.0 / n as f64; n];
    let eval_list = &systems[0].eval.list;

    match strategy {
        Strategy::Fixed2 => {
            let norm = gather(systems, &split.dev2, false)?;
            let cal = gather(systems, &split.dev1, false)?;
            let (llr, model) = branch(
                systems,
                eval_list,
                &norm,
                &cal,
                &split.dev1,
                &split.dev1_key,
                &equal,
                prior,
            )?;
            Ok(StrategyOutput {
                scores: ScoreSet::new(eval_list.clone(), llr, StageTag::Llr)?,
                weights: equal,
                calibrations: vec![model],
            })
        }
        Strategy::Fixed1 => {
            let half1 = gather(systems, &split.dev1, false)?;
            let half2 = gather(systems, &split.dev2, false)?;
            // Branch A normalizes on half 2 and calibrates on half 1;
            // branch B swaps the roles. Joined in fixed order.
            let (ra, rb) = std::thread::scope(|scope| {
                let a = scope.spawn(|| {
                    branch(
                        systems,
                        eval_list,
                        &half2,
                        &half1,
                        &split.dev1,
                        &split.dev1_key,
                        &equal,
                        prior,
                    )
                });
                let b = scope.spawn(|| {
                    branch(
                        systems,
                        eval_list,
                        &half1,
                        &half2,
                        &split.dev2,
                        &split.dev2_key,
                        &equal,
                        prior,
                    )
                });
                (a.join().expect("branch panicked"), b.join().expect("branch panicked"))
            });
            let (llr_a, model_a) = ra?;
            let (llr_b, model_b) = rb?;
            let mean: Vec<f64> =
                llr_a.iter().zip(&llr_b).map(|(x, y)| 0.5 * (x + y)).collect();
            Ok(StrategyOutput {
                scores: ScoreSet::new(eval_list.clone(), mean, StageTag::Llr)?,
                weights: equal,
                calibrations: vec![model_a, model_b],
            })
        }
        Strategy::Fixed3 => {
            dcf.validate()?;
            let weights = empirical_weights(systems, split, dcf)?;
            run_fixed3(systems, split, &weights, prior)
        }
    }
}
