//! Adaptive score normalization: each trial score is standardized against
//! the statistics of both sides' best-matching cohort scores.

use std::collections::HashMap;

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::trials::{ScoreSet, StageTag};

pub const SNORM_SIGMA_FLOOR: f64 = 1e-6;

/// Per-utterance cohort statistics from the `top_k` highest cohort scores.
/// `top_k` equal to the cohort size reduces to plain s-norm.
fn top_k_stats(scores: &[f64], top_k: usize) -> (f64, f64) {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let sel = &sorted[..top_k.min(sorted.len())];
    let n = sel.len() as f64;
    let mean = sel.iter().sum::<f64>() / n;
    let var = sel.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(SNORM_SIGMA_FLOOR))
}

/// Scores every listed utterance against the whole cohort.
///
/// `score` is the same scorer that produced the raw trial scores; it is
/// handed the utterance id and a cohort id.
pub fn cohort_score_table<F>(
    ids: &[&str],
    cohort_ids: &[String],
    mut score: F,
) -> Result<HashMap<String, Vec<f64>>>
where
    F: FnMut(&str, &str) -> Result<f64>,
{
    let mut table = HashMap::new();
    for &id in ids {
        if table.contains_key(id) {
            continue;
        }
        let mut row = Vec::with_capacity(cohort_ids.len());
        for c in cohort_ids {
            row.push(score(id, c)?);
        }
        table.insert(id.to_string(), row);
    }
    Ok(table)
}

/// s' = ((s - mu_e)/sigma_e + (s - mu_t)/sigma_t) / 2, with mu, sigma taken
/// over each side's top_k best cohort scores.
pub fn s_normalize(
    raw: &ScoreSet,
    cohort_scores: &HashMap<String, Vec<f64>>,
    top_k: usize,
) -> Result<ScoreSet> {
    if top_k < 2 {
        return Err(Error::Config("adaptive s-norm needs top_k >= 2".into()));
    }
    let mut stats: HashMap<&str, (f64, f64)> = HashMap::new();
    for trial in &raw.list.trials {
        for id in [trial.model_id.as_str(), trial.test_id.as_str()] {
            if stats.contains_key(id) {
                continue;
            }
            let row = cohort_scores.get(id).ok_or_else(|| {
                Error::Config(format!("utterance {id} missing from cohort score table"))
            })?;
            if row.len() < top_k {
                return Err(Error::Config(format!(
                    "cohort of {} is smaller than top_k {top_k}",
                    row.len()
                )));
            }
            stats.insert(id, top_k_stats(row, top_k));
        }
    }
    let normalized: Vec<f64> = raw
        .list
        .trials
        .iter()
        .zip(&raw.scores)
        .map(|(trial, &s)| {
            let (me, se) = stats[trial.model_id.as_str()];
            let (mt, st) = stats[trial.test_id.as_str()];
            0.5 * ((s - me) / se + (s - mt) / st)
        })
        .collect();
    ScoreSet::new(raw.list.clone(), normalized, StageTag::Snorm)
}

/// Convenience for in-memory embeddings: scores trials and cohort with one
/// scorer closure over id-indexed vectors.
pub fn s_normalize_embeddings<F>(
    raw: &ScoreSet,
    cohort_ids: &[String],
    top_k: usize,
    mut score: F,
) -> Result<ScoreSet>
where
    F: FnMut(&str, &str) -> Result<f64>,
{
    let ids: Vec<&str> = raw
        .list
        .trials
        .iter()
        .flat_map(|t| [t.model_id.as_str(), t.test_id.as_str()])
        .collect();
    let table = cohort_score_table(&ids, cohort_ids, &mut score)?;
    s_normalize(raw, &table, top_k)
}

/// Plain cosine scorer over a map of embeddings, usable as the closure for
/// both trial scoring and cohort scoring.
pub fn embedding_scorer<'a>(
    embeddings: &'a HashMap<String, Array1<f64>>,
    transform: Option<&'a super::csml::CsmlModel>,
) -> impl FnMut(&str, &str) -> Result<f64> + 'a {
    move |a: &str, b: &str| {
        let u = embeddings
            .get(a)
            .ok_or_else(|| Error::Config(format!("missing embedding for {a}")))?;
        let v = embeddings
            .get(b)
            .ok_or_else(|| Error::Config(format!("missing embedding for {b}")))?;
        match transform {
            Some(m) => m.score(u.view(), v.view()),
            None => super::csml::cosine_score(u.view(), v.view()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trials::{Trial, TrialList};

    fn score_set(trials: Vec<(&str, &str)>, scores: Vec<f64>) -> ScoreSet {
        let list = TrialList::new(
            trials
                .into_iter()
                .map(|(m, t)| Trial { model_id: m.into(), test_id: t.into() })
                .collect(),
        )
        .unwrap();
        ScoreSet::new(list, scores, StageTag::Raw).unwrap()
    }

    #[test]
    fn unit_stats_make_normalization_an_identity() {
        // Cohort rows engineered so top-2 selection sees mean 0, std 1.
        let raw = score_set(vec![("e1", "t1")], vec![0.7]);
        let mut table = HashMap::new();
        table.insert("e1".to_string(), vec![1.0, -1.0, -5.0]);
        table.insert("t1".to_string(), vec![1.0, -1.0, -9.0]);
        let out = s_normalize(&raw, &table, 2).unwrap();
        assert!((out.scores[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn shifting_all_scores_cancels() {
        let raw = score_set(vec![("e1", "t1"), ("e2", "t1")], vec![0.3, -0.2]);
        let mut table = HashMap::new();
        table.insert("e1".to_string(), vec![0.5, 0.1, -0.4, 0.2]);
        table.insert("e2".to_string(), vec![0.9, 0.0, -0.1, 0.3]);
        table.insert("t1".to_string(), vec![0.4, 0.6, -0.2, 0.1]);
        let base = s_normalize(&raw, &table, 3).unwrap();

        let c = 2.5;
        let shifted_raw = score_set(
            vec![("e1", "t1"), ("e2", "t1")],
            raw.scores.iter().map(|s| s + c).collect(),
        );
        let shifted_table: HashMap<String, Vec<f64>> = table
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|s| s + c).collect()))
            .collect();
        let out = s_normalize(&shifted_raw, &shifted_table, 3).unwrap();
        for (a, b) in base.scores.iter().zip(out.scores.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_affine_map_leaves_normalized_scores_invariant() {
        let raw = score_set(vec![("e1", "t1"), ("e1", "t2")], vec![0.9, -0.3]);
        let mut table = HashMap::new();
        table.insert("e1".to_string(), vec![0.2, 0.8, -0.5, 0.0]);
        table.insert("t1".to_string(), vec![0.7, -0.6, 0.1, 0.4]);
        table.insert("t2".to_string(), vec![-0.1, 0.3, 0.6, -0.8]);
        let base = s_normalize(&raw, &table, 4).unwrap();

        let (a, b) = (3.0, -1.25);
        let mapped_raw = score_set(
            vec![("e1", "t1"), ("e1", "t2")],
            raw.scores.iter().map(|s| a * s + b).collect(),
        );
        let mapped_table: HashMap<String, Vec<f64>> = table
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|s| a * s + b).collect()))
            .collect();
        let out = s_normalize(&mapped_raw, &mapped_table, 4).unwrap();
        for (x, y) in base.scores.iter().zip(out.scores.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_computed_case_with_top_2() {
        // e1 cohort: [0.9, 0.5, 0.1, -0.3] -> top2 {0.9, 0.5}: mu=0.7,
        // sigma=0.2. t1 cohort: [0.6, 0.2, -0.2, -0.6] -> top2 {0.6, 0.2}:
        // mu=0.4, sigma=0.2.
        let raw = score_set(vec![("e1", "t1")], vec![0.8]);
        let mut table = HashMap::new();
        table.insert("e1".to_string(), vec![0.9, 0.5, 0.1, -0.3]);
        table.insert("t1".to_string(), vec![0.6, 0.2, -0.2, -0.6]);
        let out = s_normalize(&raw, &table, 2).unwrap();
        let want = 0.5 * ((0.8 - 0.7) / 0.2 + (0.8 - 0.4) / 0.2);
        assert!((out.scores[0] - want).abs() < 1e-12, "{} vs {want}", out.scores[0]);
    }

    #[test]
    fn constant_cohort_hits_sigma_floor_without_nan() {
        let raw = score_set(vec![("e1", "t1")], vec![0.5]);
        let mut table = HashMap::new();
        table.insert("e1".to_string(), vec![0.2, 0.2, 0.2]);
        table.insert("t1".to_string(), vec![0.2, 0.2, 0.2]);
        let out = s_normalize(&raw, &table, 3).unwrap();
        assert!(out.scores[0].is_finite());
        assert!((out.scores[0] - 0.3 / SNORM_SIGMA_FLOOR).abs() / out.scores[0].abs() < 1e-9);
    }

    #[test]
    fn cohort_smaller_than_top_k_is_an_error() {
        let raw = score_set(vec![("e1", "t1")], vec![0.5]);
        let mut table = HashMap::new();
        table.insert("e1".to_string(), vec![0.2, 0.1]);
        table.insert("t1".to_string(), vec![0.2, 0.1]);
        assert!(s_normalize(&raw, &table, 3).is_err());
        assert!(s_normalize(&raw, &table, 1).is_err());
    }

    #[test]
    fn full_top_k_equals_plain_s_norm() {
        let raw = score_set(vec![("e1", "t1")], vec![0.4]);
        let mut table = HashMap::new();
        table.insert("e1".to_string(), vec![0.3, -0.1, 0.5, 0.1]);
        table.insert("t1".to_string(), vec![-0.2, 0.0, 0.6, 0.2]);
        let adaptive_full = s_normalize(&raw, &table, 4).unwrap();
        // Plain s-norm oracle over the whole cohort.
        let stat = |v: &[f64]| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            (m, var.sqrt())
        };
        let (me, se) = stat(&table["e1"]);
        let (mt, st) = stat(&table["t1"]);
        let want = 0.5 * ((0.4 - me) / se + (0.4 - mt) / st);
        assert!((adaptive_full.scores[0] - want).abs() < 1e-12);
    }

    #[test]
    fn missing_utterance_row_is_an_error() {
        let raw = score_set(vec![("e1", "t1")], vec![0.5]);
        let mut table = HashMap::new();
        table.insert("e1".to_string(), vec![0.2, 0.1, 0.0]);
        assert!(s_normalize(&raw, &table, 2).is_err());
    }
}
