//! Score-level fusion: per-trial weighted sums across subsystems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trials::{ScoreSet, StageTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Equal,
    Empirical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionModel {
    pub mode: FusionMode,
    pub weights: Vec<f64>,
}

impl FusionModel {
    /// Equal weights summing to one.
    pub fn equal(n_systems: usize) -> Result<Self> {
        if n_systems == 0 {
            return Err(Error::Config("fusion needs at least one system".into()));
        }
        Ok(FusionModel {
            mode: FusionMode::Equal,
            weights: vec![1.0 / n_systems as f64; n_systems],
        })
    }

    /// Empirically chosen weights, applied as given.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("fusion needs at least one system".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("fusion weights must be finite and nonnegative".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("fusion weights must not all be zero".into()));
        }
        Ok(FusionModel { mode: FusionMode::Empirical, weights })
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("fusion weights must be finite and nonempty".into()));
        }
        if self.mode == FusionMode::Equal
            && self.weights.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-12)
        {
            return Err(Error::Config("equal-mode fusion weights must be identical".into()));
        }
        Ok(())
    }
}

/// Weighted per-trial sum of subsystem scores over a shared trial list.
pub fn fuse(systems: &[&ScoreSet], model: &FusionModel) -> Result<ScoreSet> {
    if systems.is_empty() {
        return Err(Error::Config("fusion needs at least one system".into()));
    }
    model.validate()?;
    if systems.len() != model.weights.len() {
        return Err(Error::Shape(format!(
            "{} systems vs {} fusion weights",
            systems.len(),
            model.weights.len()
        )));
    }
    for set in &systems[1..] {
        if !systems[0].same_trials(set) {
            return Err(Error::Config("fusion inputs cover different trial lists".into()));
        }
    }
    let n = systems[0].len();
    let mut fused = vec![0.0; n];
    for (set, &w) in systems.iter().zip(&model.weights) {
        for (acc, &s) in fused.iter_mut().zip(&set.scores) {
            *acc += w * s;
        }
    }
    ScoreSet::new(systems[0].list.clone(), fused, StageTag::Fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trials::{Trial, TrialList};

    fn set(scores: Vec<f64>) -> ScoreSet {
        let trials = (0..scores.len())
            .map(|i| Trial { model_id: format!("m{i}"), test_id: format!("t{i}") })
            .collect();
        ScoreSet::new(TrialList::new(trials).unwrap(), scores, StageTag::Raw).unwrap()
    }

    #[test]
    fn equal_fusion_averages() {
        let a = set(vec![1.0, 2.0, 3.0]);
        let b = set(vec![3.0, 2.0, 1.0]);
        let fused = fuse(&[&a, &b], &FusionModel::equal(2).unwrap()).unwrap();
        assert_eq!(fused.scores, vec![2.0, 2.0, 2.0]);
        assert_eq!(fused.stage, StageTag::Fused);
    }

    #[test]
    fn single_system_equal_fusion_is_identity() {
        let a = set(vec![0.25, -1.5, 7.0]);
        let fused = fuse(&[&a], &FusionModel::equal(1).unwrap()).unwrap();
        assert_eq!(fused.scores, a.scores);
    }

    #[test]
    fn explicit_weights_apply_as_given() {
        let a = set(vec![4.0, -1.0]);
        let b = set(vec![100.0, 100.0]);
        let m = FusionModel::from_weights(vec![2.0, 0.0]).unwrap();
        let fused = fuse(&[&a, &b], &m).unwrap();
        assert_eq!(fused.scores, vec![8.0, -2.0]);
    }

    #[test]
    fn equal_mode_with_uneven_weights_fails_validation() {
        let m = FusionModel { mode: FusionMode::Equal, weights: vec![0.7, 0.3] };
        assert!(m.validate().is_err());
        let a = set(vec![1.0]);
        let b = set(vec![2.0]);
        assert!(fuse(&[&a, &b], &m).is_err());
    }

    #[test]
    fn fusion_is_permutation_invariant_under_equal_weights() {
        let a = set(vec![1.0, -1.0]);
        let b = set(vec![0.5, 0.5]);
        let c = set(vec![-2.0, 3.0]);
        let m = FusionModel::equal(3).unwrap();
        let x = fuse(&[&a, &b, &c], &m).unwrap();
        let y = fuse(&[&c, &a, &b], &m).unwrap();
        for (u, v) in x.scores.iter().zip(&y.scores) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let a = set(vec![1.0, 2.0]);
        let mut b = set(vec![1.0, 2.0]);
        b.list.trials[1].test_id = "other".into();
        assert!(fuse(&[&a, &b], &FusionModel::equal(2).unwrap()).is_err());
        assert!(fuse(&[&a], &FusionModel::equal(2).unwrap()).is_err());
        assert!(FusionModel::from_weights(vec![0.0, 0.0]).is_err());
        assert!(FusionModel::from_weights(vec![-1.0, 2.0]).is_err());
        assert!(FusionModel::equal(0).is_err());
    }
}
