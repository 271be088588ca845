//! Affine score calibration by prior-weighted logistic regression.
//!
//! The calibrated score a*s + b is a log-likelihood ratio: the optimizer
//! fits the posterior logit a*s + b + logit(prior) against the labels,
//! with target trials weighted prior/n_target and nontargets
//! (1-prior)/n_nontarget, so the fitted prior term cancels out of the LLR.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trials::{ScoreSet, StageTag, TrialKey};

pub const CALIBRATION_PARAM_CLIP: f64 = 100.0;
const GRAD_TOL: f64 = 1e-9;
const MAX_NEWTON_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub a: f64,
    pub b: f64,
}

impl CalibrationModel {
    pub fn apply(&self, scores: &ScoreSet) -> Result<ScoreSet> {
        let llr: Vec<f64> = scores.scores.iter().map(|&s| self.a * s + self.b).collect();
        ScoreSet::new(scores.list.clone(), llr, StageTag::Llr)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct WeightedTrials {
    scores: Vec<f64>,
    targets: Vec<bool>,
    weights: Vec<f64>,
    offset: f64,
}

impl WeightedTrials {
    fn loss(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for ((&s, &t), &w) in self.scores.iter().zip(&self.targets).zip(&self.weights) {
            let z = a * s + b + self.offset;
            total += w * softplus(if t { -z } else { z });
        }
        total
    }

    /// Gradient and Hessian of the loss in (a, b).
    fn derivatives(&self, a: f64, b: f64) -> ([f64; 2], [f64; 3]) {
        let mut g = [0.0; 2];
        // Symmetric 2x2 Hessian stored as [h_aa, h_ab, h_bb].
        let mut h = [0.0; 3];
        for ((&s, &t), &w) in self.scores.iter().zip(&self.targets).zip(&self.weights) {
            let z = a * s + b + self.offset;
            let p = sigmoid(z);
            let resid = p - if t { 1.0 } else { 0.0 };
            g[0] += w * resid * s;
            g[1] += w * resid;
            let curv = w * p * (1.0 - p);
            h[0] += curv * s * s;
            h[1] += curv * s;
            h[2] += curv;
        }
        (g, h)
    }
}

/// Fit (a, b) minimizing the prior-weighted logistic loss with Newton
/// iterations (damped by halving) until the gradient norm drops below 1e-9.
/// Perfectly separated data drives the parameters outward; they are clipped
/// to +-100 with a warning.
pub fn calibrate(scores: &ScoreSet, key: &TrialKey, prior: f64) -> Result<CalibrationModel> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::Config("calibration prior must be in (0, 1)".into()));
    }
    if key.labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} key labels",
            scores.len(),
            key.labels.len()
        )));
    }
    if scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in calibration input".into()));
    }
    let targets = key.target_mask();
    let n_t = targets.iter().filter(|&&t| t).count();
    let n_n = targets.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::Config(
            "calibration needs at least one target and one nontarget trial".into(),
        ));
    }

    let trials = WeightedTrials {
        scores: scores.scores.clone(),
        weights: targets
            .iter()
            .map(|&t| if t { prior / n_t as f64 } else { (1.0 - prior) / n_n as f64 })
            .collect(),
        targets,
        offset: (prior / (1.0 - prior)).ln(),
    };

    let (mut a, mut b) = (0.0, 0.0);
    let mut loss = trials.loss(a, b);
    let mut clipped = false;
    for _ in 0..MAX_NEWTON_ITERS {
        let (g, h) = trials.derivatives(a, b);
        if g[0].abs().max(g[1].abs()) < GRAD_TOL {
            break;
        }
        // Ridge keeps the solve stable when scores are (nearly) constant.
        let (haa, hab, hbb) = (h[0] + 1e-12, h[1], h[2] + 1e-12);
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-300 {
            break;
        }
        let mut da = -(hbb * g[0] - hab * g[1]) / det;
        let mut db = -(haa * g[1] - hab * g[0]) / det;

        // Damped step: halve until the objective does not increase.
        let mut accepted = false;
        for _ in 0..60 {
            let cand = trials.loss(a + da, b + db);
            if cand <= loss + 1e-15 {
                a += da;
                b += db;
                loss = cand;
                accepted = true;
                break;
            }
            da *= 0.5;
            db *= 0.5;
        }
        if !accepted {
            break;
        }
        if a.abs() > CALIBRATION_PARAM_CLIP || b.abs() > CALIBRATION_PARAM_CLIP {
            a = a.clamp(-CALIBRATION_PARAM_CLIP, CALIBRATION_PARAM_CLIP);
            b = b.clamp(-CALIBRATION_PARAM_CLIP, CALIBRATION_PARAM_CLIP);
            clipped = true;
            break;
        }
    }
    if clipped {
        warn!("calibration hit the parameter clip (likely separable scores): a={a}, b={b}");
    }
    Ok(CalibrationModel { a, b })
}
