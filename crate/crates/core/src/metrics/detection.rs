//! Detection error metrics over scored trials: equal error rate, detection
//! cost (minimum and actual), and log-likelihood-ratio cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config("p_target must be in (0, 1)".into()));
        }
        if self.c_miss <= 0.0 || self.c_fa <= 0.0 {
            return Err(Error::Config("detection costs must be positive".into()));
        }
        Ok(())
    }

    /// min(c_miss * p_target, c_fa * (1 - p_target)): cost of the better of
    /// reject-all and accept-all, the normalizer for reported DCFs.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    /// Bayes decision threshold for calibrated log-likelihood ratios.
    pub fn bayes_threshold(&self) -> f64 {
        ((self.c_fa * (1.0 - self.p_target)) / (self.c_miss * self.p_target)).ln()
    }
}

fn split_classes(scores: &[f64], target_mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != target_mask.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            target_mask.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (&s, &t) in scores.iter().zip(target_mask) {
        if t {
            targets.push(s);
        } else {
            nontargets.push(s);
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Config(
            "metrics need at least one target and one nontarget trial".into(),
        ));
    }
    Ok((targets, nontargets))
}

/// Miss and false-alarm rates at every threshold in the score-induced sweep.
/// Decisions accept when score >= threshold. Points are ordered by rising
/// threshold: Pmiss non-decreasing, Pfa non-increasing, with the accept-all
/// and reject-all endpoints included.
pub fn det_points(scores: &[f64], target_mask: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (targets, nontargets) = split_classes(scores, target_mask)?;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push((1.0, 0.0));
    for &th in &thresholds {
        let miss = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
        let fa = nontargets.iter().filter(|&&s| s >= th).count() as f64
            / nontargets.len() as f64;
        points.push((fa, miss));
    }
    points.push((0.0, 1.0));
    Ok(points)
}

/// Equal error rate by linear interpolation on the (Pfa, Pmiss) polyline.
pub fn eer(scores: &[f64], target_mask: &[bool]) -> Result<f64> {
    let points = det_points(scores, target_mask)?;
    let mut prev = points[0];
    for &(fa, miss) in &points[1..] {
        if miss >= fa {
            let (f0, m0) = prev;
            let (f1, m1) = (fa, miss);
            let denom = (m1 - m0) - (f1 - f0);
            if denom.abs() < 1e-300 {
                return Ok(0.5 * (m1 + f1));
            }
            let t = (f0 - m0) / denom;
            let t = t.clamp(0.0, 1.0);
            return Ok(m0 + t * (m1 - m0));
        }
        prev = (fa, miss);
    }
    // Pmiss stayed below Pfa through the reject-all end; only reachable
    // through floating pathologies.
    Ok(points.last().map(|&(fa, _)| fa).unwrap_or(0.0))
}

fn dcf_at(miss: f64, fa: f64, p: &DcfParams) -> f64 {
    p.c_miss * p.p_target * miss + p.c_fa * (1.0 - p.p_target) * fa
}

/// Minimum normalized detection cost over the score-induced threshold set
/// including both decision extremes, and the minimizing threshold (NaN
/// thresholds replaced by +-infinity markers for the extremes).
pub fn min_dcf(scores: &[f64], target_mask: &[bool], p: &DcfParams) -> Result<(f64, f64)> {
    p.validate()?;
    let (targets, nontargets) = split_classes(scores, target_mask)?;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    thresholds.dedup();

    let mut best = (dcf_at(1.0, 0.0, p), f64::INFINITY);
    let accept_all = dcf_at(0.0, 1.0, p);
    if accept_all < best.0 {
        best = (accept_all, f64::NEG_INFINITY);
    }
    for &th in &thresholds {
        let miss = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
        let fa = nontargets.iter().filter(|&&s| s >= th).count() as f64
            / nontargets.len() as f64;
        let cost = dcf_at(miss, fa, p);
        if cost < best.0 {
            best = (cost, th);
        }
    }
    Ok((best.0 / p.default_cost(), best.1))
}

/// Normalized detection cost of Bayes decisions on calibrated LLR scores.
pub fn act_dcf(llr_scores: &[f64], target_mask: &[bool], p: &DcfParams) -> Result<f64> {
    p.validate()?;
    let (targets, nontargets) = split_classes(llr_scores, target_mask)?;
    let th = p.bayes_threshold();
    let miss = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
    let fa = nontargets.iter().filter(|&&s| s >= th).count() as f64 / nontargets.len() as f64;
    Ok(dcf_at(miss, fa, p) / p.default_cost())
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log-likelihood-ratio cost in bits; 1.0 for a scoreless system (all-zero
/// LLRs), approaching 0 for ideal ones.
pub fn cllr(llr_scores: &[f64], target_mask: &[bool]) -> Result<f64> {
    let (targets, nontargets) = split_classes(llr_scores, target_mask)?;
    let t_term: f64 =
        targets.iter().map(|&s| softplus(-s)).sum::<f64>() / targets.len() as f64;
    let n_term: f64 =
        nontargets.iter().map(|&s| softplus(s)).sum::<f64>() / nontargets.len() as f64;
    Ok((t_term + n_term) / (2.0 * std::f64::consts::LN_2))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub eer: f64,
    pub min_dcf: f64,
    pub act_dcf: f64,
    pub cllr: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn metric_report(
    llr_scores: &[f64],
    target_mask: &[bool],
    p: &DcfParams,
) -> Result<MetricReport> {
    let n_target = target_mask.iter().filter(|&&t| t).count();
    Ok(MetricReport {
        eer: eer(llr_scores, target_mask)?,
        min_dcf: min_dcf(llr_scores, target_mask, p)?.0,
        act_dcf: act_dcf(llr_scores, target_mask, p)?,
        cllr: cllr(llr_scores, target_mask)?,
        n_target,
        n_nontarget: target_mask.len() - n_target,
    })
}
