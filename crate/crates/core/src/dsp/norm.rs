//! Feature normalization: sliding-window CMN and global CMVN.

use ndarray::{Array1, Array2};

use super::FeatureMatrix;
use crate::error::{Error, Result};

pub const CMVN_VARIANCE_FLOOR: f64 = 1e-8;

/// Subtract a centered sliding mean per dimension; windows truncate at the
/// utterance edges rather than padding.
pub fn apply_cmn_sliding(feats: &FeatureMatrix, window_s: f64) -> Result<FeatureMatrix> {
    if feats.n_frames() == 0 {
        return Err(Error::Empty("feature matrix".into()));
    }
    if window_s <= 0.0 {
        return Err(Error::Config(format!("window_s {window_s} must be positive")));
    }
    let t = feats.n_frames();
    let d = feats.dim();
    let window = ((window_s * 1000.0 / feats.frame_shift_ms).round() as usize).max(1);
    let back = (window - 1) / 2;
    let fwd = window / 2;

    // prefix[i] = sum of rows 0..i
    let mut prefix = Array2::<f64>::zeros((t + 1, d));
    for i in 0..t {
        for j in 0..d {
            prefix[[i + 1, j]] = prefix[[i, j]] + feats.data[[i, j]];
        }
    }
    let mut out = Array2::zeros((t, d));
    for i in 0..t {
        let lo = i.saturating_sub(back);
        let hi = (i + fwd).min(t - 1);
        let count = (hi - lo + 1) as f64;
        for j in 0..d {
            let mean = (prefix[[hi + 1, j]] - prefix[[lo, j]]) / count;
            out[[i, j]] = feats.data[[i, j]] - mean;
        }
    }
    FeatureMatrix::new(out, feats.frame_shift_ms, &feats.source_utt_id)
}

/// Per-dimension zero mean, unit variance (population convention). Constant
/// dimensions hit the variance floor and map to zero.
pub fn apply_cmvn_global(feats: &FeatureMatrix) -> Result<FeatureMatrix> {
    let t = feats.n_frames();
    if t < 2 {
        return Err(Error::Shape(format!(
            "global CMVN needs at least 2 frames, got {t}"
        )));
    }
    let d = feats.dim();
    let mean: Array1<f64> = feats.data.mean_axis(ndarray::Axis(0)).expect("t >= 2");
    let mut var = Array1::<f64>::zeros(d);
    for row in feats.data.rows() {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    var.mapv_inplace(|v| v / t as f64);

    let mut out = Array2::zeros((t, d));
    for j in 0..d {
        if var[j] < CMVN_VARIANCE_FLOOR {
            log::warn!(
                "constant dimension {j} in {:?}; mapping to zero",
                feats.source_utt_id
            );
            continue;
        }
        let inv_std = 1.0 / var[j].sqrt();
        for i in 0..t {
            out[[i, j]] = (feats.data[[i, j]] - mean[j]) * inv_std;
        }
    }
    FeatureMatrix::new(out, feats.frame_shift_ms, &feats.source_utt_id)
}
