//! Energy-based speech activity detection and frame selection.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::mfcc::{num_frames, LOG_ENERGY_FLOOR};
use super::{FeatureMatrix, SadMask};
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

fn default_frame_length_ms() -> f64 {
    25.0
}
fn default_frame_shift_ms() -> f64 {
    10.0
}
fn default_bias() -> f64 {
    -0.1
}
fn default_context() -> usize {
    5
}
fn default_proportion_threshold() -> f64 {
    0.6
}
fn default_min_log_energy() -> f64 {
    1e-8f64.ln()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SadConfig {
    #[serde(default = "default_frame_length_ms")]
    pub frame_length_ms: f64,
    #[serde(default = "default_frame_shift_ms")]
    pub frame_shift_ms: f64,
    /// Offset added to the per-utterance mean log-energy to form the
    /// threshold.
    #[serde(default = "default_bias")]
    pub bias: f64,
    /// Half-width of the context window for the proportion rule.
    #[serde(default = "default_context")]
    pub context: usize,
    #[serde(default = "default_proportion_threshold")]
    pub proportion_threshold: f64,
    /// Absolute log-energy floor below which a frame is never speech. Keeps
    /// the relative threshold from firing on all-silent audio.
    #[serde(default = "default_min_log_energy")]
    pub min_log_energy: f64,
}

impl Default for SadConfig {
    fn default() -> Self {
        SadConfig {
            frame_length_ms: default_frame_length_ms(),
            frame_shift_ms: default_frame_shift_ms(),
            bias: default_bias(),
            context: default_context(),
            proportion_threshold: default_proportion_threshold(),
            min_log_energy: default_min_log_energy(),
        }
    }
}

/// Per-frame log energies with the same frame geometry as MFCC extraction.
pub fn frame_log_energies(buf: &AudioBuffer, cfg: &SadConfig) -> Vec<f64> {
    let frame_len = (cfg.frame_length_ms * buf.sample_rate as f64 / 1000.0).round() as usize;
    let shift = (cfg.frame_shift_ms * buf.sample_rate as f64 / 1000.0).round() as usize;
    let Some(t) = num_frames(buf.len(), frame_len, shift) else {
        return Vec::new();
    };
    (0..t)
        .map(|i| {
            let start = i * shift;
            let e: f64 = buf.samples[start..start + frame_len]
                .iter()
                .map(|&x| x * x)
                .sum();
            e.max(LOG_ENERGY_FLOOR).ln()
        })
        .collect()
}

/// A frame is speech when its log-energy clears both the relative threshold
/// (mean log-energy + bias) and the absolute floor, and more than
/// `proportion_threshold` of the frames in the ±context window do too.
pub fn energy_sad(buf: &AudioBuffer, cfg: &SadConfig) -> SadMask {
    let loge = frame_log_energies(buf, cfg);
    let t = loge.len();
    if t == 0 {
        return SadMask { speech: Vec::new() };
    }
    let mean = loge.iter().sum::<f64>() / t as f64;
    let threshold = mean + cfg.bias;
    let pass: Vec<bool> = loge
        .iter()
        .map(|&e| e > threshold && e > cfg.min_log_energy)
        .collect();
    let speech = (0..t)
        .map(|i| {
            if !pass[i] {
                return false;
            }
            let lo = i.saturating_sub(cfg.context);
            let hi = (i + cfg.context).min(t - 1);
            let n_pass = pass[lo..=hi].iter().filter(|&&p| p).count();
            n_pass as f64 / (hi - lo + 1) as f64 > cfg.proportion_threshold
        })
        .collect();
    SadMask { speech }
}

/// Keep exactly the frames the mask marks as speech, preserving order.
pub fn select_speech_frames(feats: &FeatureMatrix, mask: &SadMask) -> Result<FeatureMatrix> {
    if mask.len() != feats.n_frames() {
        return Err(Error::Shape(format!(
            "mask has {} entries, features have {} frames",
            mask.len(),
            feats.n_frames()
        )));
    }
    let d = feats.dim();
    let mut out = Array2::zeros((mask.n_speech(), d));
    let mut row = 0;
    for (i, &keep) in mask.speech.iter().enumerate() {
        if keep {
            out.row_mut(row).assign(&feats.data.row(i));
            row += 1;
        }
    }
    FeatureMatrix::new(out, feats.frame_shift_ms, &feats.source_utt_id)
}
