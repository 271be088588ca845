//! MFCC extraction: dither, pre-emphasis, Hamming window, magnitude FFT,
//! mel filterbank, log with energy floor, orthonormal DCT-II.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::fft::{next_pow2, RealDft};
use super::FeatureMatrix;
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::util::{derive_seed, randn, rng_from_seed};

pub const LOG_ENERGY_FLOOR: f64 = 1e-10;

fn default_frame_length_ms() -> f64 {
    25.0
}
fn default_frame_shift_ms() -> f64 {
    10.0
}
fn default_low_freq() -> f64 {
    20.0
}
fn default_preemphasis() -> f64 {
    0.97
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub num_ceps: usize,
    #[serde(default = "default_frame_length_ms")]
    pub frame_length_ms: f64,
    #[serde(default = "default_frame_shift_ms")]
    pub frame_shift_ms: f64,
    pub num_mel_bins: usize,
    #[serde(default = "default_low_freq")]
    pub low_freq: f64,
    /// Defaults to nyquist - 100 when zero or absent.
    #[serde(default)]
    pub high_freq: f64,
    /// Defaults to the next power of two >= frame length when zero or absent.
    #[serde(default)]
    pub fft_size: usize,
    #[serde(default = "default_preemphasis")]
    pub preemphasis: f64,
    /// Dither amplitude; 0 disables. Per-utterance seeds derive from
    /// `dither_seed` and the utterance id.
    #[serde(default)]
    pub dither: f64,
    #[serde(default)]
    pub dither_seed: u64,
}

impl MfccConfig {
    /// 23 cepstra over 30 mel bins; the narrowband front end.
    pub fn for_8khz() -> Self {
        MfccConfig {
            sample_rate: 8000,
            num_ceps: 23,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            num_mel_bins: 30,
            low_freq: 20.0,
            high_freq: 0.0,
            fft_size: 0,
            preemphasis: 0.97,
            dither: 0.0,
            dither_seed: 0,
        }
    }

    /// 40 cepstra over 40 mel bins; the wideband front end.
    pub fn for_16khz() -> Self {
        MfccConfig {
            sample_rate: 16_000,
            num_ceps: 40,
            num_mel_bins: 40,
            ..MfccConfig::for_8khz()
        }
    }

    pub fn frame_length(&self) -> usize {
        (self.frame_length_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (self.frame_shift_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn effective_fft_size(&self) -> usize {
        if self.fft_size == 0 {
            next_pow2(self.frame_length())
        } else {
            self.fft_size
        }
    }

    pub fn effective_high_freq(&self) -> f64 {
        if self.high_freq == 0.0 {
            self.sample_rate as f64 / 2.0 - 100.0
        } else {
            self.high_freq
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ceps > self.num_mel_bins {
            return Err(Error::Config(format!(
                "num_ceps {} exceeds num_mel_bins {}",
                self.num_ceps, self.num_mel_bins
            )));
        }
        if self.frame_length() == 0 || self.frame_shift() == 0 {
            return Err(Error::Config("zero frame geometry".into()));
        }
        if self.effective_fft_size() < self.frame_length() {
            return Err(Error::Config(format!(
                "fft_size {} is smaller than the {}-sample frame",
                self.effective_fft_size(),
                self.frame_length()
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let high = self.effective_high_freq();
        if !(0.0 <= self.low_freq && self.low_freq < high && high <= nyquist) {
            return Err(Error::Config(format!(
                "mel range [{}, {high}] invalid for nyquist {nyquist}",
                self.low_freq
            )));
        }
        Ok(())
    }
}

/// Closed-form frame count; errors if the buffer is shorter than one frame.
pub fn num_frames(n_samples: usize, frame_length: usize, frame_shift: usize) -> Option<usize> {
    if n_samples < frame_length {
        None
    } else {
        Some((n_samples - frame_length) / frame_shift + 1)
    }
}

pub fn mel_of_hz(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

pub fn hz_of_mel(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Triangular mel filterbank, num_mel_bins x (fft/2 + 1).
pub fn mel_filterbank(cfg: &MfccConfig) -> Array2<f64> {
    let n_bins = cfg.effective_fft_size() / 2 + 1;
    let mel_lo = mel_of_hz(cfg.low_freq);
    let mel_hi = mel_of_hz(cfg.effective_high_freq());
    let step = (mel_hi - mel_lo) / (cfg.num_mel_bins + 1) as f64;
    let hz_per_bin = cfg.sample_rate as f64 / cfg.effective_fft_size() as f64;
    let mut fb = Array2::zeros((cfg.num_mel_bins, n_bins));
    for b in 0..cfg.num_mel_bins {
        let left = mel_lo + b as f64 * step;
        let center = left + step;
        let right = center + step;
        for k in 0..n_bins {
            let mel = mel_of_hz(k as f64 * hz_per_bin);
            let w = if mel <= left || mel >= right {
                0.0
            } else if mel <= center {
                (mel - left) / step
            } else {
                (right - mel) / step
            };
            fb[[b, k]] = w;
        }
    }
    fb
}

/// Center frequency in Hz of mel filter `b`.
pub fn mel_bin_center_hz(cfg: &MfccConfig, b: usize) -> f64 {
    let mel_lo = mel_of_hz(cfg.low_freq);
    let mel_hi = mel_of_hz(cfg.effective_high_freq());
    let step = (mel_hi - mel_lo) / (cfg.num_mel_bins + 1) as f64;
    hz_of_mel(mel_lo + (b + 1) as f64 * step)
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Orthonormal DCT-II matrix, num_ceps x num_mel_bins.
pub fn dct_matrix(num_ceps: usize, num_mel_bins: usize) -> Array2<f64> {
    let m = num_mel_bins as f64;
    let mut d = Array2::zeros((num_ceps, num_mel_bins));
    for k in 0..num_ceps {
        let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
        for j in 0..num_mel_bins {
            d[[k, j]] =
                scale * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m).cos();
        }
    }
    d
}

/// Log mel-filterbank energies, frames x num_mel_bins. The pre-DCT stage of
/// `compute_mfcc`, exposed for inspection.
pub fn log_mel_spectrogram(
    buf: &AudioBuffer,
    cfg: &MfccConfig,
    utt_id: &str,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if buf.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "buffer rate {} does not match config rate {}",
            buf.sample_rate, cfg.sample_rate
        )));
    }
    let frame_len = cfg.frame_length();
    let shift = cfg.frame_shift();
    let n_frames = num_frames(buf.len(), frame_len, shift).ok_or_else(|| {
        Error::Shape(format!(
            "buffer of {} samples is shorter than one {}-sample frame",
            buf.len(),
            frame_len
        ))
    })?;

    let window = hamming(frame_len);
    let fb = mel_filterbank(cfg);
    let dft = RealDft::new(cfg.effective_fft_size());
    let mut rng = (cfg.dither > 0.0).then(|| rng_from_seed(derive_seed(cfg.dither_seed, utt_id)));

    let mut out = Array2::zeros((n_frames, cfg.num_mel_bins));
    let mut frame = vec![0.0; frame_len];
    for t in 0..n_frames {
        let start = t * shift;
        frame.copy_from_slice(&buf.samples[start..start + frame_len]);
        if let Some(rng) = rng.as_mut() {
            for v in frame.iter_mut() {
                *v += cfg.dither * randn(rng);
            }
        }
        for i in (1..frame_len).rev() {
            frame[i] -= cfg.preemphasis * frame[i - 1];
        }
        frame[0] *= 1.0 - cfg.preemphasis;
        for (v, w) in frame.iter_mut().zip(&window) {
            *v *= w;
        }
        let mag = dft.magnitude(&frame);
        for b in 0..cfg.num_mel_bins {
            let mut e = 0.0;
            for (k, &m) in mag.iter().enumerate() {
                e += fb[[b, k]] * m;
            }
            out[[t, b]] = e.max(LOG_ENERGY_FLOOR).ln();
        }
    }
    FeatureMatrix::new(out, cfg.frame_shift_ms, utt_id)
}

pub fn compute_mfcc(buf: &AudioBuffer, cfg: &MfccConfig, utt_id: &str) -> Result<FeatureMatrix> {
    let logmel = log_mel_spectrogram(buf, cfg, utt_id)?;
    let dct = dct_matrix(cfg.num_ceps, cfg.num_mel_bins);
    let data = logmel.data.dot(&dct.t());
    FeatureMatrix::new(data, cfg.frame_shift_ms, utt_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(rate: u32, freq: f64, seconds: f64, amp: f64) -> AudioBuffer {
        let n = (rate as f64 * seconds) as usize;
        let samples = (0..n)
            .map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioBuffer::new(samples, rate).unwrap()
    }

    #[test]
    fn one_second_at_16khz_gives_98_frames() {
        let buf = sine(16_000, 440.0, 1.0, 0.5);
        let feats = compute_mfcc(&buf, &MfccConfig::for_16khz(), "u").unwrap();
        assert_eq!(feats.n_frames(), 98);
        assert_eq!(feats.dim(), 40);
    }

    #[test]
    fn all_zero_input_is_constant_dct_of_floor() {
        let cfg = MfccConfig::for_8khz();
        let buf = AudioBuffer::new(vec![0.0; 8000], 8000).unwrap();
        let feats = compute_mfcc(&buf, &cfg, "z").unwrap();
        let expected_c0 = LOG_ENERGY_FLOOR.ln() * (cfg.num_mel_bins as f64).sqrt();
        for row in feats.data.rows() {
            assert!((row[0] - expected_c0).abs() < 1e-9);
            for &v in row.iter().skip(1) {
                assert!(v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sine_energy_lands_in_nearest_mel_bin() {
        let cfg = MfccConfig::for_8khz();
        let buf = sine(8000, 1000.0, 0.5, 0.5);
        let logmel = log_mel_spectrogram(&buf, &cfg, "s").unwrap();
        let nearest = (0..cfg.num_mel_bins)
            .min_by(|&a, &b| {
                (mel_bin_center_hz(&cfg, a) - 1000.0)
                    .abs()
                    .total_cmp(&(mel_bin_center_hz(&cfg, b) - 1000.0).abs())
            })
            .unwrap();
        for row in logmel.data.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn dither_is_deterministic_per_utterance() {
        let mut cfg = MfccConfig::for_8khz();
        cfg.dither = 1e-5;
        cfg.dither_seed = 9;
        let buf = sine(8000, 300.0, 0.3, 0.4);
        let a = compute_mfcc(&buf, &cfg, "utt-1").unwrap();
        let b = compute_mfcc(&buf, &cfg, "utt-1").unwrap();
        let c = compute_mfcc(&buf, &cfg, "utt-2").unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn rate_mismatch_and_short_buffer_are_errors() {
        let cfg = MfccConfig::for_8khz();
        let wrong_rate = AudioBuffer::new(vec![0.0; 8000], 16_000).unwrap();
        assert!(compute_mfcc(&wrong_rate, &cfg, "u").is_err());
        let short = AudioBuffer::new(vec![0.0; cfg.frame_length() - 1], 8000).unwrap();
        assert!(compute_mfcc(&short, &cfg, "u").is_err());
    }

    #[test]
    fn dct_matrix_is_orthonormal() {
        let m = 30;
        let d = dct_matrix(m, m);
        let prod = d.dot(&d.t());
        for i in 0..m {
            for j in 0..m {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn config_validation_catches_bad_ranges() {
        let mut cfg = MfccConfig::for_8khz();
        cfg.num_ceps = 31;
        assert!(cfg.validate().is_err());
        let mut cfg = MfccConfig::for_8khz();
        cfg.high_freq = 5000.0;
        assert!(cfg.validate().is_err());
        let mut cfg = MfccConfig::for_8khz();
        cfg.fft_size = 128;
        assert!(cfg.validate().is_err());
    }
}
