//! STFT analysis/synthesis with a periodic Hann window and weighted
//! overlap-add reconstruction.
//!
//! The input is zero-padded by one FFT frame on both sides before analysis so
//! every original sample is covered by enough window mass; synthesis divides
//! by the accumulated squared window and cuts the padding back off. Round
//! trips are exact to floating-point noise for any hop ≤ fft_size/2.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        if fft_size == 0 || hop == 0 || hop > fft_size {
            return Err(Error::Config(format!(
                "bad STFT geometry: fft_size={fft_size}, hop={hop}"
            )));
        }
        Ok(StftConfig { fft_size, hop })
    }

    /// 512/128 at 16 kHz and above, 256/64 below.
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        if sample_rate >= 16_000 {
            StftConfig { fft_size: 512, hop: 128 }
        } else {
            StftConfig { fft_size: 256, hop: 64 }
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// Complex spectrogram, frames x bins with bins 0..=fft_size/2.
pub fn stft(samples: &[f64], cfg: StftConfig) -> Result<Array2<Complex64>> {
    if samples.len() < cfg.fft_size {
        return Err(Error::Shape(format!(
            "signal of {} samples is shorter than one STFT frame ({})",
            samples.len(),
            cfg.fft_size
        )));
    }
    let pad = cfg.fft_size;
    let mut x = vec![0.0; pad];
    x.extend_from_slice(samples);
    x.resize(pad + samples.len() + pad, 0.0);

    let win = hann(cfg.fft_size);
    let n_frames = (x.len() - cfg.fft_size) / cfg.hop + 1;
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let mut out = Array2::zeros((n_frames, cfg.bins()));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for k in 0..cfg.fft_size {
            buf[k] = Complex64::new(x[start + k] * win[k], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..cfg.bins() {
            out[[t, k]] = buf[k];
        }
    }
    Ok(out)
}

/// Inverse of `stft` for the same config and original length.
pub fn istft(spec: &Array2<Complex64>, cfg: StftConfig, out_len: usize) -> Result<Vec<f64>> {
    let n_frames = spec.nrows();
    if spec.ncols() != cfg.bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config expects {}",
            spec.ncols(),
            cfg.bins()
        )));
    }
    let win = hann(cfg.fft_size);
    let total = (n_frames - 1) * cfg.hop + cfg.fft_size;
    let mut acc = vec![0.0; total];
    let mut wsq = vec![0.0; total];
    let inv = FftPlanner::new().plan_fft_inverse(cfg.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let scale = 1.0 / cfg.fft_size as f64;
    for t in 0..n_frames {
        for k in 0..cfg.bins() {
            buf[k] = spec[[t, k]];
        }
        // Hermitian extension of the half spectrum.
        for k in cfg.bins()..cfg.fft_size {
            buf[k] = spec[[t, cfg.fft_size - k]].conj();
        }
        inv.process(&mut buf);
        let start = t * cfg.hop;
        for k in 0..cfg.fft_size {
            let v = buf[k].re * scale;
            acc[start + k] += v * win[k];
            wsq[start + k] += win[k] * win[k];
        }
    }
    let pad = cfg.fft_size;
    if pad + out_len > total {
        return Err(Error::Shape(format!(
            "requested {out_len} output samples, spectrogram covers {}",
            total.saturating_sub(pad)
        )));
    }
    let mut out = Vec::with_capacity(out_len);
    for i in pad..pad + out_len {
        let w = wsq[i];
        out.push(if w > 1e-12 { acc[i] / w } else { 0.0 });
    }
    Ok(out)
}
