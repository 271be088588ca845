//! Thin wrappers over rustfft: real-input magnitude spectra and FFT
//! convolution.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Forward DFT of a real frame, reused across many frames of one utterance.
pub struct RealDft {
    fft: Arc<dyn Fft<f64>>,
    size: usize,
}

impl RealDft {
    pub fn new(size: usize) -> Self {
        assert!(size > 0);
        let fft = FftPlanner::new().plan_fft_forward(size);
        RealDft { fft, size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Spectrum bins 0..=size/2 of the zero-padded input.
    pub fn forward(&self, x: &[f64]) -> Vec<Complex64> {
        assert!(x.len() <= self.size, "frame longer than FFT size");
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(self.size, Complex64::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf.truncate(self.size / 2 + 1);
        buf
    }

    /// |X_k| for bins 0..=size/2.
    pub fn magnitude(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).iter().map(|c| c.norm()).collect()
    }
}

/// Full linear convolution via zero-padded FFT, length a+b-1.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = next_pow2(out_len);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fb.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Schoolbook convolution; kept as the oracle for `fft_convolve`.
pub fn naive_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn convolve_matches_naive() {
        let mut rng = crate::util::rng_from_seed(11);
        for _ in 0..20 {
            let la = rng.random_range(1..80);
            let lb = rng.random_range(1..80);
            let a: Vec<f64> = (0..la).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..lb).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = fft_convolve(&a, &b);
            let slow = naive_convolve(&a, &b);
            assert_eq!(fast.len(), slow.len());
            for (x, y) in fast.iter().zip(&slow) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn dft_of_cosine_peaks_at_its_bin() {
        let n = 256;
        let k0 = 32;
        let x: Vec<f64> = (0..n)
            .map(|i| (std::f64::consts::TAU * k0 as f64 * i as f64 / n as f64).cos())
            .collect();
        let dft = RealDft::new(n);
        let mag = dft.magnitude(&x);
        let peak = mag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, k0);
        assert!((mag[k0] - n as f64 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn empty_convolution_is_empty() {
        assert!(fft_convolve(&[], &[1.0]).is_empty());
        assert!(naive_convolve(&[1.0], &[]).is_empty());
    }
}
