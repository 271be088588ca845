//! Single-channel WPE dereverberation: per-bin multi-tap linear prediction
//! of late reverberation, weighted by inverse estimated variance.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::stft::{istft, stft, StftConfig};
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

fn default_order() -> usize {
    10
}
fn default_delay() -> usize {
    3
}
fn default_iterations() -> usize {
    3
}
fn default_variance_floor() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WpeConfig {
    /// STFT size/hop; zero means pick by sample rate (512/128 at 16 kHz and
    /// above, 256/64 below).
    #[serde(default)]
    pub fft_size: usize,
    #[serde(default)]
    pub hop: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_delay")]
    pub delay: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_variance_floor")]
    pub variance_floor: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        WpeConfig {
            fft_size: 0,
            hop: 0,
            order: default_order(),
            delay: default_delay(),
            iterations: default_iterations(),
            variance_floor: default_variance_floor(),
        }
    }
}

impl WpeConfig {
    fn stft_config(&self, sample_rate: u32) -> Result<StftConfig> {
        if self.fft_size == 0 && self.hop == 0 {
            Ok(StftConfig::for_sample_rate(sample_rate))
        } else {
            StftConfig::new(self.fft_size, self.hop)
        }
    }
}

/// Solve (A + loading·I) x = b for Hermitian positive semidefinite A by
/// Cholesky, escalating the diagonal loading if the factorization stalls.
fn solve_hermitian(a: &Array2<Complex64>, b: &Array1<Complex64>) -> Result<Array1<Complex64>> {
    let n = a.nrows();
    let trace: f64 = (0..n).map(|i| a[[i, i]].re).sum();
    let base = 1e-9 * (trace / n as f64).max(1e-30) + 1e-12;
    let mut loading = base;
    for _ in 0..6 {
        if let Some(x) = try_cholesky_solve(a, b, loading) {
            return Ok(x);
        }
        loading *= 100.0;
    }
    Err(Error::Numeric(
        "Hermitian solve failed even with heavy diagonal loading".into(),
    ))
}

fn try_cholesky_solve(
    a: &Array2<Complex64>,
    b: &Array1<Complex64>,
    loading: f64,
) -> Option<Array1<Complex64>> {
    let n = a.nrows();
    let mut l = Array2::<Complex64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            if i == j {
                sum += Complex64::new(loading, 0.0);
            }
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]].conj();
            }
            if i == j {
                if sum.re <= 0.0 || !sum.re.is_finite() {
                    return None;
                }
                l[[i, j]] = Complex64::new(sum.re.sqrt(), 0.0);
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    // Forward then backward substitution: L y = b, L^H x = y.
    let mut y = Array1::<Complex64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::<Complex64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]].conj() * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    Some(x)
}

/// One frequency bin: X is the observed sequence, returns the dereverberated
/// sequence after `iterations` rounds of variance re-estimation.
fn wpe_bin(x: &[Complex64], cfg: &WpeConfig) -> Result<Vec<Complex64>> {
    let t = x.len();
    let k = cfg.order;
    let d = cfg.delay;
    let mut y: Vec<Complex64> = x.to_vec();
    // Delayed tap vector for frame t: X[t-d], X[t-d-1], ..., X[t-d-k+1],
    // zero-padded before the signal start.
    let tap = |src: &[Complex64], t: usize, j: usize| -> Complex64 {
        let idx = t as isize - d as isize - j as isize;
        if idx < 0 {
            Complex64::new(0.0, 0.0)
        } else {
            src[idx as usize]
        }
    };
    for _ in 0..cfg.iterations {
        let lambda: Vec<f64> = y.iter().map(|v| v.norm_sqr().max(cfg.variance_floor)).collect();
        let mut r = Array2::<Complex64>::zeros((k, k));
        let mut p = Array1::<Complex64>::zeros(k);
        for ti in 0..t {
            let w = 1.0 / lambda[ti];
            for a in 0..k {
                let xa = tap(x, ti, a);
                if xa.norm_sqr() == 0.0 {
                    continue;
                }
                for b in 0..k {
                    let xb = tap(x, ti, b);
                    r[[a, b]] += xa * xb.conj() * w;
                }
                p[a] += xa * x[ti].conj() * w;
            }
        }
        let g = solve_hermitian(&r, &p)?;
        for ti in 0..t {
            let mut pred = Complex64::new(0.0, 0.0);
            for a in 0..k {
                pred += g[a].conj() * tap(x, ti, a);
            }
            y[ti] = x[ti] - pred;
        }
    }
    Ok(y)
}

/// Iterative STFT-domain WPE; output has the input's length.
pub fn wpe_dereverberate(buf: &AudioBuffer, cfg: &WpeConfig) -> Result<AudioBuffer> {
    if cfg.order == 0 || cfg.iterations == 0 {
        return Err(Error::Config("order and iterations must be positive".into()));
    }
    let stft_cfg = cfg.stft_config(buf.sample_rate)?;
    if buf.len() < stft_cfg.fft_size {
        return Err(Error::Shape(format!(
            "audio of {} samples is shorter than one {}-sample STFT frame",
            buf.len(),
            stft_cfg.fft_size
        )));
    }
    let mut spec = stft(&buf.samples, stft_cfg)?;
    let n_frames = spec.nrows();
    for bin in 0..spec.ncols() {
        let x: Vec<Complex64> = (0..n_frames).map(|t| spec[[t, bin]]).collect();
        let y = wpe_bin(&x, cfg)?;
        for (t, v) in y.into_iter().enumerate() {
            spec[[t, bin]] = v;
        }
    }
    let out = istft(&spec, stft_cfg, buf.len())?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("WPE produced non-finite samples".into()));
    }
    AudioBuffer::new(out, buf.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn white_noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::util::rng_from_seed(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let buf = AudioBuffer::new(vec![0.0; 8000], 8000).unwrap();
        let out = wpe_dereverberate(&buf, &WpeConfig::default()).unwrap();
        assert_eq!(out.len(), 8000);
        assert!(out.samples.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn anechoic_noise_is_nearly_unchanged() {
        let x = white_noise(16_000, 21);
        let buf = AudioBuffer::new(x.clone(), 8000).unwrap();
        let out = wpe_dereverberate(&buf, &WpeConfig::default()).unwrap();
        assert_eq!(out.len(), x.len());
        let e_in: f64 = x.iter().map(|v| v * v).sum();
        let e_diff: f64 = x
            .iter()
            .zip(&out.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(
            e_diff / e_in < 0.05,
            "relative energy change {}",
            e_diff / e_in
        );
    }

    #[test]
    fn reverberant_noise_moves_toward_the_dry_signal() {
        let dry = white_noise(24_000, 22);
        // Sparse exponentially decaying tail, direct path dominant.
        let mut rng = crate::util::rng_from_seed(23);
        let mut rir = vec![0.0; 2400];
        rir[0] = 1.0;
        for i in (40..2400).step_by(17) {
            rir[i] = rng.random_range(-0.5..0.5) * (-(i as f64) / 800.0).exp();
        }
        let wet = crate::dsp::fft::fft_convolve(&dry, &rir);
        let wet = &wet[..dry.len()];
        let buf = AudioBuffer::new(wet.to_vec(), 8000).unwrap();
        let out = wpe_dereverberate(&buf, &WpeConfig::default()).unwrap();
        let err = |sig: &[f64]| -> f64 {
            sig.iter()
                .zip(&dry)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        assert!(
            err(&out.samples) < err(wet),
            "WPE did not reduce distance to the dry signal"
        );
        assert!(out.samples.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn short_audio_is_rejected() {
        let buf = AudioBuffer::new(vec![0.1; 100], 8000).unwrap();
        assert!(wpe_dereverberate(&buf, &WpeConfig::default()).is_err());
    }

    #[test]
    fn hermitian_solve_recovers_known_solution() {
        let mut rng = crate::util::rng_from_seed(29);
        for _ in 0..10 {
            let n = rng.random_range(1..8);
            // Build A = B B^H + I (positive definite).
            let b = Array2::from_shape_fn((n, n), |_| {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let mut a = Array2::<Complex64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let mut s = Complex64::new(0.0, 0.0);
                    for k in 0..n {
                        s += b[[i, k]] * b[[j, k]].conj();
                    }
                    a[[i, j]] = s;
                }
                a[[i, i]] += Complex64::new(1.0, 0.0);
            }
            let x_true = Array1::from_shape_fn(n, |_| {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let rhs = a.dot(&x_true);
            let x = solve_hermitian(&a, &rhs).unwrap();
            for (xi, ti) in x.iter().zip(x_true.iter()) {
                assert!((xi - ti).norm() < 1e-6, "{xi} vs {ti}");
            }
        }
    }
}
