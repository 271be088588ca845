//! Reverberant mixing: convolution with an RIR and SNR-controlled addition.

use super::rir::Rir;
use crate::audio::AudioBuffer;
use crate::dsp::fft::fft_convolve;
use crate::error::{Error, Result};

/// Convolution result truncated to the input length. `scale` is 1 unless the
/// peak exceeded full scale and the output was normalized back to |peak| = 1.
#[derive(Debug, Clone)]
pub struct Reverberated {
    pub audio: AudioBuffer,
    pub scale: f64,
}

pub fn reverberate(buf: &AudioBuffer, rir: &Rir) -> Result<Reverberated> {
    if buf.sample_rate != rir.sample_rate {
        return Err(Error::Config(format!(
            "audio rate {} does not match RIR rate {}",
            buf.sample_rate, rir.sample_rate
        )));
    }
    if buf.is_empty() {
        return Err(Error::Empty("audio to reverberate".into()));
    }
    let mut out = fft_convolve(&buf.samples, &rir.taps);
    out.truncate(buf.len());
    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if scale != 1.0 {
        for v in out.iter_mut() {
            *v *= scale;
        }
    }
    Ok(Reverberated {
        audio: AudioBuffer::new(out, buf.sample_rate)?,
        scale,
    })
}

/// Loop or truncate `noise` to `len` samples.
fn tile_noise(noise: &[f64], len: usize) -> Vec<f64> {
    noise.iter().copied().cycle().take(len).collect()
}

/// Scale noise so the speech-to-noise energy ratio hits `snr_db`, then sum.
/// Energies are measured over the active mask when given (per sample, same
/// length as speech), else over the whole buffer.
pub fn mix_at_snr_masked(
    speech: &AudioBuffer,
    noise: &AudioBuffer,
    snr_db: f64,
    active: Option<&[bool]>,
) -> Result<AudioBuffer> {
    if speech.sample_rate != noise.sample_rate {
        return Err(Error::Config(format!(
            "speech rate {} does not match noise rate {}",
            speech.sample_rate, noise.sample_rate
        )));
    }
    if speech.is_empty() {
        return Err(Error::Empty("speech".into()));
    }
    if noise.is_empty() {
        return Err(Error::Empty("noise".into()));
    }
    if let Some(mask) = active {
        if mask.len() != speech.len() {
            return Err(Error::Shape(format!(
                "active mask has {} entries for {} samples",
                mask.len(),
                speech.len()
            )));
        }
    }
    let tiled = tile_noise(&noise.samples, speech.len());
    let energy = |xs: &[f64]| -> f64 {
        match active {
            Some(mask) => xs
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x * x)
                .sum(),
            None => xs.iter().map(|&x| x * x).sum(),
        }
    };
    let e_speech = energy(&speech.samples);
    let e_noise = energy(&tiled);
    if e_speech <= 0.0 {
        return Err(Error::Numeric("zero-energy speech in SNR mix".into()));
    }
    if e_noise <= 0.0 {
        return Err(Error::Numeric("zero-energy noise in SNR mix".into()));
    }
    let k = (e_speech / (e_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = speech
        .samples
        .iter()
        .zip(&tiled)
        .map(|(&s, &n)| s + k * n)
        .collect();
    AudioBuffer::new(samples, speech.sample_rate)
}

pub fn mix_at_snr(speech: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<AudioBuffer> {
    mix_at_snr_masked(speech, noise, snr_db, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise_buf(n: usize, seed: u64, rate: u32) -> AudioBuffer {
        let mut rng = crate::util::rng_from_seed(seed);
        let samples = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
        AudioBuffer::new(samples, rate).unwrap()
    }

    #[test]
    fn unit_impulse_rir_is_identity() {
        let buf = noise_buf(4000, 1, 8000);
        let rir = Rir::new(vec![1.0], 8000).unwrap();
        let out = reverberate(&buf, &rir).unwrap();
        assert_eq!(out.scale, 1.0);
        for (a, b) in out.audio.samples.iter().zip(&buf.samples) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delayed_impulse_shifts_the_signal() {
        let buf = noise_buf(1000, 2, 8000);
        let k = 37;
        let mut taps = vec![0.0; k + 1];
        taps[k] = 1.0;
        let rir = Rir::new(taps, 8000).unwrap();
        let out = reverberate(&buf, &rir).unwrap();
        assert_eq!(out.audio.len(), buf.len());
        for i in 0..k {
            assert!(out.audio.samples[i].abs() < 1e-12);
        }
        for i in k..buf.len() {
            assert!((out.audio.samples[i] - buf.samples[i - k]).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = crate::util::rng_from_seed(3);
        let x: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.1..0.1)).collect();
        let taps: Vec<f64> = (0..4000).map(|_| rng.random_range(-0.01..0.01)).collect();
        let buf = AudioBuffer::new(x.clone(), 8000).unwrap();
        let rir = Rir::new(taps.clone(), 8000).unwrap();
        let fast = reverberate(&buf, &rir).unwrap();
        assert_eq!(fast.scale, 1.0);
        let slow = crate::dsp::fft::naive_convolve(&x, &taps);
        for (a, b) in fast.audio.samples.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn reverberate_is_linear_absent_normalization() {
        let x = noise_buf(2000, 4, 8000);
        let y = noise_buf(2000, 5, 8000);
        let rir = Rir::new(vec![0.05, 0.02, -0.01, 0.004], 8000).unwrap();
        let (a, b) = (0.3, -0.7);
        let combo_samples: Vec<f64> = x
            .samples
            .iter()
            .zip(&y.samples)
            .map(|(&u, &v)| a * u + b * v)
            .collect();
        let combo = AudioBuffer::new(combo_samples, 8000).unwrap();
        let rx = reverberate(&x, &rir).unwrap();
        let ry = reverberate(&y, &rir).unwrap();
        let rc = reverberate(&combo, &rir).unwrap();
        assert_eq!(rx.scale, 1.0);
        assert_eq!(ry.scale, 1.0);
        assert_eq!(rc.scale, 1.0);
        for i in 0..combo.len() {
            let expect = a * rx.audio.samples[i] + b * ry.audio.samples[i];
            assert!((rc.audio.samples[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn peak_normalization_records_scale() {
        let buf = AudioBuffer::new(vec![0.9; 100], 8000).unwrap();
        let rir = Rir::new(vec![2.0], 8000).unwrap();
        let out = reverberate(&buf, &rir).unwrap();
        assert!((out.scale - 1.0 / 1.8).abs() < 1e-12);
        let peak = out.audio.samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
    }

    #[test]
    fn snr_zero_equalizes_energies() {
        let speech = noise_buf(8000, 6, 8000);
        let noise = noise_buf(3000, 7, 8000);
        let mixed = mix_at_snr(&speech, &noise, 0.0).unwrap();
        let e_speech: f64 = speech.samples.iter().map(|x| x * x).sum();
        let e_added: f64 = mixed
            .samples
            .iter()
            .zip(&speech.samples)
            .map(|(m, s)| (m - s) * (m - s))
            .sum();
        assert!(((e_added / e_speech) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn achieved_snr_is_within_hundredth_of_a_db() {
        let speech = noise_buf(8000, 8, 8000);
        let noise = noise_buf(5000, 9, 8000);
        for snr in [-5.0, 0.0, 7.5, 20.0] {
            let mixed = mix_at_snr(&speech, &noise, snr).unwrap();
            let e_speech: f64 = speech.samples.iter().map(|x| x * x).sum();
            let e_added: f64 = mixed
                .samples
                .iter()
                .zip(&speech.samples)
                .map(|(m, s)| (m - s) * (m - s))
                .sum();
            let achieved = 10.0 * (e_speech / e_added).log10();
            assert!((achieved - snr).abs() < 0.01, "target {snr}, got {achieved}");
        }
    }

    #[test]
    fn very_high_snr_leaves_speech_nearly_untouched() {
        let speech = noise_buf(6000, 10, 8000);
        let noise = noise_buf(6000, 11, 8000);
        let mixed = mix_at_snr(&speech, &noise, 100.0).unwrap();
        let num: f64 = mixed
            .samples
            .iter()
            .zip(&speech.samples)
            .map(|(m, s)| (m - s) * (m - s))
            .sum();
        let den: f64 = speech.samples.iter().map(|x| x * x).sum();
        assert!((num / den).sqrt() < 1e-4);
    }

    #[test]
    fn unit_energy_20db_noise_scale_is_a_tenth() {
        // Single-sample signals of unit energy make the scale directly
        // observable.
        let speech = AudioBuffer::new(vec![1.0], 8000).unwrap();
        let noise = AudioBuffer::new(vec![1.0], 8000).unwrap();
        let mixed = mix_at_snr(&speech, &noise, 20.0).unwrap();
        assert!((mixed.samples[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let speech = noise_buf(100, 12, 8000);
        let silence = AudioBuffer::new(vec![0.0; 100], 8000).unwrap();
        assert!(mix_at_snr(&silence, &speech, 0.0).is_err());
        assert!(mix_at_snr(&speech, &silence, 0.0).is_err());
        let wrong_rate = noise_buf(100, 13, 16_000);
        assert!(mix_at_snr(&speech, &wrong_rate, 0.0).is_err());
    }

    #[test]
    fn masked_snr_measures_only_active_samples() {
        let mut samples = vec![0.0; 200];
        for v in samples.iter_mut().take(100) {
            *v = 0.5;
        }
        let speech = AudioBuffer::new(samples, 8000).unwrap();
        let noise = AudioBuffer::new(vec![0.25; 200], 8000).unwrap();
        let mask: Vec<bool> = (0..200).map(|i| i < 100).collect();
        let mixed = mix_at_snr_masked(&speech, &noise, 0.0, Some(&mask)).unwrap();
        let e_speech_active = 100.0 * 0.25;
        let e_added_active: f64 = mixed.samples[..100]
            .iter()
            .map(|m| (m - 0.5) * (m - 0.5))
            .sum();
        assert!(((e_added_active / e_speech_active) - 1.0).abs() < 1e-6);
    }
}
