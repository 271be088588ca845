//! Bundled synthetic corpus generator: separable artificial "speakers" for
//! end-to-end runs without any external data.
//!
//! Each speaker is a fixed randomly drawn voice profile (pitch plus a bank
//! of parallel resonators standing in for formants) excited per utterance
//! by a jittered pulse train with breath noise and pauses. Different
//! utterances of one speaker share the filter but not the excitation, so
//! classes are compact without being trivial point clouds.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioBuffer};
use crate::error::{Error, Result};
use crate::manifest::{save_manifest, Manifest, UtteranceRecord};
use crate::trials::{save_trial_key, save_trial_list, Trial, TrialKey, TrialLabel, TrialList};
use crate::util::{derive_seed, randn, rng_from_seed};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoSpec {
    pub n_speakers: usize,
    /// Leading speakers train the extractor; the next block scores the
    /// development trials; the remainder forms the evaluation set.
    pub train_speakers: usize,
    pub dev_speakers: usize,
    pub utts_per_train_speaker: usize,
    pub utts_per_holdout_speaker: usize,
    pub sample_rate: u32,
    pub noise_files_per_kind: usize,
}

impl Default for DemoSpec {
    fn default() -> Self {
        DemoSpec {
            n_speakers: 30,
            train_speakers: 20,
            dev_speakers: 5,
            utts_per_train_speaker: 8,
            utts_per_holdout_speaker: 6,
            sample_rate: 8000,
            noise_files_per_kind: 3,
        }
    }
}

impl DemoSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_speakers < 2 {
            return Err(Error::Config("demo corpus needs >= 2 training speakers".into()));
        }
        if self.dev_speakers < 2 || self.n_speakers < self.train_speakers + self.dev_speakers + 2
        {
            return Err(Error::Config(
                "demo corpus needs >= 2 dev and >= 2 eval speakers".into(),
            ));
        }
        if self.utts_per_train_speaker < 2 || self.utts_per_holdout_speaker < 2 {
            return Err(Error::Config("demo corpus needs >= 2 utterances per speaker".into()));
        }
        if self.sample_rate < 8000 {
            return Err(Error::Config("demo sample rate must be >= 8 kHz".into()));
        }
        if self.noise_files_per_kind == 0 {
            return Err(Error::Config("demo corpus needs at least one noise file".into()));
        }
        Ok(())
    }
}

/// Paths of everything the generator wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoLayout {
    pub root: PathBuf,
    pub noise_dir: PathBuf,
    pub train_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub dev_trials: PathBuf,
    pub dev_key: PathBuf,
    pub eval_trials: PathBuf,
    pub eval_key: PathBuf,
}

impl DemoLayout {
    pub fn under(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref().to_path_buf();
        DemoLayout {
            noise_dir: root.join("noise"),
            train_manifest: root.join("train.manifest"),
            dev_manifest: root.join("dev.manifest"),
            eval_manifest: root.join("eval.manifest"),
            dev_trials: root.join("dev.trials"),
            dev_key: root.join("dev.key"),
            eval_trials: root.join("eval.trials"),
            eval_key: root.join("eval.key"),
            root,
        }
    }
}

struct Resonator {
    freq: f64,
    bandwidth: f64,
    gain: f64,
}

struct VoiceProfile {
    f0: f64,
    resonators: Vec<Resonator>,
    breath: f64,
    vibrato_hz: f64,
    vibrato_depth: f64,
}

fn draw_profile(rng: &mut impl Rng, sample_rate: u32) -> VoiceProfile {
    let f0 = 80.0 * (300.0f64 / 80.0).powf(rng.random_range(0.0..1.0));
    // Formant-like bands; keep everything below the 8 kHz Nyquist.
    let ranges: [(f64, f64); 3] = [(280.0, 850.0), (900.0, 2100.0), (2100.0, 3300.0)];
    let nyquist_cap = 0.45 * sample_rate as f64;
    let resonators = ranges
        .iter()
        .map(|&(lo, hi)| Resonator {
            freq: rng.random_range(lo..hi).min(nyquist_cap),
            bandwidth: rng.random_range(60.0..180.0),
            gain: rng.random_range(0.5..1.5),
        })
        .collect();
    VoiceProfile {
        f0,
        resonators,
        breath: rng.random_range(0.02..0.08),
        vibrato_hz: rng.random_range(3.0..6.5),
        vibrato_depth: rng.random_range(0.01..0.05),
    }
}

/// Two-pole resonance applied off-line; output scaled by the section gain.
fn resonate(x: &[f64], r: &Resonator, sample_rate: u32) -> Vec<f64> {
    let omega = 2.0 * std::f64::consts::PI * r.freq / sample_rate as f64;
    let radius = (-std::f64::consts::PI * r.bandwidth / sample_rate as f64).exp();
    let a1 = 2.0 * radius * omega.cos();
    let a2 = -radius * radius;
    // Unit-ish peak gain at resonance.
    let b0 = (1.0 - radius) * (1.0 - 2.0 * radius * (2.0 * omega).cos() + radius * radius).sqrt();
    let mut y = vec![0.0; x.len()];
    let (mut y1, mut y2) = (0.0, 0.0);
    for (n, &xn) in x.iter().enumerate() {
        let yn = b0 * xn + a1 * y1 + a2 * y2;
        y[n] = r.gain * yn;
        y2 = y1;
        y1 = yn;
    }
    y
}

/// On/off mask alternating speech stretches and pauses, with silence
/// padding at both ends so downstream speech detection has work to do.
fn voicing_plan(n: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<bool> {
    let sr = sample_rate as f64;
    let mut mask = vec![false; n];
    let mut pos = (rng.random_range(0.15..0.3) * sr) as usize;
    let tail = (0.15 * sr) as usize;
    while pos + tail < n {
        let speech = (rng.random_range(0.4..1.1) * sr) as usize;
        let end = (pos + speech).min(n.saturating_sub(tail));
        for m in mask.iter_mut().take(end).skip(pos) {
            *m = true;
        }
        pos = end + (rng.random_range(0.12..0.35) * sr) as usize;
    }
    mask
}

fn synthesize_utterance(
    profile: &VoiceProfile,
    sample_rate: u32,
    seconds: f64,
    rng: &mut impl Rng,
) -> AudioBuffer {
    let sr = sample_rate as f64;
    let n = (seconds * sr) as usize;
    let voiced = voicing_plan(n, sample_rate, rng);

    // Glottal-ish excitation: jittered pulse train plus breath noise.
    let mut excitation = vec![0.0; n];
    let phase0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut drift = 0.0;
    let mut next_pulse = 0.0f64;
    for t in 0..n {
        if !voiced[t] {
            // Keep the excitation clock running so stretches stay aligned.
            if (t as f64) >= next_pulse {
                next_pulse = t as f64;
            }
            excitation[t] = 0.05 * profile.breath * randn(rng);
            continue;
        }
        drift += 0.0005 * randn(rng);
        drift = drift.clamp(-0.1, 0.1);
        let vibrato = profile.vibrato_depth
            * (std::f64::consts::TAU * profile.vibrato_hz * t as f64 / sr + phase0).sin();
        let f0 = profile.f0 * (1.0 + vibrato + drift);
        if (t as f64) >= next_pulse {
            excitation[t] = 1.0 + 0.08 * randn(rng);
            next_pulse = t as f64 + sr / f0;
        }
        excitation[t] += profile.breath * randn(rng);
    }

    let mut out = vec![0.0; n];
    for r in &profile.resonators {
        let band = resonate(&excitation, r, sample_rate);
        for (o, b) in out.iter_mut().zip(&band) {
            *o += b;
        }
    }
    for (o, e) in out.iter_mut().zip(&excitation) {
        *o += 0.05 * e;
    }

    // Set the voiced-region level, leave a faint floor elsewhere.
    let voiced_energy: f64 = out
        .iter()
        .zip(&voiced)
        .filter(|(_, &v)| v)
        .map(|(&s, _)| s * s)
        .sum();
    let n_voiced = voiced.iter().filter(|&&v| v).count().max(1);
    let rms = (voiced_energy / n_voiced as f64).sqrt().max(1e-9);
    let gain = rng.random_range(0.05..0.12) / rms;
    for (s, &v) in out.iter_mut().zip(&voiced) {
        *s *= gain;
        if !v {
            *s += 1e-4 * randn(rng);
        }
        *s = s.clamp(-0.99, 0.99);
    }
    AudioBuffer::new(out, sample_rate).expect("synthesized audio is nonempty")
}

fn babble_noise(sample_rate: u32, seconds: f64, rng: &mut impl Rng) -> AudioBuffer {
    let n = (seconds * sample_rate as f64) as usize;
    let mut sum = vec![0.0; n];
    for _ in 0..6 {
        let profile = draw_profile(rng, sample_rate);
        let voice = synthesize_utterance(&profile, sample_rate, seconds, rng);
        for (acc, &s) in sum.iter_mut().zip(&voice.samples) {
            *acc += s;
        }
    }
    level_to(&mut sum, 0.1);
    AudioBuffer::new(sum, sample_rate).expect("nonempty")
}

fn music_noise(sample_rate: u32, seconds: f64, rng: &mut impl Rng) -> AudioBuffer {
    let sr = sample_rate as f64;
    let n = (seconds * sr) as usize;
    let mut sum = vec![0.0; n];
    // Pentatonic ladder keeps the tracks consonant and clearly non-speech.
    let scale = [220.0, 247.5, 277.2, 330.0, 371.25, 440.0, 495.0, 554.4];
    for _ in 0..3 {
        let mut t = 0usize;
        while t < n {
            let note = scale[rng.random_range(0..scale.len())];
            let dur = (rng.random_range(0.2..0.5) * sr) as usize;
            let end = (t + dur).min(n);
            for (k, s) in sum.iter_mut().enumerate().take(end).skip(t) {
                let local = (k - t) as f64 / sr;
                let env = (-3.0 * local).exp();
                let ph = std::f64::consts::TAU * note * local;
                *s += env * (ph.sin() + 0.4 * (2.0 * ph).sin() + 0.2 * (3.0 * ph).sin());
            }
            t = end;
        }
    }
    for s in sum.iter_mut() {
        *s += 0.01 * randn(rng);
    }
    level_to(&mut sum, 0.1);
    AudioBuffer::new(sum, sample_rate).expect("nonempty")
}

fn generic_noise(sample_rate: u32, seconds: f64, rng: &mut impl Rng) -> AudioBuffer {
    let n = (seconds * sample_rate as f64) as usize;
    // One-pole lowpass over white noise gives a pink-ish ambience.
    let pole = rng.random_range(0.9..0.99);
    let mut out = vec![0.0; n];
    let mut state = 0.0;
    for s in out.iter_mut() {
        state = pole * state + (1.0 - pole) * randn(rng);
        *s = state;
    }
    // A mains-hum component on some files.
    if rng.random_range(0..2) == 1 {
        let hum = rng.random_range(49.0..61.0);
        for (t, s) in out.iter_mut().enumerate() {
            *s += 0.3 * (std::f64::consts::TAU * hum * t as f64 / sample_rate as f64).sin();
        }
    }
    level_to(&mut out, 0.1);
    AudioBuffer::new(out, sample_rate).expect("nonempty")
}

fn level_to(samples: &mut [f64], target_rms: f64) {
    let rms =
        (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt().max(1e-12);
    let gain = target_rms / rms;
    for s in samples.iter_mut() {
        *s = (*s * gain).clamp(-0.99, 0.99);
    }
}

/// All unordered utterance pairs within one manifest, labeled by speaker.
pub fn exhaustive_trials(manifest: &Manifest) -> Result<(TrialList, TrialKey)> {
    let mut utts: Vec<(&str, &str)> = manifest
        .iter()
        .map(|r| (r.utt_id.as_str(), r.speaker_id.as_str()))
        .collect();
    utts.sort();
    let mut trials = Vec::new();
    let mut labels = Vec::new();
    for i in 0..utts.len() {
        for j in (i + 1)..utts.len() {
            trials.push(Trial {
                model_id: utts[i].0.to_string(),
                test_id: utts[j].0.to_string(),
            });
            labels.push(if utts[i].1 == utts[j].1 {
                TrialLabel::Target
            } else {
                TrialLabel::Nontarget
            });
        }
    }
    Ok((TrialList::new(trials)?, TrialKey { labels }))
}

/// Generate the corpus under `root`: per-split WAVs and manifests, noise
/// recordings for the augmentation stage, and exhaustive trial lists with
/// keys for the dev and eval splits. Fully determined by `seed`.
pub fn generate_demo_corpus(
    root: impl AsRef<Path>,
    spec: &DemoSpec,
    seed: u64,
) -> Result<DemoLayout> {
    spec.validate()?;
    let layout = DemoLayout::under(root);
    let wav_dir = layout.root.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut splits: Vec<(String, Vec<UtteranceRecord>)> = vec![
        ("train".into(), Vec::new()),
        ("dev".into(), Vec::new()),
        ("eval".into(), Vec::new()),
    ];
    for spk in 0..spec.n_speakers {
        let speaker_id = format!("spk{spk:03}");
        let mut rng = rng_from_seed(derive_seed(seed, &format!("demo-voice-{speaker_id}")));
        let profile = draw_profile(&mut rng, spec.sample_rate);
        let (split_idx, n_utts) = if spk < spec.train_speakers {
            (0, spec.utts_per_train_speaker)
        } else if spk < spec.train_speakers + spec.dev_speakers {
            (1, spec.utts_per_holdout_speaker)
        } else {
            (2, spec.utts_per_holdout_speaker)
        };
        let spk_dir = wav_dir.join(&speaker_id);
        std::fs::create_dir_all(&spk_dir).map_err(|e| Error::io(&spk_dir, e))?;
        for u in 0..n_utts {
            let utt_id = format!("{speaker_id}_u{u:02}");
            let seconds = rng.random_range(2.5..4.0);
            let audio = synthesize_utterance(&profile, spec.sample_rate, seconds, &mut rng);
            let path = spk_dir.join(format!("{utt_id}.wav"));
            write_wav(&path, &audio)?;
            splits[split_idx].1.push(UtteranceRecord {
                utt_id,
                speaker_id: speaker_id.clone(),
                path,
                sample_rate: spec.sample_rate,
                speech_seconds: None,
                augmentation_tag: None,
                source_utt_id: None,
            });
        }
    }

    let manifests: Vec<Manifest> = splits
        .into_iter()
        .map(|(_, records)| Manifest::new(records))
        .collect::<Result<_>>()?;
    save_manifest(&layout.train_manifest, &manifests[0])?;
    save_manifest(&layout.dev_manifest, &manifests[1])?;
    save_manifest(&layout.eval_manifest, &manifests[2])?;

    let (dev_trials, dev_key) = exhaustive_trials(&manifests[1])?;
    save_trial_list(&layout.dev_trials, &dev_trials)?;
    save_trial_key(&layout.dev_key, &dev_trials, &dev_key)?;
    let (eval_trials, eval_key) = exhaustive_trials(&manifests[2])?;
    save_trial_list(&layout.eval_trials, &eval_trials)?;
    save_trial_key(&layout.eval_key, &eval_trials, &eval_key)?;

    let mut noise_rng = rng_from_seed(derive_seed(seed, "demo-noise"));
    for kind in ["babble", "music", "ambient"] {
        let dir = if kind == "ambient" {
            layout.noise_dir.clone()
        } else {
            layout.noise_dir.join(kind)
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for k in 0..spec.noise_files_per_kind {
            let seconds = noise_rng.random_range(8.0..12.0);
            let audio = match kind {
                "babble" => babble_noise(spec.sample_rate, seconds, &mut noise_rng),
                "music" => music_noise(spec.sample_rate, seconds, &mut noise_rng),
                _ => generic_noise(spec.sample_rate, seconds, &mut noise_rng),
            };
            write_wav(dir.join(format!("{kind}{k:02}.wav")), &audio)?;
        }
    }
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::NoisePool;
    use crate::audio::read_wav;
    use crate::dsp::mfcc::{compute_mfcc, MfccConfig};
    use crate::dsp::sad::{energy_sad, SadConfig};
    use crate::manifest::load_manifest;
    use crate::trials::{load_trial_key, load_trial_list};
    use ndarray::Axis;

    fn tiny_spec() -> DemoSpec {
        DemoSpec {
            n_speakers: 7,
            train_speakers: 3,
            dev_speakers: 2,
            utts_per_train_speaker: 2,
            utts_per_holdout_speaker: 2,
            sample_rate: 8000,
            noise_files_per_kind: 1,
        }
    }

    #[test]
    fn generates_the_advertised_layout() {
        let dir = tempfile::tempdir().unwrap();
        let layout = generate_demo_corpus(dir.path(), &tiny_spec(), 11).unwrap();

        let train = load_manifest(&layout.train_manifest).unwrap();
        let dev = load_manifest(&layout.dev_manifest).unwrap();
        let eval = load_manifest(&layout.eval_manifest).unwrap();
        assert_eq!(train.len(), 3 * 2);
        assert_eq!(dev.len(), 2 * 2);
        assert_eq!(eval.len(), 2 * 2);
        assert_eq!(train.speakers().len(), 3);

        // Speaker sets are disjoint across splits.
        let mut all = train.speakers();
        all.extend(dev.speakers());
        all.extend(eval.speakers());
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);

        for record in train.iter().chain(dev.iter()).chain(eval.iter()) {
            let audio = read_wav(&record.path).unwrap();
            assert_eq!(audio.sample_rate, 8000);
            assert!(audio.duration_seconds() >= 2.0);
            let peak = audio.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
            assert!(peak > 0.01 && peak <= 0.99, "peak {peak}");
        }

        let list = load_trial_list(&layout.dev_trials).unwrap();
        let key = load_trial_key(&layout.dev_key, &list).unwrap();
        // 4 dev utterances -> 6 pairs, 2 of them same-speaker.
        assert_eq!(list.len(), 6);
        let mask = key.target_mask();
        assert_eq!(mask.iter().filter(|&&t| t).count(), 2);

        let pool = NoisePool::from_dir(&layout.noise_dir, 8000).unwrap();
        assert_eq!(pool.entries.len(), 3);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let l1 = generate_demo_corpus(d1.path(), &tiny_spec(), 21).unwrap();
        let l2 = generate_demo_corpus(d2.path(), &tiny_spec(), 21).unwrap();
        let m1 = load_manifest(&l1.train_manifest).unwrap();
        let m2 = load_manifest(&l2.train_manifest).unwrap();
        assert_eq!(m1.len(), m2.len());
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert_eq!(a.utt_id, b.utt_id);
            let wav_a = std::fs::read(&a.path).unwrap();
            let wav_b = std::fs::read(&b.path).unwrap();
            assert_eq!(wav_a, wav_b, "wav bytes differ for {}", a.utt_id);
        }
        // A different seed must change the audio.
        let d3 = tempfile::tempdir().unwrap();
        let l3 = generate_demo_corpus(d3.path(), &tiny_spec(), 22).unwrap();
        let m3 = load_manifest(&l3.train_manifest).unwrap();
        let wav_a = std::fs::read(&m1.records[0].path).unwrap();
        let wav_c = std::fs::read(&m3.records[0].path).unwrap();
        assert_ne!(wav_a, wav_c);
    }

    #[test]
    fn utterances_contain_real_pauses() {
        let dir = tempfile::tempdir().unwrap();
        let layout = generate_demo_corpus(dir.path(), &tiny_spec(), 31).unwrap();
        let manifest = load_manifest(&layout.train_manifest).unwrap();
        let cfg = SadConfig::default();
        for record in manifest.iter() {
            let audio = read_wav(&record.path).unwrap();
            let mask = energy_sad(&audio, &cfg);
            let frac = mask.n_speech() as f64 / mask.len() as f64;
            assert!(
                (0.2..0.98).contains(&frac),
                "{}: speech fraction {frac}",
                record.utt_id
            );
        }
    }

    /// Same-speaker utterances must sit closer in average-cepstrum space
    /// than different-speaker ones, otherwise the corpus cannot support
    /// any verification experiment.
    #[test]
    fn speakers_are_separable_in_cepstral_space() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DemoSpec {
            n_speakers: 8,
            train_speakers: 4,
            dev_speakers: 2,
            utts_per_train_speaker: 3,
            ..tiny_spec()
        };
        let layout = generate_demo_corpus(dir.path(), &spec, 41).unwrap();
        let manifest = load_manifest(&layout.train_manifest).unwrap();
        let cfg = MfccConfig::for_8khz();
        let mut means = Vec::new();
        for record in manifest.iter() {
            let feats = compute_mfcc(&read_wav(&record.path).unwrap(), &cfg, &record.utt_id)
                .unwrap();
            let mean = feats.data.mean_axis(Axis(0)).unwrap();
            means.push((record.speaker_id.clone(), mean));
        }
        let dist = |a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>| {
            let d = a - b;
            d.dot(&d).sqrt()
        };
        let (mut same, mut diff) = (Vec::new(), Vec::new());
        for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                let d = dist(&means[i].1, &means[j].1);
                if means[i].0 == means[j].0 {
                    same.push(d);
                } else {
                    diff.push(d);
                }
            }
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            avg(&same) < 0.75 * avg(&diff),
            "same {} vs diff {}",
            avg(&same),
            avg(&diff)
        );
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = tiny_spec();
        spec.train_speakers = 1;
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec();
        spec.n_speakers = 6;
        assert!(spec.validate().is_err(), "no eval speakers left");
        let mut spec = tiny_spec();
        spec.utts_per_holdout_speaker = 1;
        assert!(spec.validate().is_err());
    }
}
