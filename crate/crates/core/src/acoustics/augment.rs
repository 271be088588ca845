//! Augmentation recipes: mode sampling, paired same-room reverberation of
//! speech and noise, SNR mixing, and training-manifest assembly.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mix::{mix_at_snr, reverberate};
use super::rir::{generate_rir, sample_room_setup, Rir};
use crate::audio::{read_wav, AudioBuffer};
use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use crate::manifest::{AugmentationTag, Manifest, UtteranceRecord};
use crate::util::{derive_seed, rng_from_seed};

pub const RIR_BANK_MAGIC: &[u8; 4] = b"SVRI";
pub const RIR_BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Babble,
    Music,
    Noise,
}

#[derive(Debug, Clone)]
pub struct NoiseEntry {
    pub id: String,
    pub kind: NoiseKind,
    pub audio: AudioBuffer,
}

/// In-memory noise corpus. On disk this is a directory of WAV files; the
/// immediate subdirectory name (babble/, music/, anything else) sets the
/// kind, files at the top level count as generic noise.
#[derive(Debug, Clone, Default)]
pub struct NoisePool {
    pub entries: Vec<NoiseEntry>,
}

impl NoisePool {
    pub fn from_entries(entries: Vec<NoiseEntry>) -> Self {
        NoisePool { entries }
    }

    pub fn from_dir(dir: impl AsRef<Path>, expected_rate: u32) -> Result<Self> {
        let dir = dir.as_ref();
        let mut entries = Vec::new();
        let mut stack = vec![(dir.to_path_buf(), NoiseKind::Noise)];
        while let Some((d, kind)) = stack.pop() {
            let mut listing: Vec<_> = std::fs::read_dir(&d)
                .map_err(|e| Error::io(&d, e))?
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(&d, e))?;
            listing.sort_by_key(|e| e.file_name());
            for item in listing {
                let path = item.path();
                if path.is_dir() {
                    let sub_kind = match path.file_name().and_then(|n| n.to_str()) {
                        Some("babble") => NoiseKind::Babble,
                        Some("music") => NoiseKind::Music,
                        _ => NoiseKind::Noise,
                    };
                    stack.push((path, sub_kind));
                } else if path.extension().is_some_and(|e| e == "wav") {
                    let audio = read_wav(&path)?;
                    if audio.sample_rate != expected_rate {
                        return Err(Error::Config(format!(
                            "noise file {} has rate {}, expected {expected_rate}",
                            path.display(),
                            audio.sample_rate
                        )));
                    }
                    let id = path
                        .file_stem()
                        .and_then(|n| n.to_str())
                        .unwrap_or("noise")
                        .to_string();
                    entries.push(NoiseEntry { id, kind, audio });
                }
            }
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(NoisePool { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn pick_of_kind(&self, kind: NoiseKind, rng: &mut impl Rng) -> Result<&NoiseEntry> {
        let matching: Vec<&NoiseEntry> =
            self.entries.iter().filter(|e| e.kind == kind).collect();
        if matching.is_empty() {
            return Err(Error::Empty(format!("noise pool has no {kind:?} entries")));
        }
        Ok(matching[rng.random_range(0..matching.len())])
    }

    fn pick_any(&self, rng: &mut impl Rng) -> Result<&NoiseEntry> {
        if self.entries.is_empty() {
            return Err(Error::Empty("noise pool".into()));
        }
        Ok(&self.entries[rng.random_range(0..self.entries.len())])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    Reverb,
    Babble,
    Music,
    Noise,
    ReverbNoise,
}

impl AugMode {
    pub fn tag(self) -> AugmentationTag {
        match self {
            AugMode::Reverb => AugmentationTag::Reverb,
            AugMode::Babble => AugmentationTag::Babble,
            AugMode::Music => AugmentationTag::Music,
            AugMode::Noise => AugmentationTag::Noise,
            AugMode::ReverbNoise => AugmentationTag::ReverbNoise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RirPolicy {
    /// Speech convolved with an RIR drawn from a fixed set; noise added dry.
    ExternalRirSet,
    /// Speech and noise convolved with two distinct RIRs of one room.
    GeneratedPaired,
}

fn default_snr_babble() -> (f64, f64) {
    (13.0, 20.0)
}
fn default_snr_music() -> (f64, f64) {
    (5.0, 15.0)
}
fn default_snr_noise() -> (f64, f64) {
    (0.0, 15.0)
}

/// SNR ranges keyed by noise kind; the reverb+noise mode inherits the range
/// of whichever kind it draws.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SnrRanges {
    #[serde(default = "default_snr_babble")]
    pub babble: (f64, f64),
    #[serde(default = "default_snr_music")]
    pub music: (f64, f64),
    #[serde(default = "default_snr_noise")]
    pub noise: (f64, f64),
}

impl Default for SnrRanges {
    fn default() -> Self {
        SnrRanges {
            babble: default_snr_babble(),
            music: default_snr_music(),
            noise: default_snr_noise(),
        }
    }
}

impl SnrRanges {
    fn for_kind(&self, kind: NoiseKind) -> (f64, f64) {
        match kind {
            NoiseKind::Babble => self.babble,
            NoiseKind::Music => self.music,
            NoiseKind::Noise => self.noise,
        }
    }
}

fn default_min_speech_seconds() -> f64 {
    3.5
}
fn default_per_utterance_cap() -> usize {
    8
}
fn default_n_rooms() -> usize {
    100
}
fn default_rirs_per_room() -> usize {
    4
}
fn default_rir_max_order() -> usize {
    12
}
fn default_rir_length_s() -> f64 {
    0.4
}
fn default_copies_per_utterance() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentationRecipe {
    /// Mode proportions; must sum to 1.
    pub proportions: Vec<(AugMode, f64)>,
    #[serde(default)]
    pub snr_ranges: SnrRanges,
    #[serde(default = "default_min_speech_seconds")]
    pub min_speech_seconds: f64,
    /// Cap on augmented copies kept per original utterance.
    #[serde(default = "default_per_utterance_cap")]
    pub per_utterance_cap: usize,
    pub rir_policy: RirPolicy,
    #[serde(default = "default_n_rooms")]
    pub n_rooms: usize,
    #[serde(default = "default_rirs_per_room")]
    pub rirs_per_room: usize,
    #[serde(default = "default_rir_max_order")]
    pub rir_max_order: usize,
    #[serde(default = "default_rir_length_s")]
    pub rir_length_s: f64,
    /// How many augmented copies to generate per clean utterance.
    #[serde(default = "default_copies_per_utterance")]
    pub copies_per_utterance: usize,
}

impl AugmentationRecipe {
    /// Kaldi-style: reverb or one dry noise kind per copy, external RIRs.
    pub fn fixdata1() -> Self {
        AugmentationRecipe {
            proportions: vec![
                (AugMode::Reverb, 0.25),
                (AugMode::Babble, 0.25),
                (AugMode::Music, 0.25),
                (AugMode::Noise, 0.25),
            ],
            snr_ranges: SnrRanges::default(),
            min_speech_seconds: default_min_speech_seconds(),
            per_utterance_cap: default_per_utterance_cap(),
            rir_policy: RirPolicy::ExternalRirSet,
            n_rooms: default_n_rooms(),
            rirs_per_room: default_rirs_per_room(),
            rir_max_order: default_rir_max_order(),
            rir_length_s: default_rir_length_s(),
            copies_per_utterance: default_copies_per_utterance(),
        }
    }

    /// Generated rooms; noisy copies reverberate speech and noise with
    /// distinct same-room RIRs.
    pub fn fixdata2() -> Self {
        AugmentationRecipe {
            proportions: vec![(AugMode::Reverb, 0.25), (AugMode::ReverbNoise, 0.75)],
            rir_policy: RirPolicy::GeneratedPaired,
            ..AugmentationRecipe::fixdata1()
        }
    }

    /// Identical audio recipe to fixdata2; the upstream difference (which
    /// SAD filters the examples) is a pipeline flag, not an audio one.
    pub fn fixdata3() -> Self {
        AugmentationRecipe::fixdata2()
    }

    /// Same audio recipe as fixdata1; differs upstream in corpus and rate.
    pub fn opendata4() -> Self {
        AugmentationRecipe::fixdata1()
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "fixdata1" => Some(Self::fixdata1()),
            "fixdata2" => Some(Self::fixdata2()),
            "fixdata3" => Some(Self::fixdata3()),
            "opendata4" => Some(Self::opendata4()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proportions.is_empty() {
            return Err(Error::Config("recipe has no modes".into()));
        }
        let sum: f64 = self.proportions.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-9 || self.proportions.iter().any(|(_, p)| *p < 0.0) {
            return Err(Error::Config(format!(
                "mode proportions must be non-negative and sum to 1, got {sum}"
            )));
        }
        for (lo, hi) in [
            self.snr_ranges.babble,
            self.snr_ranges.music,
            self.snr_ranges.noise,
        ] {
            if lo > hi {
                return Err(Error::Config(format!("empty SNR range [{lo}, {hi}]")));
            }
        }
        if self.min_speech_seconds < 0.0 {
            return Err(Error::Config("min_speech_seconds must be >= 0".into()));
        }
        if self.per_utterance_cap == 0 {
            return Err(Error::Config("per_utterance_cap must be >= 1".into()));
        }
        let needs_pairs = self.rir_policy == RirPolicy::GeneratedPaired
            && self
                .proportions
                .iter()
                .any(|(m, p)| *m == AugMode::ReverbNoise && *p > 0.0);
        if needs_pairs && self.rirs_per_room < 2 {
            return Err(Error::Config(
                "paired reverberation needs at least 2 RIRs per room".into(),
            ));
        }
        Ok(())
    }

    fn draw_mode(&self, rng: &mut impl Rng) -> AugMode {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        for (mode, p) in &self.proportions {
            acc += p;
            if u < acc {
                return *mode;
            }
        }
        self.proportions.last().expect("validated non-empty").0
    }
}

#[derive(Debug, Clone)]
pub struct BankRir {
    pub rir_id: String,
    pub rir: Rir,
}

#[derive(Debug, Clone)]
pub struct RoomRirs {
    pub room_id: String,
    pub rirs: Vec<BankRir>,
}

/// Pregenerated RIRs grouped by room.
#[derive(Debug, Clone, Default)]
pub struct RirBank {
    pub rooms: Vec<RoomRirs>,
}

impl RirBank {
    pub fn n_rirs(&self) -> usize {
        self.rooms.iter().map(|r| r.rirs.len()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ContainerWriter::new(RIR_BANK_MAGIC, RIR_BANK_VERSION);
        w.put_u32(self.rooms.len() as u32);
        for room in &self.rooms {
            w.put_str(&room.room_id)?;
            w.put_u32(room.rirs.len() as u32);
            for entry in &room.rirs {
                w.put_str(&entry.rir_id)?;
                w.put_u32(entry.rir.sample_rate);
                w.put_u32(entry.rir.taps.len() as u32);
                let taps: Vec<f32> = entry.rir.taps.iter().map(|&t| t as f32).collect();
                w.put_f32_slice(&taps);
            }
        }
        w.write_to(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = ContainerReader::open(path, RIR_BANK_MAGIC, RIR_BANK_VERSION)?;
        let n_rooms = r.get_u32()? as usize;
        let mut rooms = Vec::with_capacity(n_rooms);
        for _ in 0..n_rooms {
            let room_id = r.get_str()?;
            let n_rirs = r.get_u32()? as usize;
            let mut rirs = Vec::with_capacity(n_rirs);
            for _ in 0..n_rirs {
                let rir_id = r.get_str()?;
                let rate = r.get_u32()?;
                let n_taps = r.get_u32()? as usize;
                let taps = r.get_f32_vec(n_taps)?;
                let rir = Rir::new(taps.iter().map(|&t| f64::from(t)).collect(), rate)
                    .map_err(|e| Error::container(path, e.to_string()))?;
                rirs.push(BankRir { rir_id, rir });
            }
            rooms.push(RoomRirs { room_id, rirs });
        }
        r.finish()?;
        Ok(RirBank { rooms })
    }
}

/// Sample `n_rooms` rooms and generate `rirs_per_room` RIRs in each.
pub fn build_rir_bank(
    seed: u64,
    recipe: &AugmentationRecipe,
    sample_rate: u32,
) -> Result<RirBank> {
    let mut rooms = Vec::with_capacity(recipe.n_rooms);
    for r in 0..recipe.n_rooms {
        let room_id = format!("room-{r:05}");
        let (room, placements) = sample_room_setup(
            derive_seed(seed, &room_id),
            recipe.rirs_per_room,
            sample_rate,
        );
        let mut rirs = Vec::with_capacity(placements.len());
        for (p, placement) in placements.iter().enumerate() {
            let rir = generate_rir(
                &room,
                &placement.src,
                &placement.mic,
                recipe.rir_max_order,
                recipe.rir_length_s,
            )?;
            rirs.push(BankRir {
                rir_id: format!("{room_id}-rir-{p}"),
                rir,
            });
        }
        rooms.push(RoomRirs { room_id, rirs });
    }
    Ok(RirBank { rooms })
}

pub struct AugmentResources<'a> {
    pub noise_pool: &'a NoisePool,
    pub rir_bank: Option<&'a RirBank>,
}

/// One augmented utterance plus the bookkeeping the manifest does not carry.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub audio: AudioBuffer,
    pub record: UtteranceRecord,
    pub room_id: Option<String>,
    pub speech_rir_id: Option<String>,
    pub noise_rir_id: Option<String>,
    pub noise_id: Option<String>,
    pub snr_db: Option<f64>,
}

fn pick_room<'a>(bank: &'a RirBank, rng: &mut impl Rng) -> Result<&'a RoomRirs> {
    if bank.rooms.is_empty() {
        return Err(Error::Empty("RIR bank".into()));
    }
    Ok(&bank.rooms[rng.random_range(0..bank.rooms.len())])
}

fn need_bank<'a>(res: &AugmentResources<'a>) -> Result<&'a RirBank> {
    res.rir_bank
        .ok_or_else(|| Error::Config("recipe needs RIRs but no bank was provided".into()))
}

/// Apply one sampled augmentation mode to an utterance. Deterministic under
/// the seed; the returned record has an empty path for the caller to fill
/// after writing the audio.
pub fn augment_utterance(
    rec: &UtteranceRecord,
    audio: &AudioBuffer,
    new_utt_id: &str,
    recipe: &AugmentationRecipe,
    res: &AugmentResources,
    seed: u64,
) -> Result<Augmented> {
    recipe.validate()?;
    let mut rng = rng_from_seed(seed);
    let mode = recipe.draw_mode(&mut rng);
    let mut out = Augmented {
        audio: audio.clone(),
        record: UtteranceRecord {
            utt_id: new_utt_id.to_string(),
            speaker_id: rec.speaker_id.clone(),
            path: std::path::PathBuf::new(),
            sample_rate: audio.sample_rate,
            speech_seconds: None,
            augmentation_tag: Some(mode.tag()),
            source_utt_id: Some(rec.utt_id.clone()),
        },
        room_id: None,
        speech_rir_id: None,
        noise_rir_id: None,
        noise_id: None,
        snr_db: None,
    };
    match mode {
        AugMode::Reverb => {
            let bank = need_bank(res)?;
            let room = pick_room(bank, &mut rng)?;
            let entry = &room.rirs[rng.random_range(0..room.rirs.len())];
            out.audio = reverberate(audio, &entry.rir)?.audio;
            out.room_id = Some(room.room_id.clone());
            out.speech_rir_id = Some(entry.rir_id.clone());
        }
        AugMode::Babble | AugMode::Music | AugMode::Noise => {
            let kind = match mode {
                AugMode::Babble => NoiseKind::Babble,
                AugMode::Music => NoiseKind::Music,
                _ => NoiseKind::Noise,
            };
            let entry = res.noise_pool.pick_of_kind(kind, &mut rng)?;
            let (lo, hi) = recipe.snr_ranges.for_kind(kind);
            let snr = rng.random_range(lo..=hi);
            out.audio = mix_at_snr(audio, &entry.audio, snr)?;
            out.noise_id = Some(entry.id.clone());
            out.snr_db = Some(snr);
        }
        AugMode::ReverbNoise => {
            let entry = res.noise_pool.pick_any(&mut rng)?;
            let (lo, hi) = recipe.snr_ranges.for_kind(entry.kind);
            let snr = rng.random_range(lo..=hi);
            let bank = need_bank(res)?;
            match recipe.rir_policy {
                RirPolicy::GeneratedPaired => {
                    let room = pick_room(bank, &mut rng)?;
                    if room.rirs.len() < 2 {
                        return Err(Error::Config(format!(
                            "room {} has fewer than 2 RIRs for paired reverberation",
                            room.room_id
                        )));
                    }
                    let a = rng.random_range(0..room.rirs.len());
                    let mut b = rng.random_range(0..room.rirs.len() - 1);
                    if b >= a {
                        b += 1;
                    }
                    // Tile noise to the speech length before reverberating so
                    // its tail is shaped like the speech path's.
                    let tiled: Vec<f64> = entry
                        .audio
                        .samples
                        .iter()
                        .copied()
                        .cycle()
                        .take(audio.len())
                        .collect();
                    let noise_buf = AudioBuffer::new(tiled, audio.sample_rate)?;
                    let wet_speech = reverberate(audio, &room.rirs[a].rir)?.audio;
                    let wet_noise = reverberate(&noise_buf, &room.rirs[b].rir)?.audio;
                    out.audio = mix_at_snr(&wet_speech, &wet_noise, snr)?;
                    out.room_id = Some(room.room_id.clone());
                    out.speech_rir_id = Some(room.rirs[a].rir_id.clone());
                    out.noise_rir_id = Some(room.rirs[b].rir_id.clone());
                }
                RirPolicy::ExternalRirSet => {
                    let room = pick_room(bank, &mut rng)?;
                    let rir = &room.rirs[rng.random_range(0..room.rirs.len())];
                    let wet_speech = reverberate(audio, &rir.rir)?.audio;
                    out.audio = mix_at_snr(&wet_speech, &entry.audio, snr)?;
                    out.room_id = Some(room.room_id.clone());
                    out.speech_rir_id = Some(rir.rir_id.clone());
                }
            }
            out.noise_id = Some(entry.id.clone());
            out.snr_db = Some(snr);
        }
    }
    Ok(out)
}

/// Filter by measured speech duration and cap augmented copies per original
/// utterance. `speech_seconds` must cover every record.
pub fn build_training_manifest(
    source: &Manifest,
    recipe: &AugmentationRecipe,
    speech_seconds: &HashMap<String, f64>,
    seed: u64,
) -> Result<Manifest> {
    let mut clean = Vec::new();
    let mut by_source: HashMap<String, Vec<UtteranceRecord>> = HashMap::new();
    for rec in source.iter() {
        let secs = *speech_seconds.get(&rec.utt_id).ok_or_else(|| {
            Error::Config(format!("no SAD result for utterance {:?}", rec.utt_id))
        })?;
        if secs < recipe.min_speech_seconds {
            continue;
        }
        let mut rec = rec.clone();
        rec.speech_seconds = Some(secs);
        match &rec.source_utt_id {
            Some(src_id) => by_source.entry(src_id.clone()).or_default().push(rec),
            None => clean.push(rec),
        }
    }
    let mut kept = clean;
    let mut groups: Vec<(String, Vec<UtteranceRecord>)> = by_source.into_iter().collect();
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    for (src_id, mut group) in groups {
        group.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        if group.len() > recipe.per_utterance_cap {
            let mut rng = rng_from_seed(derive_seed(seed, &src_id));
            group.shuffle(&mut rng);
            group.truncate(recipe.per_utterance_cap);
            group.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        }
        kept.extend(group);
    }
    if kept.is_empty() {
        return Err(Error::Empty(
            "training manifest: every record fell below the speech-duration floor".into(),
        ));
    }
    kept.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Manifest::new(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone_buf(n: usize, rate: u32, freq: f64) -> AudioBuffer {
        let samples = (0..n)
            .map(|i| 0.4 * (std::f64::consts::TAU * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioBuffer::new(samples, rate).unwrap()
    }

    fn noise_pool(rate: u32) -> NoisePool {
        let mut rng = crate::util::rng_from_seed(40);
        let mut entry = |id: &str, kind| {
            let samples: Vec<f64> = (0..(rate as usize / 2))
                .map(|_| rng.random_range(-0.2..0.2))
                .collect();
            NoiseEntry {
                id: id.to_string(),
                kind,
                audio: AudioBuffer::new(samples, rate).unwrap(),
            }
        };
        NoisePool::from_entries(vec![
            entry("bab-0", NoiseKind::Babble),
            entry("mus-0", NoiseKind::Music),
            entry("noi-0", NoiseKind::Noise),
        ])
    }

    fn identity_bank(rate: u32) -> RirBank {
        let unit = |id: &str| BankRir {
            rir_id: id.to_string(),
            rir: Rir::new(vec![1.0], rate).unwrap(),
        };
        RirBank {
            rooms: vec![RoomRirs {
                room_id: "room-x".into(),
                rirs: vec![unit("room-x-rir-0"), unit("room-x-rir-1")],
            }],
        }
    }

    fn source_record() -> UtteranceRecord {
        UtteranceRecord {
            utt_id: "spk1-u1".into(),
            speaker_id: "spk1".into(),
            path: "unused.wav".into(),
            sample_rate: 8000,
            speech_seconds: None,
            augmentation_tag: None,
            source_utt_id: None,
        }
    }

    #[test]
    fn reverb_mode_with_unit_rir_is_identity() {
        let audio = tone_buf(8000, 8000, 200.0);
        let pool = noise_pool(8000);
        let bank = identity_bank(8000);
        let recipe = AugmentationRecipe {
            proportions: vec![(AugMode::Reverb, 1.0)],
            rir_policy: RirPolicy::GeneratedPaired,
            ..AugmentationRecipe::fixdata2()
        };
        let res = AugmentResources { noise_pool: &pool, rir_bank: Some(&bank) };
        let out = augment_utterance(&source_record(), &audio, "spk1-u1-aug0", &recipe, &res, 17)
            .unwrap();
        assert_eq!(out.record.augmentation_tag, Some(AugmentationTag::Reverb));
        assert_eq!(out.record.source_utt_id.as_deref(), Some("spk1-u1"));
        assert_eq!(out.audio.len(), audio.len());
        for (y, x) in out.audio.samples.iter().zip(&audio.samples) {
            assert!((y - x).abs() < 1e-12);
        }
        assert!(out.noise_id.is_none());
    }

    #[test]
    fn paired_mode_uses_two_distinct_rirs_of_one_room() {
        let audio = tone_buf(8000, 8000, 250.0);
        let pool = noise_pool(8000);
        let bank = identity_bank(8000);
        let recipe = AugmentationRecipe {
            proportions: vec![(AugMode::ReverbNoise, 1.0)],
            rir_policy: RirPolicy::GeneratedPaired,
            ..AugmentationRecipe::fixdata2()
        };
        let res = AugmentResources { noise_pool: &pool, rir_bank: Some(&bank) };
        let out = augment_utterance(&source_record(), &audio, "a0", &recipe, &res, 18).unwrap();
        assert_eq!(out.room_id.as_deref(), Some("room-x"));
        let s = out.speech_rir_id.unwrap();
        let n = out.noise_rir_id.unwrap();
        assert_ne!(s, n);
        assert!(s.starts_with("room-x"));
        assert!(n.starts_with("room-x"));
        assert!(out.snr_db.is_some());
        assert_eq!(out.record.augmentation_tag, Some(AugmentationTag::ReverbNoise));
    }

    #[test]
    fn same_seed_gives_identical_audio() {
        let audio = tone_buf(8000, 8000, 300.0);
        let pool = noise_pool(8000);
        let bank = identity_bank(8000);
        let recipe = AugmentationRecipe::fixdata2();
        let res = AugmentResources { noise_pool: &pool, rir_bank: Some(&bank) };
        let a = augment_utterance(&source_record(), &audio, "a0", &recipe, &res, 99).unwrap();
        let b = augment_utterance(&source_record(), &audio, "a0", &recipe, &res, 99).unwrap();
        assert_eq!(a.audio.samples, b.audio.samples);
        assert_eq!(a.snr_db, b.snr_db);
        let c = augment_utterance(&source_record(), &audio, "a0", &recipe, &res, 100).unwrap();
        let identical = a.audio.samples == c.audio.samples && a.record.augmentation_tag == c.record.augmentation_tag;
        assert!(!identical, "different seeds produced identical augmentations");
    }

    #[test]
    fn noise_modes_hit_their_snr_ranges() {
        let audio = tone_buf(16_000, 8000, 180.0);
        let pool = noise_pool(8000);
        let recipe = AugmentationRecipe {
            proportions: vec![(AugMode::Babble, 1.0)],
            ..AugmentationRecipe::fixdata1()
        };
        let res = AugmentResources { noise_pool: &pool, rir_bank: None };
        for seed in 0..20 {
            let out =
                augment_utterance(&source_record(), &audio, "a", &recipe, &res, seed).unwrap();
            let snr = out.snr_db.unwrap();
            assert!((13.0..=20.0).contains(&snr), "snr {snr}");
            assert_eq!(out.noise_id.as_deref(), Some("bab-0"));
        }
    }

    #[test]
    fn recipe_validation_rejects_bad_proportions() {
        let mut recipe = AugmentationRecipe::fixdata1();
        recipe.proportions = vec![(AugMode::Reverb, 0.5), (AugMode::Noise, 0.4)];
        assert!(recipe.validate().is_err());
        recipe.proportions = vec![(AugMode::Reverb, 1.5), (AugMode::Noise, -0.5)];
        assert!(recipe.validate().is_err());
        assert!(AugmentationRecipe::preset("fixdata2").unwrap().validate().is_ok());
        assert!(AugmentationRecipe::preset("nope").is_none());
    }

    #[test]
    fn rir_bank_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.svri");
        let recipe = AugmentationRecipe {
            n_rooms: 2,
            rirs_per_room: 2,
            rir_max_order: 4,
            rir_length_s: 0.15,
            ..AugmentationRecipe::fixdata2()
        };
        let bank = build_rir_bank(5, &recipe, 8000).unwrap();
        assert_eq!(bank.rooms.len(), 2);
        assert_eq!(bank.n_rirs(), 4);
        bank.save(&path).unwrap();
        let back = RirBank::load(&path).unwrap();
        assert_eq!(back.rooms.len(), 2);
        for (ra, rb) in bank.rooms.iter().zip(&back.rooms) {
            assert_eq!(ra.room_id, rb.room_id);
            for (ea, eb) in ra.rirs.iter().zip(&rb.rirs) {
                assert_eq!(ea.rir_id, eb.rir_id);
                assert_eq!(ea.rir.taps.len(), eb.rir.taps.len());
                for (x, y) in ea.rir.taps.iter().zip(&eb.rir.taps) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
    }

    #[test]
    fn manifest_builder_filters_and_caps() {
        let mut records = vec![source_record()];
        records[0].utt_id = "spk1-long".into();
        let mut short = source_record();
        short.utt_id = "spk1-short".into();
        records.push(short);
        for i in 0..20 {
            let mut aug = source_record();
            aug.utt_id = format!("spk1-long-aug{i:02}");
            aug.source_utt_id = Some("spk1-long".into());
            aug.augmentation_tag = Some(AugmentationTag::Noise);
            records.push(aug);
        }
        let source = Manifest::new(records).unwrap();
        let mut secs: HashMap<String, f64> = HashMap::new();
        for rec in source.iter() {
            secs.insert(rec.utt_id.clone(), 3.5);
        }
        secs.insert("spk1-short".into(), 3.4);
        let recipe = AugmentationRecipe::fixdata1();

        let out = build_training_manifest(&source, &recipe, &secs, 7).unwrap();
        assert!(out.get("spk1-long").is_some(), "boundary 3.5 s retained");
        assert!(out.get("spk1-short").is_none(), "3.4 s excluded");
        let n_aug = out
            .iter()
            .filter(|r| r.source_utt_id.as_deref() == Some("spk1-long"))
            .count();
        assert_eq!(n_aug, 8);
        let again = build_training_manifest(&source, &recipe, &secs, 7).unwrap();
        let ids: Vec<_> = out.iter().map(|r| r.utt_id.clone()).collect();
        let ids2: Vec<_> = again.iter().map(|r| r.utt_id.clone()).collect();
        assert_eq!(ids, ids2, "cap selection must be deterministic");

        let missing: HashMap<String, f64> = HashMap::new();
        assert!(build_training_manifest(&source, &recipe, &missing, 7).is_err());

        let all_short: HashMap<String, f64> =
            source.iter().map(|r| (r.utt_id.clone(), 1.0)).collect();
        assert!(build_training_manifest(&source, &recipe, &all_short, 7).is_err());
    }
}
