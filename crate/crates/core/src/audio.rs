//! Mono audio buffers, PCM WAV i/o and band-limited resampling.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Mono waveform with amplitudes in nominal range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample_rate must be > 0".into()));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_u16(buf: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([buf[at], buf[at + 1]])
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

/// Read a PCM WAV file. Multi-channel audio is downmixed to mono by
/// averaging the channels; 16-bit samples are scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;

    let bad = |detail: &str| Error::WavFormat {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if raw.len() < 12 || &raw[0..4] != b"RIFF" || &raw[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= raw.len() {
        let id = &raw[pos..pos + 4];
        let size = read_u32(&raw, pos + 4) as usize;
        let body_end = (pos + 8 + size).min(raw.len());
        let body = &raw[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                fmt = Some((
                    read_u16(body, 0),
                    read_u16(body, 2),
                    read_u32(body, 4),
                    read_u16(body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = pos + 8 + size + (size & 1);
    }

    let (format, channels, sample_rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    if format != 1 {
        return Err(bad(&format!(
            "non-PCM encoding (wav format tag {format}, expected 1)"
        )));
    }
    if bits != 16 {
        return Err(bad(&format!("unsupported bit depth {bits}, expected 16")));
    }
    if channels == 0 {
        return Err(bad("zero channels"));
    }
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    let frame_bytes = 2 * channels as usize;
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(Error::EmptyAudio {
            path: path.to_path_buf(),
        });
    }

    let mut samples = Vec::with_capacity(n_frames);
    for fr in 0..n_frames {
        let mut acc = 0.0f64;
        for ch in 0..channels as usize {
            let at = fr * frame_bytes + 2 * ch;
            let v = i16::from_le_bytes([data[at], data[at + 1]]);
            acc += v as f64 / 32768.0;
        }
        samples.push(acc / channels as f64);
    }
    AudioBuffer::new(samples, sample_rate)
}

/// Write a mono 16-bit PCM WAV file. Samples are clamped to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let n = buf.samples.len();
    let data_bytes = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &x in &buf.samples {
        let v = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc interpolation kernel.
/// The anti-alias cutoff sits at min(input, output) Nyquist.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::Config("target_rate must be > 0".into()));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let ratio = target_rate as f64 / buf.sample_rate as f64;
    let n_in = buf.samples.len();
    let n_out = (n_in as f64 * ratio).round() as usize;
    // Cutoff as a fraction of the input sample rate; sharpened slightly below
    // the theoretical limit to keep the transition band inside Nyquist.
    let fc = 0.5 * ratio.min(1.0) * 0.95;
    // Half-width in input samples; widen when downsampling so the lowered
    // cutoff keeps enough zero crossings.
    let half_width = (32.0 / ratio.min(1.0)).ceil() as isize;

    let mut out = Vec::with_capacity(n_out);
    let step = buf.sample_rate as f64 / target_rate as f64;
    for m in 0..n_out {
        let center = m as f64 * step;
        let k0 = (center - half_width as f64).ceil() as isize;
        let k1 = (center + half_width as f64).floor() as isize;
        let mut acc = 0.0;
        for k in k0..=k1 {
            if k < 0 || k >= n_in as isize {
                continue;
            }
            let t = k as f64 - center;
            let u = t / half_width as f64;
            let w = 0.5 * (1.0 + (PI * u).cos());
            acc += buf.samples[k as usize] * 2.0 * fc * sinc(2.0 * fc * t) * w;
        }
        out.push(acc);
    }
    AudioBuffer::new(out, target_rate)
}
