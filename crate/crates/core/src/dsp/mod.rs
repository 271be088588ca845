//! Feature extraction and signal conditioning: MFCC, mean/variance
//! normalization, energy SAD, STFT and WPE dereverberation.

pub mod fft;
pub mod mfcc;
pub mod norm;
pub mod sad;
pub mod stft;
pub mod wpe;

use std::path::Path;

use ndarray::Array2;

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SVFM";
pub const FEATURE_VERSION: u32 = 1;

/// Frames x dims matrix of per-frame feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub frame_shift_ms: f64,
    pub source_utt_id: String,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>, frame_shift_ms: f64, source_utt_id: &str) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite feature value {v} in {source_utt_id:?}"
            )));
        }
        Ok(FeatureMatrix {
            data,
            frame_shift_ms,
            source_utt_id: source_utt_id.to_string(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Per-frame speech/nonspeech mask paired with a FeatureMatrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SadMask {
    pub speech: Vec<bool>,
}

impl SadMask {
    pub fn n_speech(&self) -> usize {
        self.speech.iter().filter(|&&s| s).count()
    }

    pub fn len(&self) -> usize {
        self.speech.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speech.is_empty()
    }
}

/// Binary per-utterance feature file; values stored f32.
pub fn save_feature_file(
    path: impl AsRef<Path>,
    feats: &FeatureMatrix,
    mask: Option<&SadMask>,
) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != feats.n_frames() {
            return Err(Error::Shape(format!(
                "mask length {} does not match {} frames",
                m.len(),
                feats.n_frames()
            )));
        }
    }
    let mut w = ContainerWriter::new(FEATURE_MAGIC, FEATURE_VERSION);
    w.put_str(&feats.source_utt_id)?;
    w.put_f64(feats.frame_shift_ms);
    w.put_u32(feats.n_frames() as u32);
    w.put_u32(feats.dim() as u32);
    match mask {
        Some(m) => {
            w.put_u32(1);
            for &s in &m.speech {
                w.put_u32(u32::from(s));
            }
        }
        None => w.put_u32(0),
    }
    let flat: Vec<f32> = feats.data.iter().map(|&v| v as f32).collect();
    w.put_f32_slice(&flat);
    w.write_to(path)
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<(FeatureMatrix, Option<SadMask>)> {
    let path = path.as_ref();
    let mut r = ContainerReader::open(path, FEATURE_MAGIC, FEATURE_VERSION)?;
    let utt_id = r.get_str()?;
    let shift = r.get_f64()?;
    let frames = r.get_u32()? as usize;
    let dims = r.get_u32()? as usize;
    let has_mask = r.get_u32()?;
    let mask = match has_mask {
        0 => None,
        1 => {
            let mut speech = Vec::with_capacity(frames);
            for _ in 0..frames {
                speech.push(r.get_u32()? != 0);
            }
            Some(SadMask { speech })
        }
        other => {
            return Err(Error::container(path, format!("bad mask flag {other}")));
        }
    };
    let flat = r.get_f32_vec(frames * dims)?;
    r.finish()?;
    let data = Array2::from_shape_vec((frames, dims), flat.iter().map(|&v| f64::from(v)).collect())
        .map_err(|e| Error::container(path, e.to_string()))?;
    let feats = FeatureMatrix::new(data, shift, &utt_id)
        .map_err(|e| Error::container(path, e.to_string()))?;
    Ok((feats, mask))
}

/// Debug dump: one JSON array per frame. Not a stable format.
pub fn dump_features_jsonl(path: impl AsRef<Path>, feats: &FeatureMatrix) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let mut out = String::new();
    for row in feats.data.rows() {
        let vals: Vec<f64> = row.to_vec();
        out.push_str(&serde_json::to_string(&vals).expect("serializing a float array"));
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
