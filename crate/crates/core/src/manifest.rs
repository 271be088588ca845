//! Dataset manifests: one JSON record per line.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How an utterance was distorted, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationTag {
    Clean,
    Reverb,
    Babble,
    Music,
    Noise,
    ReverbNoise,
}

impl AugmentationTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentationTag::Clean => "clean",
            AugmentationTag::Reverb => "reverb",
            AugmentationTag::Babble => "babble",
            AugmentationTag::Music => "music",
            AugmentationTag::Noise => "noise",
            AugmentationTag::ReverbNoise => "reverb_noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
    pub sample_rate: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speech_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augmentation_tag: Option<AugmentationTag>,
    /// For augmented copies: the utt_id of the clean original.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_utt_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.utt_id.clone()) {
                return Err(Error::DuplicateUttId(r.utt_id.clone()));
            }
        }
        Ok(Manifest { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, UtteranceRecord> {
        self.records.iter()
    }

    pub fn get(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.utt_id == utt_id)
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .records
            .iter()
            .map(|r| r.speaker_id.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        out.sort();
        out
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: idx + 1,
            detail: e.to_string(),
        })?;
        if !seen.insert(rec.utt_id.clone()) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: idx + 1,
                detail: format!("duplicate utt_id {:?}", rec.utt_id),
            });
        }
        records.push(rec);
    }
    Ok(Manifest { records })
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for rec in &manifest.records {
        out.push_str(&serde_json::to_string(rec).expect("manifest record serializes"));
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, spk: &str) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: id.into(),
            speaker_id: spk.into(),
            path: PathBuf::from(format!("/tmp/{id}.wav")),
            sample_rate: 16000,
            speech_seconds: Some(4.0),
            augmentation_tag: Some(AugmentationTag::Clean),
            source_utt_id: None,
        }
    }

    #[test]
    fn empty_file_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = Manifest::new(vec![rec("a", "s1"), rec("b", "s1"), rec("c", "s2")]).unwrap();
        save_manifest(&p, &m).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), m);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&rec("a", "s1")).unwrap();
        std::fs::write(&p, format!("{good}\n{{\"utt_id\": \"b\"}}\n")).unwrap();
        let err = load_manifest(&p).unwrap_err();
        match err {
            Error::Manifest { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_utt_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let a = serde_json::to_string(&rec("a", "s1")).unwrap();
        std::fs::write(&p, format!("{a}\n{a}\n")).unwrap();
        assert!(load_manifest(&p).is_err());
        assert!(Manifest::new(vec![rec("a", "s1"), rec("a", "s2")]).is_err());
    }
}
