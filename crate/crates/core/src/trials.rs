//! Trial lists, keys and score files: whitespace-separated text formats.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trial {
    pub model_id: String,
    pub test_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &trials {
            if !seen.insert((t.model_id.clone(), t.test_id.clone())) {
                return Err(Error::DuplicateTrial(t.model_id.clone(), t.test_id.clone()));
            }
        }
        Ok(TrialList { trials })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

/// Per-trial labels, aligned with a `TrialList`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialKey {
    pub labels: Vec<TrialLabel>,
}

impl TrialKey {
    pub fn target_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l == TrialLabel::Target).collect()
    }
}

/// Which pipeline stage produced a score set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Raw,
    Snorm,
    Fused,
    Llr,
}

/// Scores aligned 1:1 with a trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub list: TrialList,
    pub scores: Vec<f64>,
    pub stage: StageTag,
}

impl ScoreSet {
    pub fn new(list: TrialList, scores: Vec<f64>, stage: StageTag) -> Result<Self> {
        if list.len() != scores.len() {
            return Err(Error::Shape(format!(
                "score count {} does not match trial count {}",
                scores.len(),
                list.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score {s}")));
        }
        Ok(ScoreSet {
            list,
            scores,
            stage,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Same trial pairs in the same order.
    pub fn same_trials(&self, other: &ScoreSet) -> bool {
        self.list == other.list
    }
}

fn lines_of(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Trial list file: `model_id test_id` per line.
pub fn load_trial_list(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    let mut trials = Vec::new();
    for (lineno, line) in lines_of(path)? {
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(m), Some(t), None) => trials.push(Trial {
                model_id: m.to_string(),
                test_id: t.to_string(),
            }),
            _ => {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: lineno,
                    detail: "expected `model_id test_id`".into(),
                })
            }
        }
    }
    TrialList::new(trials)
}

pub fn save_trial_list(path: impl AsRef<Path>, list: &TrialList) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for t in &list.trials {
        out.push_str(&format!("{} {}\n", t.model_id, t.test_id));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Key file: `model_id test_id tgt|imp` per line; must cover the list exactly.
pub fn load_trial_key(path: impl AsRef<Path>, list: &TrialList) -> Result<TrialKey> {
    let path = path.as_ref();
    let mut map = std::collections::HashMap::new();
    for (lineno, line) in lines_of(path)? {
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next(), it.next()) {
            (Some(m), Some(t), Some(lab), None) => {
                let label = match lab {
                    "tgt" => TrialLabel::Target,
                    "imp" => TrialLabel::Nontarget,
                    other => {
                        return Err(Error::Manifest {
                            path: path.to_path_buf(),
                            line: lineno,
                            detail: format!("unknown label {other:?}, expected tgt|imp"),
                        })
                    }
                };
                map.insert((m.to_string(), t.to_string()), label);
            }
            _ => {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: lineno,
                    detail: "expected `model_id test_id tgt|imp`".into(),
                })
            }
        }
    }
    if map.len() != list.len() {
        return Err(Error::Shape(format!(
            "key covers {} trials, list has {}",
            map.len(),
            list.len()
        )));
    }
    let mut labels = Vec::with_capacity(list.len());
    for t in &list.trials {
        let label = map
            .get(&(t.model_id.clone(), t.test_id.clone()))
            .ok_or_else(|| {
                Error::Shape(format!(
                    "key missing trial ({}, {})",
                    t.model_id, t.test_id
                ))
            })?;
        labels.push(*label);
    }
    Ok(TrialKey { labels })
}

pub fn save_trial_key(path: impl AsRef<Path>, list: &TrialList, key: &TrialKey) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (t, l) in list.trials.iter().zip(&key.labels) {
        let lab = match l {
            TrialLabel::Target => "tgt",
            TrialLabel::Nontarget => "imp",
        };
        out.push_str(&format!("{} {} {}\n", t.model_id, t.test_id, lab));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Score file: `model_id test_id score` with six decimal places.
pub fn save_scores(path: impl AsRef<Path>, set: &ScoreSet) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (t, s) in set.list.trials.iter().zip(&set.scores) {
        out.push_str(&format!("{} {} {:.6}\n", t.model_id, t.test_id, s));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: impl AsRef<Path>, stage: StageTag) -> Result<ScoreSet> {
    let path = path.as_ref();
    let mut trials = Vec::new();
    let mut scores = Vec::new();
    for (lineno, line) in lines_of(path)? {
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next(), it.next()) {
            (Some(m), Some(t), Some(s), None) => {
                let v: f64 = s.parse().map_err(|_| Error::Manifest {
                    path: path.to_path_buf(),
                    line: lineno,
                    detail: format!("bad score {s:?}"),
                })?;
                trials.push(Trial {
                    model_id: m.to_string(),
                    test_id: t.to_string(),
                });
                scores.push(v);
            }
            _ => {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: lineno,
                    detail: "expected `model_id test_id score`".into(),
                })
            }
        }
    }
    ScoreSet::new(TrialList::new(trials)?, scores, stage)
}
