//! Stage memoization: each stage records a hash of its configuration slice
//! and the content hashes of its input and output files. A stage is skipped
//! when nothing it depends on has changed and its outputs are intact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::workspace::{ensure_parent, Workspace};

pub const PROVENANCE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub version: u32,
    /// Hash of the stage-relevant configuration slice plus the seed.
    pub config_hash: String,
    /// Workspace-relative path -> content hash, for files read.
    pub inputs: BTreeMap<String, String>,
    /// Workspace-relative path -> content hash, for files written.
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hash_config(slice: &impl Serialize) -> Result<String> {
    let text = serde_json::to_string(slice).context("serializing config slice")?;
    Ok(hex(&Sha256::digest(text.as_bytes())))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn rel_key(ws: &Workspace, path: &Path) -> String {
    path.strip_prefix(&ws.root)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn hash_many(ws: &Workspace, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for p in paths {
        map.insert(rel_key(ws, p), hash_file(p)?);
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

fn load_record(path: &Path) -> Option<StageRecord> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// True when `record` matches the wanted config, every input file still
/// hashes the same, and every recorded output exists unchanged.
///
/// A missing or modified *output* under a matching config is reported as
/// corruption rather than silently rebuilt; `--force` rebuilds it.
fn is_current(
    ws: &Workspace,
    record: &StageRecord,
    config_hash: &str,
    inputs: &BTreeMap<String, String>,
) -> Result<bool> {
    if record.version != PROVENANCE_VERSION
        || record.config_hash != config_hash
        || record.inputs != *inputs
    {
        return Ok(false);
    }
    for (rel, want) in &record.outputs {
        let path = ws.root.join(rel);
        if !path.exists() {
            bail!(
                "stage {:?} output {} is missing; rerun with --force to rebuild it",
                record.stage,
                path.display()
            );
        }
        let got = hash_file(&path)?;
        if got != *want {
            bail!(
                "stage {:?} output {} was modified after it was written; \
                 rerun with --force to rebuild it",
                record.stage,
                path.display()
            );
        }
    }
    Ok(true)
}

/// Run `body` unless the recorded provenance shows nothing changed.
///
/// `inputs` are the files the stage reads; `body` returns the files it
/// wrote, which are hashed into the new record.
pub fn run_stage<F>(
    ws: &Workspace,
    stage: &str,
    config_slice: &impl Serialize,
    inputs: &[PathBuf],
    force: bool,
    body: F,
) -> Result<StageStatus>
where
    F: FnOnce() -> Result<Vec<PathBuf>>,
{
    for p in inputs {
        if !p.exists() {
            bail!(
                "stage {stage:?} needs {} which does not exist; run the earlier stages first",
                p.display()
            );
        }
    }
    let config_hash = hash_config(config_slice)?;
    let input_hashes = hash_many(ws, inputs)?;
    let record_path = ws.provenance(stage);
    if !force {
        if let Some(record) = load_record(&record_path) {
            if is_current(ws, &record, &config_hash, &input_hashes)? {
                log::info!("stage {stage}: cached");
                return Ok(StageStatus::Cached);
            }
        }
    }

    log::info!("stage {stage}: running");
    let start = Instant::now();
    let outputs = body()?;
    let wall_ms = start.elapsed().as_millis() as u64;

    let record = StageRecord {
        stage: stage.to_string(),
        version: PROVENANCE_VERSION,
        config_hash,
        inputs: input_hashes,
        outputs: hash_many(ws, &outputs)?,
        wall_ms,
    };
    ensure_parent(&record_path)?;
    let text = serde_json::to_string_pretty(&record).context("serializing stage record")?;
    std::fs::write(&record_path, text)
        .with_context(|| format!("writing {}", record_path.display()))?;
    log::info!("stage {stage}: done in {wall_ms} ms");
    Ok(StageStatus::Ran)
}
