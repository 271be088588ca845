//! On-disk layout of an experiment workspace.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use svkit_core::demo::DemoLayout;

/// Root directory holding every artifact a pipeline run produces.
///
/// ```text
/// corpus/      generated audio, manifests, trial lists and keys
/// rirs/        simulated impulse-response bank
/// augmented/   augmented training audio plus derived manifests
/// features/    one feature file per utterance
/// models/      extractor checkpoints, backend transforms, calibration
/// embeddings/  per-subsystem, per-split embedding sets
/// scores/      trial score files for every stage
/// reports/     SAD durations, metrics, DET curve
/// provenance/  per-stage input/output hashes for caching
/// ```
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl AsRef<Path>) -> Self {
        Workspace { root: root.as_ref().to_path_buf() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn corpus(&self) -> DemoLayout {
        DemoLayout::under(self.corpus_dir())
    }

    pub fn rir_bank(&self) -> PathBuf {
        self.root.join("rirs").join("bank.svri")
    }

    pub fn augmented_dir(&self) -> PathBuf {
        self.root.join("augmented")
    }

    /// Source plus augmented copies, before the duration filter.
    pub fn aug_manifest(&self) -> PathBuf {
        self.augmented_dir().join("train_aug.manifest")
    }

    /// Per-copy room, noise and SNR assignments.
    pub fn aug_log(&self) -> PathBuf {
        self.augmented_dir().join("aug_log.jsonl")
    }

    /// Final training manifest after the speech-duration floor and cap.
    pub fn train_manifest(&self) -> PathBuf {
        self.augmented_dir().join("train_final.manifest")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn feature_file(&self, utt_id: &str) -> PathBuf {
        self.features_dir().join(format!("{utt_id}.svfm"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn extractor(&self, system: &str) -> PathBuf {
        self.models_dir().join(format!("{system}.svnn"))
    }

    pub fn train_log(&self, system: &str) -> PathBuf {
        self.models_dir().join(format!("{system}.train_log.json"))
    }

    pub fn csml_model(&self, system: &str) -> PathBuf {
        self.models_dir().join(format!("{system}.csml.svcb"))
    }

    pub fn strategy_file(&self) -> PathBuf {
        self.models_dir().join("strategy.json")
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.root.join("embeddings")
    }

    pub fn embeddings(&self, system: &str, split: &str) -> PathBuf {
        self.embeddings_dir().join(format!("{system}.{split}.sve"))
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }

    /// `stage` is "raw" or "snorm"; `split` is "dev" or "eval".
    pub fn scores(&self, system: &str, split: &str, stage: &str) -> PathBuf {
        self.scores_dir().join(format!("{system}.{split}.{stage}.scores"))
    }

    pub fn fused_scores(&self, split: &str) -> PathBuf {
        self.scores_dir().join(format!("fused.{split}.snorm.scores"))
    }

    pub fn llr_scores(&self) -> PathBuf {
        self.scores_dir().join("eval.llr.scores")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn sad_report(&self) -> PathBuf {
        self.reports_dir().join("sad.json")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.reports_dir().join("eval.json")
    }

    pub fn full_report(&self) -> PathBuf {
        self.reports_dir().join("report.json")
    }

    pub fn det_curve(&self) -> PathBuf {
        self.reports_dir().join("det.csv")
    }

    pub fn provenance_dir(&self) -> PathBuf {
        self.root.join("provenance")
    }

    pub fn provenance(&self, stage: &str) -> PathBuf {
        self.provenance_dir().join(format!("{stage}.json"))
    }
}

/// Create the parent directory of `path` if needed.
pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating directory {}", dir.display()))?;
    }
    Ok(())
}

/// Every regular file under `dir`, sorted, as absolute paths. Missing
/// directories yield an empty list.
pub fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in
            std::fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))?
        {
            let path = entry.with_context(|| format!("listing {}", d.display()))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}
