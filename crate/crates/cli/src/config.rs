//! Experiment configuration: one JSON document driving every stage.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use svkit_core::acoustics::AugmentationRecipe;
use svkit_core::backend::CsmlTrainConfig;
use svkit_core::demo::DemoSpec;
use svkit_core::dsp::mfcc::MfccConfig;
use svkit_core::dsp::sad::SadConfig;
use svkit_core::dsp::wpe::WpeConfig;
use svkit_core::metrics::{DcfParams, Strategy};
use svkit_core::nnet::{ArchSpec, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_seed() -> u64 {
    42
}
fn default_cmn_window_s() -> f64 {
    3.0
}
fn default_true() -> bool {
    true
}
fn default_recipe_preset() -> String {
    "fixdata2".into()
}
fn default_min_speech_override() -> Option<f64> {
    // The bundled demo utterances carry 1-3 s of speech; the preset's
    // corpus-scale floor would reject all of them.
    Some(1.0)
}
fn default_cohort_size() -> usize {
    200
}
fn default_top_k() -> usize {
    200
}
fn default_calibration_prior() -> f64 {
    0.05
}
fn default_strategy() -> Strategy {
    Strategy::Fixed1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontendConfig {
    #[serde(default = "MfccConfig::for_8khz")]
    pub mfcc: MfccConfig,
    #[serde(default)]
    pub sad: SadConfig,
    /// Sliding cepstral-mean window in seconds.
    #[serde(default = "default_cmn_window_s")]
    pub cmn_window_s: f64,
    /// Apply mean normalization after dropping non-speech frames (the
    /// alternative normalizes first and selects afterwards).
    #[serde(default = "default_true")]
    pub cmn_after_selection: bool,
    /// Dereverberate waveforms before feature extraction when set.
    #[serde(default)]
    pub wpe: Option<WpeConfig>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            mfcc: MfccConfig::for_8khz(),
            sad: SadConfig::default(),
            cmn_window_s: default_cmn_window_s(),
            cmn_after_selection: true,
            wpe: None,
        }
    }
}

/// Recipe preset name plus the knobs worth overriding per experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentationConfig {
    #[serde(default = "default_recipe_preset")]
    pub preset: String,
    #[serde(default)]
    pub n_rooms: Option<usize>,
    #[serde(default)]
    pub copies_per_utterance: Option<usize>,
    #[serde(default = "default_min_speech_override")]
    pub min_speech_seconds: Option<f64>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            preset: default_recipe_preset(),
            n_rooms: None,
            copies_per_utterance: None,
            min_speech_seconds: default_min_speech_override(),
        }
    }
}

impl AugmentationConfig {
    pub fn resolve(&self) -> Result<AugmentationRecipe> {
        let mut recipe = AugmentationRecipe::preset(&self.preset)
            .with_context(|| format!("unknown augmentation preset {:?}", self.preset))?;
        if let Some(n) = self.n_rooms {
            recipe.n_rooms = n;
        }
        if let Some(c) = self.copies_per_utterance {
            recipe.copies_per_utterance = c;
        }
        if let Some(s) = self.min_speech_seconds {
            recipe.min_speech_seconds = s;
        }
        recipe.validate()?;
        Ok(recipe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringBackend {
    Cosine,
    Csml,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default)]
    pub csml: CsmlTrainConfig,
    #[serde(default = "default_scoring")]
    pub scoring: ScoringBackend,
    /// Cohort utterances drawn from the clean training pool.
    #[serde(default = "default_cohort_size")]
    pub cohort_size: usize,
    /// Best-scoring cohort entries used per side; clipped to the cohort.
    #[serde(default = "default_top_k")]
    pub snorm_top_k: usize,
}

fn default_scoring() -> ScoringBackend {
    ScoringBackend::Csml
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            csml: CsmlTrainConfig::default(),
            scoring: ScoringBackend::Csml,
            cohort_size: default_cohort_size(),
            snorm_top_k: default_top_k(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsystemConfig {
    pub name: String,
    /// Architecture preset name, e.g. "Xvec-TDNN" or "Mini-Cvec-ResTDNN".
    pub arch: String,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_subsystems() -> Vec<SubsystemConfig> {
    use svkit_core::nnet::Objective;
    let mut cvec_train = TrainConfig::default();
    cvec_train.objective = Objective::Asoftmax;
    vec![
        SubsystemConfig {
            name: "xvec-mini".into(),
            arch: "Mini-Xvec-TDNN".into(),
            train: TrainConfig::default(),
        },
        SubsystemConfig {
            name: "cvec-mini".into(),
            arch: "Mini-Cvec-ResTDNN".into(),
            train: cvec_train,
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub demo: DemoSpec,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default = "default_subsystems")]
    pub subsystems: Vec<SubsystemConfig>,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub metrics: DcfParams,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    /// Effective target prior for calibration training.
    #[serde(default = "default_calibration_prior")]
    pub calibration_prior: f64,
    /// Seed for splitting dev trials in two; derived from `seed` when absent.
    #[serde(default)]
    pub dev_split_seed: Option<u64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config deserializes via defaults")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("unsupported config version {} (expected {CONFIG_VERSION})", self.version);
        }
        self.demo.validate()?;
        self.frontend.mfcc.validate()?;
        if self.frontend.mfcc.sample_rate != self.demo.sample_rate {
            bail!(
                "front end expects {} Hz but the corpus is generated at {} Hz",
                self.frontend.mfcc.sample_rate,
                self.demo.sample_rate
            );
        }
        if self.frontend.cmn_window_s <= 0.0 {
            bail!("cmn_window_s must be positive");
        }
        self.augmentation.resolve()?;
        if self.subsystems.is_empty() {
            bail!("at least one subsystem is required");
        }
        let mut names = std::collections::HashSet::new();
        for sub in &self.subsystems {
            if sub.name.is_empty() || !names.insert(&sub.name) {
                bail!("subsystem names must be nonempty and unique");
            }
            if ArchSpec::preset(&sub.arch, self.frontend.mfcc.num_ceps, 4).is_none() {
                bail!("unknown architecture preset {:?}", sub.arch);
            }
            sub.train.validate()?;
        }
        self.backend.csml.validate()?;
        if self.backend.cohort_size < 2 || self.backend.snorm_top_k < 2 {
            bail!("cohort_size and snorm_top_k must be at least 2");
        }
        self.metrics.validate()?;
        if !(self.calibration_prior > 0.0 && self.calibration_prior < 1.0) {
            bail!("calibration_prior must be in (0, 1)");
        }
        Ok(())
    }

    /// Seed handed to the trial splitter (which labels it internally).
    pub fn dev_split_seed(&self) -> u64 {
        self.dev_split_seed.unwrap_or(self.seed)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}
