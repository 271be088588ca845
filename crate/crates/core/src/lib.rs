//! Core algorithms for a small speaker-verification toolkit: audio and
//! manifest I/O, feature extraction, room-acoustics simulation, embedding
//! networks with hand-written gradients, scoring backends and metrics.

pub mod acoustics;
pub mod audio;
pub mod backend;
pub mod container;
pub mod dsp;
pub mod embeddings;
pub mod error;
pub mod demo;
pub mod manifest;
pub mod metrics;
pub mod nnet;
pub mod trials;
pub mod util;

pub use audio::AudioBuffer;
pub use embeddings::EmbeddingSet;
pub use error::{Error, Result};
pub use manifest::{AugmentationTag, Manifest, UtteranceRecord};
pub use trials::{ScoreSet, StageTag, Trial, TrialKey, TrialLabel, TrialList};
