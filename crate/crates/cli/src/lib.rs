//! Command-line pipeline around the core toolkit: a memoized stage graph
//! from synthetic corpus generation through calibrated evaluation, driven by
//! one JSON configuration.

pub mod config;
pub mod pipeline;
pub mod provenance;
pub mod stages;
pub mod workspace;

pub use config::ExperimentConfig;
pub use pipeline::{run_all, run_stage_by_name, STAGE_ORDER};
pub use provenance::StageStatus;
pub use stages::Pipeline;
pub use workspace::Workspace;
