//! Detection metrics, score fusion, calibration, and submission strategies.

pub mod calibration;
pub mod detection;
pub mod fusion;
pub mod strategy;

pub use calibration::{calibrate, CalibrationModel, CALIBRATION_PARAM_CLIP};
pub use detection::{
    act_dcf, cllr, det_points, eer, metric_report, min_dcf, DcfParams, MetricReport,
};
pub use fusion::{fuse, FusionMode, FusionModel};
pub use strategy::{
    empirical_weights, run_fixed3, run_strategy, DevSplit, Strategy, StrategyOutput,
    SubsystemScores,
};
