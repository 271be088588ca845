//! Speaker-embedding networks: architecture descriptions, the forward and
//! backward passes, training objectives, SGD training, and checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
mod lstm;
pub mod model;
pub mod train;

pub use arch::{ArchSpec, LayerKind, LayerSpec, LstmDims};
pub use checkpoint::{load_model, save_model};
pub use gradcheck::{check_model_gradients, random_small_arch};
pub use loss::{
    head_loss, inference_scores, HeadResult, MarginState, Objective,
};
pub use model::{ForwardPass, LayerParams, Model, STATS_VARIANCE_FLOOR};
pub use train::{
    classify, orthogonality_error, semi_orthogonal_step, train_extractor, TrainConfig,
    TrainExample, TrainLog,
};
