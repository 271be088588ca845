//! Verification back-end: cosine and learned-transform scoring plus
//! adaptive score normalization.

pub mod csml;
pub mod snorm;

pub use csml::{
    cosine_score, csml_eval_loss, train_csml, CsmlModel, CsmlTrainConfig, LabeledEmbedding,
};
pub use snorm::{
    cohort_score_table, embedding_scorer, s_normalize, s_normalize_embeddings, SNORM_SIGMA_FLOOR,
};
