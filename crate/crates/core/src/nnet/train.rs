//! Mini-batch SGD training of the embedding extractor: chunk cropping,
//! momentum updates, margin annealing, and the semi-orthogonal constraint
//! on factorized layers.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::ArchSpec;
use super::loss::{head_loss, inference_scores, MarginState, Objective};
use super::model::{LayerParams, Model};
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng_from_seed};

fn default_margin() -> u32 {
    2
}
fn default_lambda_start() -> f64 {
    1000.0
}
fn default_lambda_min() -> f64 {
    5.0
}
fn default_lr() -> f64 {
    0.02
}
fn default_final_lr() -> f64 {
    0.002
}
fn default_momentum() -> f64 {
    0.5
}
fn default_batch() -> usize {
    16
}
fn default_chunk_min() -> usize {
    200
}
fn default_chunk_max() -> usize {
    400
}
fn default_epochs() -> usize {
    6
}
fn default_semi_orthogonal() -> Option<usize> {
    Some(4)
}
fn default_max_grad_norm() -> Option<f64> {
    Some(5.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    #[serde(default = "default_margin")]
    pub asoftmax_margin: u32,
    #[serde(default = "default_lambda_start")]
    pub asoftmax_lambda_start: f64,
    #[serde(default = "default_lambda_min")]
    pub asoftmax_lambda_min: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_final_lr")]
    pub final_learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_chunk_min")]
    pub chunk_min_frames: usize,
    #[serde(default = "default_chunk_max")]
    pub chunk_max_frames: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Re-project factorized first factors every this many steps.
    #[serde(default = "default_semi_orthogonal")]
    pub semi_orthogonal_interval: Option<usize>,
    /// Scale a batch gradient down to this L2 norm when it exceeds it.
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::SoftmaxCe,
            asoftmax_margin: default_margin(),
            asoftmax_lambda_start: default_lambda_start(),
            asoftmax_lambda_min: default_lambda_min(),
            learning_rate: default_lr(),
            final_learning_rate: default_final_lr(),
            momentum: default_momentum(),
            batch_size: default_batch(),
            chunk_min_frames: default_chunk_min(),
            chunk_max_frames: default_chunk_max(),
            epochs: default_epochs(),
            semi_orthogonal_interval: default_semi_orthogonal(),
            max_grad_norm: default_max_grad_norm(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.asoftmax_margin < 1 {
            return Err(Error::Config("margin must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || self.final_learning_rate <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be >= 1".into()));
        }
        if self.chunk_min_frames == 0 || self.chunk_min_frames > self.chunk_max_frames {
            return Err(Error::Config("bad chunk length range".into()));
        }
        if self.semi_orthogonal_interval == Some(0) {
            return Err(Error::Config("semi-orthogonal interval must be >= 1".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(frac)
    }

    fn lambda_at(&self, step: usize) -> f64 {
        (self.asoftmax_lambda_start / (1.0 + 0.1 * step as f64)).max(self.asoftmax_lambda_min)
    }
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub speaker: usize,
    pub feats: Array2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
    pub steps: usize,
}

/// One Newton-Schulz step toward orthonormal rows, after scaling the rows
/// to unit mean-square singular value.
pub fn semi_orthogonal_step(w: &mut Array2<f64>) {
    let n = w.nrows() as f64;
    let p = w.dot(&w.t());
    let trace: f64 = p.diag().sum();
    if trace <= 0.0 {
        return;
    }
    let scale = (trace / n).sqrt();
    w.mapv_inplace(|v| v / scale);
    let p = w.dot(&w.t());
    let correction = p.dot(w);
    ndarray::Zip::from(&mut *w).and(&correction).for_each(|wv, &c| {
        *wv = 1.5 * *wv - 0.5 * c;
    });
}

/// Frobenius distance of the row Gram matrix from identity.
pub fn orthogonality_error(w: &Array2<f64>) -> f64 {
    let p = w.dot(&w.t());
    let mut acc = 0.0;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            acc += (p[[i, j]] - target).powi(2);
        }
    }
    acc.sqrt()
}

fn apply_semi_orthogonal(model: &mut Model) {
    for layer in &mut model.layers {
        if let LayerParams::Ftdnn { w1, .. } = layer {
            semi_orthogonal_step(w1);
        }
    }
}

fn grad_norm(grads: &[LayerParams]) -> f64 {
    let mut acc = 0.0;
    for g in grads {
        for s in g.tensor_slices() {
            for v in s {
                acc += v * v;
            }
        }
    }
    acc.sqrt()
}

fn check_finite(model: &Model, step: usize) -> Result<()> {
    for layer in &model.layers {
        for s in layer.tensor_slices() {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "training diverged: non-finite parameter after step {step}"
                )));
            }
        }
    }
    Ok(())
}

/// Argmax class under the model's head scores.
pub fn classify(model: &Model, feats: &Array2<f64>) -> Result<usize> {
    let pass = model.forward_body(&feats.view())?;
    let scores = inference_scores(
        model.layers.last().expect("head"),
        pass.body_output().row(0),
    )?;
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Trains an extractor from scratch. Deterministic under the seed: example
/// order, crops, and gradient accumulation are all sequenced by one RNG.
pub fn train_extractor(
    arch: &ArchSpec,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    arch.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training example list".into()));
    }
    let mut speakers_seen = std::collections::HashSet::new();
    let min_frames = arch.min_input_frames();
    for (i, ex) in examples.iter().enumerate() {
        if ex.speaker >= arch.num_speakers {
            return Err(Error::Config(format!(
                "example {i}: speaker {} out of range {}",
                ex.speaker, arch.num_speakers
            )));
        }
        if ex.feats.nrows() < min_frames {
            return Err(Error::Shape(format!(
                "example {i}: {} frames is shorter than the receptive field {min_frames}",
                ex.feats.nrows()
            )));
        }
        speakers_seen.insert(ex.speaker);
    }
    if speakers_seen.len() < 2 {
        return Err(Error::Config("training needs at least 2 speakers".into()));
    }

    let expected_head = matches!(cfg.objective, Objective::SoftmaxCe);
    let mut arch = arch.clone();
    {
        let head = arch.layers.last_mut().expect("validated");
        use super::arch::LayerKind;
        head.kind = if expected_head {
            LayerKind::SoftmaxHead
        } else {
            LayerKind::AsoftmaxHead
        };
    }

    let mut model = Model::init(&arch, derive_seed(seed, "init"))?;
    let mut velocity = model.zero_grads();
    let mut rng = rng_from_seed(derive_seed(seed, "order"));
    let n_layers = model.layers.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_chunks = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            let margin = MarginState::new(cfg.asoftmax_margin, cfg.lambda_at(step));
            for &idx in batch {
                let ex = &examples[idx];
                let t = ex.feats.nrows();
                let hi = cfg.chunk_max_frames.min(t);
                let lo = cfg.chunk_min_frames.min(hi).max(min_frames).min(hi);
                let len = if lo >= hi { hi } else { rng.random_range(lo..=hi) };
                let start = if t > len { rng.random_range(0..=t - len) } else { 0 };
                let chunk = ex.feats.slice(ndarray::s![start..start + len, ..]);

                let pass = model.forward_body(&chunk)?;
                let (body, head) = grads.split_at_mut(n_layers - 1);
                let res = head_loss(
                    &model.layers[n_layers - 1],
                    &mut head[0],
                    pass.body_output(),
                    ex.speaker,
                    margin,
                )?;
                if !res.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training diverged: non-finite loss at step {step}"
                    )));
                }
                batch_loss += res.loss;
                let d_body_out = res.d_input.view().insert_axis(ndarray::Axis(0)).to_owned();
                model.backward_body(&chunk, &pass, d_body_out, body)?;
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for s in g.tensor_slices_mut() {
                    for v in s.iter_mut() {
                        *v *= inv;
                    }
                }
            }
            if let Some(max_norm) = cfg.max_grad_norm {
                let norm = grad_norm(&grads);
                if norm > max_norm {
                    let shrink = max_norm / norm;
                    for g in &mut grads {
                        for s in g.tensor_slices_mut() {
                            for v in s.iter_mut() {
                                *v *= shrink;
                            }
                        }
                    }
                }
            }
            for ((p, g), v) in model.layers.iter_mut().zip(&grads).zip(&mut velocity) {
                let mut ps = p.tensor_slices_mut();
                let gs = g.tensor_slices();
                let mut vs = v.tensor_slices_mut();
                for ((pt, gt), vt) in ps.iter_mut().zip(gs.iter()).zip(vs.iter_mut()) {
                    for k in 0..pt.len() {
                        vt[k] = cfg.momentum * vt[k] - lr * gt[k];
                        pt[k] += vt[k];
                    }
                }
            }
            step += 1;
            if let Some(interval) = cfg.semi_orthogonal_interval {
                if step % interval == 0 {
                    apply_semi_orthogonal(&mut model);
                }
            }
            check_finite(&model, step)?;
            epoch_loss += batch_loss;
            n_chunks += batch.len();
        }
        epoch_losses.push(epoch_loss / n_chunks as f64);
        log::info!(
            "epoch {epoch}: mean loss {:.4}, lr {lr:.5}",
            epoch_losses[epoch]
        );
    }

    let mut correct = 0usize;
    for ex in examples {
        if classify(&model, &ex.feats)? == ex.speaker {
            correct += 1;
        }
    }
    let log = TrainLog {
        epoch_losses,
        final_train_accuracy: correct as f64 / examples.len() as f64,
        steps: step,
    };
    Ok((model, log))
}
