//! Finite-difference verification of the analytic gradients, over random
//! small architectures covering every layer kind.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::arch::{ArchSpec, LayerKind, LayerSpec};
use super::loss::{head_loss, MarginState};
use super::model::{LayerParams, Model};
use crate::error::Result;
use crate::util::{derive_seed, rng_from_seed};

/// Builds a small random architecture. The layer-kind mix rotates with the
/// seed so a sweep over seeds exercises every kind, both heads included.
pub fn random_small_arch(seed: u64) -> ArchSpec {
    let mut rng = rng_from_seed(derive_seed(seed, "arch"));
    let input_dim = rng.random_range(3..7);
    let num_speakers = rng.random_range(3..6);
    let mut layers: Vec<LayerSpec> = Vec::new();

    let kind_cycle = seed % 5;
    match kind_cycle {
        0 => {
            layers.push(LayerSpec::tdnn(&[-2, -1, 0, 1, 2], rng.random_range(4..8)));
            layers.push(LayerSpec::tdnn(&[-1, 0, 1], rng.random_range(4..8)));
        }
        1 => {
            layers.push(LayerSpec::tdnn(&[-1, 0, 1], rng.random_range(4..8)));
            layers.push(LayerSpec::ftdnn(&[-2, 0], &[2, 0], rng.random_range(3..6), rng.random_range(4..8)));
        }
        2 => {
            layers.push(LayerSpec::tdnn(&[-1, 0, 1], rng.random_range(4..8)));
            layers.push(LayerSpec::ftdnn(&[-1, 0], &[1, 0], 3, rng.random_range(4..8)));
            layers.push(LayerSpec::ftdnn_skip(&[0], &[0], 3, rng.random_range(4..8), 0));
        }
        3 => {
            layers.push(LayerSpec::tdnn(&[-1, 0, 1], rng.random_range(4..8)));
            let rp = rng.random_range(2..4);
            let np = rng.random_range(2..4);
            layers.push(LayerSpec::lstm_p(rng.random_range(3..6), -(rng.random_range(1..4)), rp, np));
        }
        _ => {
            let dim = rng.random_range(4..7);
            layers.push(LayerSpec::tdnn(&[-1, 0, 1], dim));
            layers.push(LayerSpec::resblock(dim, rng.random_range(1..3)));
            layers.push(LayerSpec::resblock(dim, rng.random_range(1..3)));
        }
    }
    layers.push(LayerSpec::tdnn(&[0], rng.random_range(5..9)));
    layers.push(LayerSpec::stats_pooling());
    let emb = layers.len();
    layers.push(LayerSpec::dense(rng.random_range(4..8)));
    layers.push(LayerSpec::dense(rng.random_range(4..8)));
    let head = if seed % 2 == 0 {
        LayerKind::SoftmaxHead
    } else {
        LayerKind::AsoftmaxHead
    };
    layers.push(LayerSpec::head(head, num_speakers));
    ArchSpec {
        name: format!("gradcheck-{seed}"),
        input_dim,
        num_speakers,
        layers,
        embedding_layer_index: emb,
    }
}

fn training_loss(
    model: &Model,
    feats: &Array2<f64>,
    label: usize,
    margin: MarginState,
) -> Result<f64> {
    let pass = model.forward_body(&feats.view())?;
    let mut scratch = model.layers.last().expect("head").clone();
    for s in scratch.tensor_slices_mut() {
        s.fill(0.0);
    }
    let head = model.layers.last().expect("head");
    let res = head_loss(head, &mut scratch, pass.body_output(), label, margin)?;
    Ok(res.loss)
}

/// Compares analytic gradients against central finite differences at up to
/// `coords_per_tensor` coordinates of every tensor plus the input features.
/// Returns the worst relative error.
/// Pushes every bias away from zero. Zero-initialized biases leave the
/// pre-activation of a fully dead frame exactly on the ReLU kink, where
/// the one-sided analytic derivative and a centered difference disagree
/// no matter the step size. Gradients are checked at a generic point.
fn nudge_biases(model: &mut Model, rng: &mut impl Rng) {
    for layer in &mut model.layers {
        let biases: Vec<&mut Array1<f64>> = match layer {
            LayerParams::Tdnn { b, .. }
            | LayerParams::Dense { b, .. }
            | LayerParams::SoftmaxHead { b, .. } => vec![b],
            LayerParams::Ftdnn { b2, .. } => vec![b2],
            LayerParams::LstmP { bg, .. } => vec![bg],
            LayerParams::ResBlock { b1, b2, .. } => vec![b1, b2],
            _ => Vec::new(),
        };
        for b in biases {
            for v in b.iter_mut() {
                let mag = rng.random_range(0.05..0.15);
                *v += if rng.random_range(0..2u8) == 0 { mag } else { -mag };
            }
        }
    }
}

pub fn check_model_gradients(
    arch: &ArchSpec,
    n_frames: usize,
    seed: u64,
    coords_per_tensor: usize,
) -> Result<f64> {
    let mut model = Model::init(arch, derive_seed(seed, "params"))?;
    let mut nudge_rng = rng_from_seed(derive_seed(seed, "nudge"));
    nudge_biases(&mut model, &mut nudge_rng);
    let mut rng = rng_from_seed(derive_seed(seed, "data"));
    let feats = Array2::from_shape_fn((n_frames, arch.input_dim), |_| {
        rng.random_range(-1.0..1.0)
    });
    let label = rng.random_range(0..arch.num_speakers);
    let margin = MarginState::new(2, 1.5);

    // Analytic pass.
    let mut grads = model.zero_grads();
    let pass = model.forward_body(&feats.view())?;
    let n_layers = model.layers.len();
    {
        let (body, head) = grads.split_at_mut(n_layers - 1);
        let res = head_loss(
            &model.layers[n_layers - 1],
            &mut head[0],
            pass.body_output(),
            label,
            margin,
        )?;
        let d_body_out = res.d_input.view().insert_axis(ndarray::Axis(0)).to_owned();
        model.backward_body(&feats.view(), &pass, d_body_out, body)?;
    }

    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut probe_rng = rng_from_seed(derive_seed(seed, "probe"));

    // A central difference straddling a ReLU or MFM kink measures the wrong
    // slope. Kinks make the estimate step-size dependent, so rejecting
    // coordinates where h and h/2 disagree filters them out without looking
    // at the analytic value.
    let fd_consistent = |model: &mut Model,
                         li: usize,
                         ti: usize,
                         k: usize,
                         feats: &Array2<f64>|
     -> Result<Option<f64>> {
        let orig = model.layers[li].tensor_slices()[ti][k];
        let eval = |m: &mut Model, v: f64| -> Result<f64> {
            m.layers[li].tensor_slices_mut()[ti][k] = v;
            training_loss(m, feats, label, margin)
        };
        let up = eval(model, orig + h)?;
        let dn = eval(model, orig - h)?;
        let up2 = eval(model, orig + h / 2.0)?;
        let dn2 = eval(model, orig - h / 2.0)?;
        model.layers[li].tensor_slices_mut()[ti][k] = orig;
        let fd = (up - dn) / (2.0 * h);
        let fd2 = (up2 - dn2) / h;
        let incons = (fd - fd2).abs() / fd.abs().max(fd2.abs()).max(1e-3);
        Ok(if incons > 1e-6 { None } else { Some(fd) })
    };

    for li in 0..n_layers {
        let n_tensors = grads[li].tensor_slices().len();
        for ti in 0..n_tensors {
            let len = grads[li].tensor_slices()[ti].len();
            if len == 0 {
                continue;
            }
            let n_probe = coords_per_tensor.min(len);
            for _ in 0..n_probe {
                let k = probe_rng.random_range(0..len);
                let analytic = grads[li].tensor_slices()[ti][k];
                let fd = match fd_consistent(&mut model, li, ti, k, &feats)? {
                    Some(fd) => fd,
                    None => continue,
                };
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
                max_rel = max_rel.max(rel);
            }
        }
    }

    // Input gradient: recompute analytically, then probe a few coordinates.
    let mut grads2 = model.zero_grads();
    let pass2 = model.forward_body(&feats.view())?;
    let (body, head) = grads2.split_at_mut(n_layers - 1);
    let res = head_loss(
        &model.layers[n_layers - 1],
        &mut head[0],
        pass2.body_output(),
        label,
        margin,
    )?;
    let d_body_out = res.d_input.view().insert_axis(ndarray::Axis(0)).to_owned();
    let d_feats = model.backward_body(&feats.view(), &pass2, d_body_out, body)?;
    let mut feats_mut = feats.clone();
    for _ in 0..coords_per_tensor.min(feats_mut.len()) {
        let t = probe_rng.random_range(0..feats_mut.nrows());
        let j = probe_rng.random_range(0..feats_mut.ncols());
        let orig = feats_mut[[t, j]];
        let eval = |fm: &mut Array2<f64>, v: f64| -> Result<f64> {
            fm[[t, j]] = v;
            training_loss(&model, fm, label, margin)
        };
        let up = eval(&mut feats_mut, orig + h)?;
        let dn = eval(&mut feats_mut, orig - h)?;
        let up2 = eval(&mut feats_mut, orig + h / 2.0)?;
        let dn2 = eval(&mut feats_mut, orig - h / 2.0)?;
        feats_mut[[t, j]] = orig;
        let fd = (up - dn) / (2.0 * h);
        let fd2 = (up2 - dn2) / h;
        let incons = (fd - fd2).abs() / fd.abs().max(fd2.abs()).max(1e-3);
        if incons > 1e-6 {
            continue;
        }
        let analytic = d_feats[[t, j]];
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
