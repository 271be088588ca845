//! Parameter storage and the hand-derived forward/backward passes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::arch::{ArchSpec, LayerKind, LayerSpec};
use super::lstm::{lstm_backward, lstm_forward, LstmCache};
use crate::error::{Error, Result};
use crate::util::rng_from_seed;

pub const STATS_VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub enum LayerParams {
    Tdnn { w: Array2<f64>, b: Array1<f64> },
    Ftdnn { w1: Array2<f64>, w2: Array2<f64>, b2: Array1<f64> },
    LstmP { wg: Array2<f64>, bg: Array1<f64>, wrp: Array2<f64>, wnp: Array2<f64> },
    Dense { w: Array2<f64>, b: Array1<f64> },
    ResBlock { w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64> },
    StatsPooling,
    SoftmaxHead { w: Array2<f64>, b: Array1<f64> },
    AsoftmaxHead { w: Array2<f64> },
}

fn flat2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
fn flat1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
fn flat2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}
fn flat1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

impl LayerParams {
    /// Flat views over every tensor, in a fixed declaration order.
    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        match self {
            LayerParams::Tdnn { w, b } | LayerParams::Dense { w, b } => {
                vec![flat2(w), flat1(b)]
            }
            LayerParams::Ftdnn { w1, w2, b2 } => vec![flat2(w1), flat2(w2), flat1(b2)],
            LayerParams::LstmP { wg, bg, wrp, wnp } => {
                vec![flat2(wg), flat1(bg), flat2(wrp), flat2(wnp)]
            }
            LayerParams::ResBlock { w1, b1, w2, b2 } => {
                vec![flat2(w1), flat1(b1), flat2(w2), flat1(b2)]
            }
            LayerParams::StatsPooling => Vec::new(),
            LayerParams::SoftmaxHead { w, b } => vec![flat2(w), flat1(b)],
            LayerParams::AsoftmaxHead { w } => vec![flat2(w)],
        }
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerParams::Tdnn { w, b } | LayerParams::Dense { w, b } => {
                vec![flat2_mut(w), flat1_mut(b)]
            }
            LayerParams::Ftdnn { w1, w2, b2 } => {
                vec![flat2_mut(w1), flat2_mut(w2), flat1_mut(b2)]
            }
            LayerParams::LstmP { wg, bg, wrp, wnp } => {
                vec![flat2_mut(wg), flat1_mut(bg), flat2_mut(wrp), flat2_mut(wnp)]
            }
            LayerParams::ResBlock { w1, b1, w2, b2 } => {
                vec![flat2_mut(w1), flat1_mut(b1), flat2_mut(w2), flat1_mut(b2)]
            }
            LayerParams::StatsPooling => Vec::new(),
            LayerParams::SoftmaxHead { w, b } => vec![flat2_mut(w), flat1_mut(b)],
            LayerParams::AsoftmaxHead { w } => vec![flat2_mut(w)],
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensor_slices().iter().map(|s| s.len()).sum()
    }

    fn zeros_like(&self) -> LayerParams {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        match self {
            LayerParams::Tdnn { w, b } => LayerParams::Tdnn { w: z2(w), b: z1(b) },
            LayerParams::Dense { w, b } => LayerParams::Dense { w: z2(w), b: z1(b) },
            LayerParams::Ftdnn { w1, w2, b2 } => {
                LayerParams::Ftdnn { w1: z2(w1), w2: z2(w2), b2: z1(b2) }
            }
            LayerParams::LstmP { wg, bg, wrp, wnp } => LayerParams::LstmP {
                wg: z2(wg),
                bg: z1(bg),
                wrp: z2(wrp),
                wnp: z2(wnp),
            },
            LayerParams::ResBlock { w1, b1, w2, b2 } => LayerParams::ResBlock {
                w1: z2(w1),
                b1: z1(b1),
                w2: z2(w2),
                b2: z1(b2),
            },
            LayerParams::StatsPooling => LayerParams::StatsPooling,
            LayerParams::SoftmaxHead { w, b } => {
                LayerParams::SoftmaxHead { w: z2(w), b: z1(b) }
            }
            LayerParams::AsoftmaxHead { w } => LayerParams::AsoftmaxHead { w: z2(w) },
        }
    }
}

/// Per-layer activations kept for the backward pass.
pub(crate) enum LayerCache {
    Tdnn { z: Array2<f64> },
    Ftdnn { xin: Array2<f64>, inner: Array2<f64>, z: Array2<f64>, crop_front: usize },
    LstmP(Box<LstmCache>),
    Dense { z: Array2<f64> },
    ResBlock { xpad: Array2<f64>, z1: Array2<f64>, m: Array2<f64> },
    Stats { mean: Array1<f64>, std: Array1<f64> },
}

pub struct ForwardPass {
    /// Post-activation output of every body layer.
    pub outputs: Vec<Array2<f64>>,
    pub(crate) caches: Vec<LayerCache>,
}

impl ForwardPass {
    /// Input to the training head.
    pub fn body_output(&self) -> &Array2<f64> {
        self.outputs.last().expect("body has layers")
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchSpec,
    pub layers: Vec<LayerParams>,
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Applies a block-structured linear map over frame windows:
/// out[t] += x[t + (c - min)] . wblock_cᵀ for each context offset c.
fn context_matmul(
    x: &ArrayView2<f64>,
    contexts: &[i64],
    w: &Array2<f64>,
    out: &mut Array2<f64>,
) {
    let c_min = *contexts.iter().min().expect("non-empty context");
    let t_out = out.nrows();
    let d_in = x.ncols();
    for (k, &c) in contexts.iter().enumerate() {
        let off = (c - c_min) as usize;
        let block = w.slice(s![.., k * d_in..(k + 1) * d_in]);
        let window = x.slice(s![off..off + t_out, ..]);
        *out += &window.dot(&block.t());
    }
}

/// Backward counterpart of `context_matmul`: accumulates weight gradients
/// and scatters input gradients back to their frame windows.
fn context_matmul_backward(
    x: &ArrayView2<f64>,
    contexts: &[i64],
    w: &Array2<f64>,
    dz: &ArrayView2<f64>,
    dw: &mut Array2<f64>,
    dx: &mut Array2<f64>,
) {
    let c_min = *contexts.iter().min().expect("non-empty context");
    let t_out = dz.nrows();
    let d_in = x.ncols();
    for (k, &c) in contexts.iter().enumerate() {
        let off = (c - c_min) as usize;
        let window = x.slice(s![off..off + t_out, ..]);
        let mut dw_block = dw.slice_mut(s![.., k * d_in..(k + 1) * d_in]);
        dw_block += &dz.t().dot(&window);
        let block = w.slice(s![.., k * d_in..(k + 1) * d_in]);
        let mut dx_window = dx.slice_mut(s![off..off + t_out, ..]);
        dx_window += &dz.dot(&block);
    }
}

fn context_output_len(t_in: usize, spec_shrink: usize, idx: usize) -> Result<usize> {
    if t_in <= spec_shrink {
        return Err(Error::Shape(format!(
            "layer {idx}: {t_in} frames is too short for a context spanning {spec_shrink}"
        )));
    }
    Ok(t_in - spec_shrink)
}

fn extent(ctx: &[i64]) -> usize {
    match (ctx.iter().min(), ctx.iter().max()) {
        (Some(lo), Some(hi)) => (hi - lo) as usize,
        _ => 0,
    }
}

/// Center-crop `src` rows to length `target`; returns the front offset.
fn crop_front(src_len: usize, target: usize, idx: usize) -> Result<usize> {
    if src_len < target {
        return Err(Error::Shape(format!(
            "layer {idx}: skip source has {src_len} frames, consumer needs {target}"
        )));
    }
    Ok((src_len - target) / 2)
}

impl Model {
    /// Builds parameters with fan-in scaled uniform initialization.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Model> {
        arch.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut dims = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.iter().enumerate() {
            let prev_dim = if i == 0 { arch.input_dim } else { dims[i - 1] };
            let mut he = |rows: usize, cols: usize, fan_in: usize| -> Array2<f64> {
                let a = (6.0 / fan_in as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
            };
            let params = match spec.kind {
                LayerKind::Tdnn => {
                    let n_ctx = spec.context_factor1.len();
                    LayerParams::Tdnn {
                        w: he(spec.size, prev_dim * n_ctx, prev_dim * n_ctx),
                        b: Array1::zeros(spec.size),
                    }
                }
                LayerKind::Ftdnn => {
                    let skip_dim = spec.skip_from.map_or(0, |fr| dims[fr]);
                    let d_in = prev_dim + skip_dim;
                    let inner = spec.inner_size.expect("validated");
                    let n1 = spec.context_factor1.len();
                    let n2 = spec.context_factor2.len();
                    LayerParams::Ftdnn {
                        w1: he(inner, d_in * n1, d_in * n1),
                        w2: he(spec.size, inner * n2, inner * n2),
                        b2: Array1::zeros(spec.size),
                    }
                }
                LayerKind::LstmP => {
                    let d = spec.lstm.expect("validated");
                    let in_r = prev_dim + d.recurrent_proj;
                    LayerParams::LstmP {
                        wg: he(4 * d.cell_dim, in_r, in_r),
                        bg: Array1::zeros(4 * d.cell_dim),
                        wrp: he(d.recurrent_proj, d.cell_dim, d.cell_dim),
                        wnp: he(d.nonrecurrent_proj, d.cell_dim, d.cell_dim),
                    }
                }
                LayerKind::Dense => LayerParams::Dense {
                    w: he(spec.size, prev_dim, prev_dim),
                    b: Array1::zeros(spec.size),
                },
                LayerKind::MfmTdnnResblock => {
                    let f = spec.f.expect("validated");
                    let wide = 2 * f * prev_dim;
                    LayerParams::ResBlock {
                        w1: he(wide, 3 * prev_dim, 3 * prev_dim),
                        b1: Array1::zeros(wide),
                        w2: he(prev_dim, f * prev_dim, f * prev_dim),
                        b2: Array1::zeros(prev_dim),
                    }
                }
                LayerKind::StatsPooling => LayerParams::StatsPooling,
                LayerKind::SoftmaxHead => LayerParams::SoftmaxHead {
                    w: he(spec.size, prev_dim, prev_dim),
                    b: Array1::zeros(spec.size),
                },
                LayerKind::AsoftmaxHead => LayerParams::AsoftmaxHead {
                    w: he(spec.size, prev_dim, prev_dim),
                },
            };
            let out_dim = match spec.kind {
                LayerKind::StatsPooling => 2 * prev_dim,
                LayerKind::MfmTdnnResblock => prev_dim,
                _ => spec.size,
            };
            dims.push(out_dim);
            layers.push(params);
        }
        Ok(Model { arch: arch.clone(), layers })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerParams::num_params).sum()
    }

    pub fn zero_grads(&self) -> Vec<LayerParams> {
        self.layers.iter().map(LayerParams::zeros_like).collect()
    }

    fn body_len(&self) -> usize {
        self.arch.layers.len() - 1
    }

    /// Forward through every layer except the head, keeping activations.
    pub fn forward_body(&self, feats: &ArrayView2<f64>) -> Result<ForwardPass> {
        if feats.ncols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "expected {} feature dims, got {}",
                self.arch.input_dim,
                feats.ncols()
            )));
        }
        let min_frames = self.arch.min_input_frames();
        if feats.nrows() < min_frames {
            return Err(Error::Shape(format!(
                "utterance has {} frames, network needs at least {min_frames}",
                feats.nrows()
            )));
        }
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.body_len());
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.body_len());
        for i in 0..self.body_len() {
            let spec = &self.arch.layers[i];
            let x_owned;
            let x: ArrayView2<f64> = if i == 0 {
                feats.view()
            } else {
                x_owned = outputs[i - 1].view();
                x_owned
            };
            let (out, cache) = self.forward_layer(i, spec, &x, &outputs)?;
            outputs.push(out);
            caches.push(cache);
        }
        Ok(ForwardPass { outputs, caches })
    }

    fn forward_layer(
        &self,
        idx: usize,
        spec: &LayerSpec,
        x: &ArrayView2<f64>,
        outputs: &[Array2<f64>],
    ) -> Result<(Array2<f64>, LayerCache)> {
        match (&spec.kind, &self.layers[idx]) {
            (LayerKind::Tdnn, LayerParams::Tdnn { w, b }) => {
                let t_out = context_output_len(x.nrows(), extent(&spec.context_factor1), idx)?;
                let mut z = Array2::zeros((t_out, spec.size));
                z += &b.view().insert_axis(Axis(0));
                context_matmul(x, &spec.context_factor1, w, &mut z);
                let mut out = z.clone();
                relu_inplace(&mut out);
                Ok((out, LayerCache::Tdnn { z }))
            }
            (LayerKind::Ftdnn, LayerParams::Ftdnn { w1, w2, b2 }) => {
                let (xin, front) = match spec.skip_from {
                    Some(fr) => {
                        let skip = &outputs[fr];
                        let front = crop_front(skip.nrows(), x.nrows(), idx)?;
                        let mut xin = Array2::zeros((x.nrows(), x.ncols() + skip.ncols()));
                        xin.slice_mut(s![.., ..x.ncols()]).assign(x);
                        xin.slice_mut(s![.., x.ncols()..])
                            .assign(&skip.slice(s![front..front + x.nrows(), ..]));
                        (xin, front)
                    }
                    None => (x.to_owned(), 0),
                };
                let t1 = context_output_len(xin.nrows(), extent(&spec.context_factor1), idx)?;
                let inner_dim = spec.inner_size.expect("validated");
                let mut inner = Array2::zeros((t1, inner_dim));
                context_matmul(&xin.view(), &spec.context_factor1, w1, &mut inner);
                let t2 = context_output_len(t1, extent(&spec.context_factor2), idx)?;
                let mut z = Array2::zeros((t2, spec.size));
                z += &b2.view().insert_axis(Axis(0));
                context_matmul(&inner.view(), &spec.context_factor2, w2, &mut z);
                let mut out = z.clone();
                relu_inplace(&mut out);
                Ok((out, LayerCache::Ftdnn { xin, inner, z, crop_front: front }))
            }
            (LayerKind::LstmP, LayerParams::LstmP { wg, bg, wrp, wnp }) => {
                let dims = spec.lstm.as_ref().expect("validated");
                let (y, cache) = lstm_forward(x, dims, wg, bg, wrp, wnp);
                Ok((y, LayerCache::LstmP(Box::new(cache))))
            }
            (LayerKind::Dense, LayerParams::Dense { w, b }) => {
                let z = x.dot(&w.t()) + &b.view().insert_axis(Axis(0));
                let mut out = z.clone();
                relu_inplace(&mut out);
                Ok((out, LayerCache::Dense { z }))
            }
            (LayerKind::MfmTdnnResblock, LayerParams::ResBlock { w1, b1, w2, b2 }) => {
                let t_len = x.nrows();
                let dim = x.ncols();
                let mut xpad = Array2::zeros((t_len + 2, dim));
                xpad.row_mut(0).assign(&x.row(0));
                xpad.slice_mut(s![1..1 + t_len, ..]).assign(x);
                xpad.row_mut(t_len + 1).assign(&x.row(t_len - 1));
                let wide = w1.nrows();
                let mut z1 = Array2::zeros((t_len, wide));
                z1 += &b1.view().insert_axis(Axis(0));
                context_matmul(&xpad.view(), &spec.context_factor1, w1, &mut z1);
                let half = wide / 2;
                let mut m = Array2::zeros((t_len, half));
                for t in 0..t_len {
                    for j in 0..half {
                        m[[t, j]] = z1[[t, j]].max(z1[[t, j + half]]);
                    }
                }
                let g = m.dot(&w2.t()) + &b2.view().insert_axis(Axis(0));
                let out = x + &g;
                Ok((out, LayerCache::ResBlock { xpad, z1, m }))
            }
            (LayerKind::StatsPooling, LayerParams::StatsPooling) => {
                let t_len = x.nrows();
                if t_len == 0 {
                    return Err(Error::Empty("statistics pooling input".into()));
                }
                let mean = x.mean_axis(Axis(0)).expect("non-empty");
                let mut var = Array1::zeros(x.ncols());
                for t in 0..t_len {
                    for (j, v) in var.iter_mut().enumerate() {
                        let d = x[[t, j]] - mean[j];
                        *v += d * d;
                    }
                }
                var /= t_len as f64;
                let std = var.mapv(|v| v.max(STATS_VARIANCE_FLOOR).sqrt());
                let mut out = Array2::zeros((1, 2 * x.ncols()));
                out.slice_mut(s![0, ..x.ncols()]).assign(&mean);
                out.slice_mut(s![0, x.ncols()..]).assign(&std);
                Ok((out, LayerCache::Stats { mean, std }))
            }
            _ => Err(Error::Shape(format!(
                "layer {idx}: parameter kind does not match the architecture"
            ))),
        }
    }

    /// Pre-activation of the designated dense layer.
    pub fn embedding(&self, feats: &ArrayView2<f64>) -> Result<Array1<f64>> {
        let pass = self.forward_body(feats)?;
        match &pass.caches[self.arch.embedding_layer_index] {
            LayerCache::Dense { z } => Ok(z.row(0).to_owned()),
            _ => Err(Error::Shape("embedding layer is not dense".into())),
        }
    }

    /// Backpropagates `d_body_out` (gradient at the head input) through the
    /// body, accumulating into `grads`; returns the input-feature gradient.
    pub fn backward_body(
        &self,
        feats: &ArrayView2<f64>,
        pass: &ForwardPass,
        d_body_out: Array2<f64>,
        grads: &mut [LayerParams],
    ) -> Result<Array2<f64>> {
        let n_body = self.body_len();
        let mut d_outputs: Vec<Option<Array2<f64>>> = vec![None; n_body];
        d_outputs[n_body - 1] = Some(d_body_out);
        let mut d_feats = Array2::zeros(feats.raw_dim());
        for i in (0..n_body).rev() {
            let dy = match d_outputs[i].take() {
                Some(d) => d,
                None => continue,
            };
            let x_owned;
            let x: ArrayView2<f64> = if i == 0 {
                feats.view()
            } else {
                x_owned = pass.outputs[i - 1].view();
                x_owned
            };
            let spec = &self.arch.layers[i];
            let push = |target: usize, grad: Array2<f64>, d_outputs: &mut Vec<Option<Array2<f64>>>, d_feats: &mut Array2<f64>| {
                if let Some(t) = target.checked_sub(1) {
                    match &mut d_outputs[t] {
                        Some(acc) => *acc += &grad,
                        slot => *slot = Some(grad),
                    }
                } else {
                    *d_feats += &grad;
                }
            };
            match (&spec.kind, &self.layers[i], &mut grads[i], &pass.caches[i]) {
                (
                    LayerKind::Tdnn,
                    LayerParams::Tdnn { w, .. },
                    LayerParams::Tdnn { w: dw, b: db },
                    LayerCache::Tdnn { z },
                ) => {
                    let mut dz = dy;
                    dz.zip_mut_with(z, |d, &zv| {
                        if zv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    *db += &dz.sum_axis(Axis(0));
                    let mut dx = Array2::zeros(x.raw_dim());
                    context_matmul_backward(&x, &spec.context_factor1, w, &dz.view(), dw, &mut dx);
                    push(i, dx, &mut d_outputs, &mut d_feats);
                }
                (
                    LayerKind::Ftdnn,
                    LayerParams::Ftdnn { w1, w2, .. },
                    LayerParams::Ftdnn { w1: dw1, w2: dw2, b2: db2 },
                    LayerCache::Ftdnn { xin, inner, z, crop_front },
                ) => {
                    let mut dz = dy;
                    dz.zip_mut_with(z, |d, &zv| {
                        if zv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    *db2 += &dz.sum_axis(Axis(0));
                    let mut d_inner = Array2::zeros(inner.raw_dim());
                    context_matmul_backward(
                        &inner.view(),
                        &spec.context_factor2,
                        w2,
                        &dz.view(),
                        dw2,
                        &mut d_inner,
                    );
                    let mut d_xin = Array2::zeros(xin.raw_dim());
                    context_matmul_backward(
                        &xin.view(),
                        &spec.context_factor1,
                        w1,
                        &d_inner.view(),
                        dw1,
                        &mut d_xin,
                    );
                    let d_prev = d_xin.slice(s![.., ..x.ncols()]).to_owned();
                    if let Some(fr) = spec.skip_from {
                        let skip_cols = xin.ncols() - x.ncols();
                        let mut d_skip = Array2::zeros(pass.outputs[fr].raw_dim());
                        let rows = d_xin.nrows();
                        d_skip
                            .slice_mut(s![*crop_front..*crop_front + rows, ..skip_cols])
                            .assign(&d_xin.slice(s![.., x.ncols()..]));
                        push(fr + 1, d_skip, &mut d_outputs, &mut d_feats);
                    }
                    push(i, d_prev, &mut d_outputs, &mut d_feats);
                }
                (
                    LayerKind::LstmP,
                    LayerParams::LstmP { wg, wrp, wnp, .. },
                    LayerParams::LstmP { wg: dwg, bg: dbg, wrp: dwrp, wnp: dwnp },
                    LayerCache::LstmP(cache),
                ) => {
                    let dims = spec.lstm.as_ref().expect("validated");
                    let g = lstm_backward(&x, dims, wg, wrp, wnp, cache, &dy.view());
                    *dwg += &g.dwg;
                    *dbg += &g.dbg;
                    *dwrp += &g.dwrp;
                    *dwnp += &g.dwnp;
                    push(i, g.dx, &mut d_outputs, &mut d_feats);
                }
                (
                    LayerKind::Dense,
                    LayerParams::Dense { w, .. },
                    LayerParams::Dense { w: dw, b: db },
                    LayerCache::Dense { z },
                ) => {
                    let mut dz = dy;
                    dz.zip_mut_with(z, |d, &zv| {
                        if zv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    *db += &dz.sum_axis(Axis(0));
                    *dw += &dz.t().dot(&x);
                    push(i, dz.dot(w), &mut d_outputs, &mut d_feats);
                }
                (
                    LayerKind::MfmTdnnResblock,
                    LayerParams::ResBlock { w1, w2, .. },
                    LayerParams::ResBlock { w1: dw1, b1: db1, w2: dw2, b2: db2 },
                    LayerCache::ResBlock { xpad, z1, m },
                ) => {
                    let t_len = x.nrows();
                    let half = m.ncols();
                    // Identity path.
                    let mut dx = dy.clone();
                    // G path: dense after MFM.
                    let dg = dy;
                    *db2 += &dg.sum_axis(Axis(0));
                    *dw2 += &dg.t().dot(m);
                    let dm = dg.dot(w2);
                    let mut dz1 = Array2::zeros(z1.raw_dim());
                    for t in 0..t_len {
                        for j in 0..half {
                            if z1[[t, j]] >= z1[[t, j + half]] {
                                dz1[[t, j]] = dm[[t, j]];
                            } else {
                                dz1[[t, j + half]] = dm[[t, j]];
                            }
                        }
                    }
                    *db1 += &dz1.sum_axis(Axis(0));
                    let mut d_xpad = Array2::zeros(xpad.raw_dim());
                    context_matmul_backward(
                        &xpad.view(),
                        &spec.context_factor1,
                        w1,
                        &dz1.view(),
                        dw1,
                        &mut d_xpad,
                    );
                    // Fold the replicated edge rows back in.
                    dx += &d_xpad.slice(s![1..1 + t_len, ..]);
                    {
                        let mut r0 = dx.row_mut(0);
                        r0 += &d_xpad.row(0);
                        let mut rl = dx.row_mut(t_len - 1);
                        rl += &d_xpad.row(t_len + 1);
                    }
                    push(i, dx, &mut d_outputs, &mut d_feats);
                }
                (LayerKind::StatsPooling, LayerParams::StatsPooling, _, LayerCache::Stats { mean, std }) => {
                    let t_len = x.nrows();
                    let d = x.ncols();
                    let dmu = dy.slice(s![0, ..d]);
                    let ds = dy.slice(s![0, d..]);
                    let mut dx = Array2::zeros(x.raw_dim());
                    let tf = t_len as f64;
                    for t in 0..t_len {
                        for j in 0..d {
                            let mut grad = dmu[j] / tf;
                            let var = std[j] * std[j];
                            if var > STATS_VARIANCE_FLOOR {
                                grad += ds[j] * (x[[t, j]] - mean[j]) / (tf * std[j]);
                            }
                            dx[[t, j]] = grad;
                        }
                    }
                    push(i, dx, &mut d_outputs, &mut d_feats);
                }
                _ => {
                    return Err(Error::Shape(format!(
                        "layer {i}: cache does not match the architecture"
                    )))
                }
            }
        }
        Ok(d_feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::arch::ArchSpec;
    use rand::Rng;

    fn random_feats(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn tdnn_identity_taps_pass_input_through() {
        let arch = ArchSpec::mini_xvec_tdnn(8, 3);
        let mut model = Model::init(&arch, 1).unwrap();
        // First layer: context {-1,0,1}; make the center block identity and
        // read the pre-activation cache.
        if let LayerParams::Tdnn { w, b } = &mut model.layers[0] {
            w.fill(0.0);
            for j in 0..8 {
                w[[j, 8 + j]] = 1.0;
            }
            b.fill(0.0);
        }
        let feats = random_feats(12, 8, 2);
        let pass = model.forward_body(&feats.view()).unwrap();
        if let LayerCache::Tdnn { z } = &pass.caches[0] {
            assert_eq!(z.nrows(), 10);
            for t in 0..10 {
                for j in 0..8 {
                    assert!((z[[t, j]] - feats[[t + 1, j]]).abs() < 1e-12);
                }
            }
        } else {
            panic!("wrong cache kind");
        }
    }

    #[test]
    fn tdnn_matches_per_frame_matmul_oracle() {
        let arch = ArchSpec::mini_xvec_tdnn(6, 3);
        let model = Model::init(&arch, 3).unwrap();
        let feats = random_feats(9, 6, 4);
        let pass = model.forward_body(&feats.view()).unwrap();
        let (w, b) = match &model.layers[0] {
            LayerParams::Tdnn { w, b } => (w, b),
            _ => unreachable!(),
        };
        for t in 0..7 {
            for o in 0..w.nrows() {
                let mut acc = b[o];
                for (k, &c) in [-1i64, 0, 1].iter().enumerate() {
                    let src = (t as i64 + 1 + c) as usize;
                    for j in 0..6 {
                        acc += w[[o, k * 6 + j]] * feats[[src, j]];
                    }
                }
                let want = acc.max(0.0);
                assert!(
                    (pass.outputs[0][[t, o]] - want).abs() < 1e-12,
                    "frame {t} unit {o}"
                );
            }
        }
    }

    #[test]
    fn ftdnn_composes_to_a_single_matrix() {
        // Both contexts {0}: the layer is w2.w1 plus bias, a rank-bounded map.
        let mut arch = ArchSpec::mini_xvec_ftdnn(5, 3);
        arch.layers[1] = crate::nnet::arch::LayerSpec::ftdnn(&[0], &[0], 2, 7);
        let model = Model::init(&arch, 5).unwrap();
        let feats = random_feats(8, 5, 6);
        let pass = model.forward_body(&feats.view()).unwrap();
        let x1 = &pass.outputs[0];
        let (w1, w2, b2) = match &model.layers[1] {
            LayerParams::Ftdnn { w1, w2, b2 } => (w1, w2, b2),
            _ => unreachable!(),
        };
        let composed = w2.dot(w1);
        let want = x1.dot(&composed.t()) + &b2.view().insert_axis(Axis(0));
        for (got, w) in pass.outputs[1].iter().zip(want.iter()) {
            assert!((got - w.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn ftdnn_two_factor_contexts_shrink_like_the_table_row() {
        let arch = ArchSpec {
            layers: {
                let mut layers = ArchSpec::mini_xvec_ftdnn(5, 3).layers;
                layers[1] = crate::nnet::arch::LayerSpec::ftdnn(&[-2, 0], &[2, 0], 4, 9);
                layers
            },
            ..ArchSpec::mini_xvec_ftdnn(5, 3)
        };
        let model = Model::init(&arch, 7).unwrap();
        let feats = random_feats(20, 5, 8);
        let pass = model.forward_body(&feats.view()).unwrap();
        // Layer 0 shrinks 18 -> wait: 20 - 2 = 18; the factorized pair takes 4 more.
        assert_eq!(pass.outputs[0].nrows(), 18);
        assert_eq!(pass.outputs[1].nrows(), 14);
    }

    #[test]
    fn stats_pooling_mean_std_and_permutation_invariance() {
        let arch = ArchSpec::mini_xvec_tdnn(4, 3);
        let model = Model::init(&arch, 9).unwrap();
        let feats = random_feats(15, 4, 10);
        let pass = model.forward_body(&feats.view()).unwrap();
        let pooled = &pass.outputs[3];
        assert_eq!(pooled.nrows(), 1);
        assert_eq!(pooled.ncols(), 2 * 96);

        let x = &pass.outputs[2];
        let t = x.nrows() as f64;
        for j in 0..x.ncols() {
            let mean: f64 = x.column(j).sum() / t;
            let var: f64 = x.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
            assert!((pooled[[0, j]] - mean).abs() < 1e-10);
            assert!((pooled[[0, x.ncols() + j]] - var.max(1e-10).sqrt()).abs() < 1e-10);
        }

        // Pooling is permutation-invariant: a duplicated frame multiset has
        // identical mean and std.
        let mut doubled = Array2::zeros((2 * x.nrows(), x.ncols()));
        doubled.slice_mut(s![..x.nrows(), ..]).assign(x);
        doubled.slice_mut(s![x.nrows().., ..]).assign(x);
        let spec = &model.arch.layers[3];
        let (pooled2, _) = model
            .forward_layer(3, spec, &doubled.view(), &pass.outputs)
            .unwrap();
        for j in 0..pooled.ncols() {
            assert!((pooled[[0, j]] - pooled2[[0, j]]).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_frames_pool_to_zero_std() {
        let arch = ArchSpec::mini_xvec_tdnn(4, 3);
        let model = Model::init(&arch, 11).unwrap();
        let x = Array2::from_elem((6, 96), 0.5);
        let spec = &model.arch.layers[3];
        let (pooled, _) = model.forward_layer(3, spec, &x.view(), &[]).unwrap();
        for j in 0..96 {
            assert!((pooled[[0, j]] - 0.5).abs() < 1e-12);
            assert!(pooled[[0, 96 + j]] < 1e-4, "std ~ sqrt(floor)");
        }
    }

    #[test]
    fn mfm_halves_and_takes_elementwise_max() {
        let arch = ArchSpec::mini_cvec_res_tdnn(6, 3);
        let mut model = Model::init(&arch, 12).unwrap();
        // Zero the final projection of the first block: y = x exactly.
        if let LayerParams::ResBlock { w2, b2, .. } = &mut model.layers[1] {
            w2.fill(0.0);
            b2.fill(0.0);
        }
        let feats = random_feats(10, 6, 13);
        let pass = model.forward_body(&feats.view()).unwrap();
        let x = &pass.outputs[0];
        let y = &pass.outputs[1];
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-12, "identity residual");
        }
        // MFM semantics on the cached pre-activations.
        if let LayerCache::ResBlock { z1, m, .. } = &pass.caches[1] {
            let half = m.ncols();
            assert_eq!(z1.ncols(), 2 * half);
            for t in 0..m.nrows() {
                for j in 0..half {
                    assert_eq!(m[[t, j]], z1[[t, j]].max(z1[[t, j + half]]));
                }
            }
        } else {
            panic!("wrong cache kind");
        }
    }

    #[test]
    fn resblock_preserves_frame_count() {
        let arch = ArchSpec::mini_cvec_res_tdnn(6, 3);
        let model = Model::init(&arch, 14).unwrap();
        let feats = random_feats(9, 6, 15);
        let pass = model.forward_body(&feats.view()).unwrap();
        assert_eq!(pass.outputs[0].nrows(), 7);
        for b in 1..=4 {
            assert_eq!(pass.outputs[b].nrows(), 7, "block {b}");
        }
    }

    #[test]
    fn embedding_is_preactivation_and_correct_dim() {
        let arch = ArchSpec::mini_xvec_ftdnn(7, 4);
        let model = Model::init(&arch, 16).unwrap();
        let feats = random_feats(25, 7, 17);
        let emb = model.embedding(&feats.view()).unwrap();
        assert_eq!(emb.len(), 64);
        // Pre-activation can be negative; the post-activation output cannot.
        let pass = model.forward_body(&feats.view()).unwrap();
        let post = &pass.outputs[arch.embedding_layer_index];
        assert!(emb.iter().any(|&v| v < 0.0), "seed-dependent but expected");
        assert!(post.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn doubling_a_periodic_input_preserves_the_embedding() {
        // The mini net shrinks by 6. A period-6 signal of 36 and 72 frames
        // yields 30 and 66 pre-pooling frames: exact multiples of the period,
        // so the pooled frame multisets are proportional and the statistics
        // (hence the embedding) must match to roundoff.
        let arch = ArchSpec::mini_xvec_tdnn(5, 3);
        let model = Model::init(&arch, 18).unwrap();
        let block = random_feats(6, 5, 19);
        let tile = |reps: usize| {
            let mut out = Array2::zeros((6 * reps, 5));
            for r in 0..reps {
                out.slice_mut(s![6 * r..6 * (r + 1), ..]).assign(&block);
            }
            out
        };
        let e1 = model.embedding(&tile(6).view()).unwrap();
        let e2 = model.embedding(&tile(12).view()).unwrap();
        for (a, b) in e1.iter().zip(e2.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn too_short_input_is_rejected_with_frame_count() {
        let arch = ArchSpec::xvec_ftdnn(10, 4);
        let model = Model::init(&arch, 20).unwrap();
        let feats = random_feats(26, 10, 21);
        let err = match model.forward_body(&feats.view()) {
            Ok(_) => panic!("26 frames accepted below the receptive field"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("27"), "{err}");
        let ok = random_feats(27, 10, 21);
        assert!(model.forward_body(&ok.view()).is_ok());
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        let m = Model::init(&ArchSpec::xvec_tdnn(40, 100), 1).unwrap();
        let expected = (512 * 5 * 40 + 512)      // ctx [-2..2]
            + (512 * 3 * 512 + 512)              // ctx {-2,0,2}
            + (512 * 3 * 512 + 512)              // ctx {-3,0,3}
            + (512 * 512 + 512)
            + (1500 * 512 + 1500)
            + (512 * 3000 + 512)                 // pooled stats -> embedding
            + (512 * 512 + 512)
            + (100 * 512 + 100);
        assert_eq!(m.num_params(), expected);

        // Deeper variant must cost more under the same head.
        let e = Model::init(&ArchSpec::xvec_ext_tdnn(40, 100), 1).unwrap();
        assert!(e.num_params() > m.num_params());

        let f = Model::init(&ArchSpec::xvec_ftdnn(40, 100), 1).unwrap();
        let two_ctx = 256 * (2 * 512) + 512 * (2 * 256) + 512;
        let unit_ctx = 256 * 512 + 512 * 256 + 512;
        let unit_skip = 256 * (512 + 512) + 512 * 256 + 512;
        let two_ctx_skip = 256 * (2 * (512 + 512)) + 512 * (2 * 256) + 512;
        let expected_f = (512 * 5 * 40 + 512)
            + two_ctx                            // {-2,0} / {2,0}
            + unit_ctx
            + two_ctx                            // {-3,0} / {-3,0}
            + unit_skip
            + two_ctx                            // {-3,0} / {3,0}
            + unit_skip
            + two_ctx_skip                       // {-3,0} / {3,0}, skipped input
            + unit_ctx
            + (1536 * 512 + 1536)
            + (512 * 2 * 1536 + 512)
            + (512 * 512 + 512)
            + (100 * 512 + 100);
        assert_eq!(f.num_params(), expected_f);
    }

    #[test]
    fn all_presets_forward_and_backward_without_shape_errors() {
        for name in ArchSpec::zoo() {
            let arch = ArchSpec::preset(name, 40, 8).unwrap();
            let model = Model::init(&arch, 23).unwrap();
            let feats = random_feats(arch.min_input_frames() + 5, 40, 24);
            let pass = model.forward_body(&feats.view()).unwrap();
            let out = pass.body_output();
            assert!(out.iter().all(|v| v.is_finite()), "{name}");
            let mut grads = model.zero_grads();
            let d_out = Array2::from_elem(out.raw_dim(), 1.0);
            let d_feats = model
                .backward_body(&feats.view(), &pass, d_out, &mut grads)
                .unwrap();
            assert!(d_feats.iter().all(|v| v.is_finite()), "{name}");
        }
    }
}
