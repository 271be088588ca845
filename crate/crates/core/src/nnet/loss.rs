//! Training heads: plain softmax cross-entropy and the angular-margin
//! variant with weight rows normalized at every use.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::model::LayerParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    SoftmaxCe,
    Asoftmax,
}

/// Margin settings for the angular head. `lambda` blends the margin target
/// logit with the plain cosine one: (lambda*cos + psi) / (1 + lambda), so a
/// large lambda anneals the head toward normalized softmax.
#[derive(Debug, Clone, Copy)]
pub struct MarginState {
    pub m: u32,
    pub lambda: f64,
}

impl MarginState {
    pub fn new(m: u32, lambda: f64) -> MarginState {
        MarginState { m, lambda }
    }
}

pub struct HeadResult {
    pub loss: f64,
    /// Gradient at the head input.
    pub d_input: Array1<f64>,
}

const NORM_FLOOR: f64 = 1e-12;

fn softmax_stable(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.mapv(|z| (z - max).exp());
    let sum = p.sum();
    p /= sum;
    p
}

fn check_label(label: usize, n_classes: usize) -> Result<()> {
    if label >= n_classes {
        return Err(Error::Config(format!(
            "label {label} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

/// Chebyshev polynomials of the first and second kind at u.
fn chebyshev_t_u(m: u32, u: f64) -> (f64, f64) {
    let mut t_prev = 1.0;
    let mut t_cur = u;
    let mut u_prev = 1.0;
    let mut u_cur = 2.0 * u;
    if m == 0 {
        return (1.0, 0.0);
    }
    for _ in 1..m {
        let t_next = 2.0 * u * t_cur - t_prev;
        t_prev = t_cur;
        t_cur = t_next;
        let u_next = 2.0 * u * u_cur - u_prev;
        u_prev = u_cur;
        u_cur = u_next;
    }
    // T_m(u) and U_{m-1}(u); T_m'(u) = m * U_{m-1}(u).
    (t_cur, u_prev)
}

/// Monotone angular-margin extension psi(theta) = (-1)^k cos(m theta) - 2k
/// on theta in [k pi/m, (k+1) pi/m], evaluated at u = cos(theta), and its
/// derivative with respect to u.
fn psi_and_dpsi(m: u32, u: f64) -> (f64, f64) {
    let theta = u.clamp(-1.0, 1.0).acos();
    let k = ((f64::from(m) * theta) / std::f64::consts::PI).floor().min(f64::from(m)) as i32;
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let (t_m, u_m1) = chebyshev_t_u(m, u);
    let psi = sign * t_m - 2.0 * f64::from(k);
    let dpsi = sign * f64::from(m) * u_m1;
    (psi, dpsi)
}

/// Softmax cross-entropy head. Accumulates weight gradients into `grads`.
pub fn softmax_head(
    params: &LayerParams,
    grads: &mut LayerParams,
    x: ArrayView1<f64>,
    label: usize,
) -> Result<HeadResult> {
    let (w, b, dw, db) = match (params, grads) {
        (LayerParams::SoftmaxHead { w, b }, LayerParams::SoftmaxHead { w: dw, b: db }) => {
            (w, b, dw, db)
        }
        _ => return Err(Error::Shape("softmax head parameter mismatch".into())),
    };
    check_label(label, w.nrows())?;
    let logits = w.dot(&x) + b;
    let p = softmax_stable(&logits);
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    let mut dlogits = p;
    dlogits[label] -= 1.0;
    *dw += &dlogits
        .view()
        .insert_axis(Axis(1))
        .dot(&x.insert_axis(Axis(0)));
    *db += &dlogits;
    let d_input = w.t().dot(&dlogits);
    Ok(HeadResult { loss, d_input })
}

/// Angular-margin head: the target class logit is ||x|| * blend(psi, cos),
/// all others ||x|| * cos. With m = 1 the blend collapses to cos exactly.
pub fn asoftmax_head(
    params: &LayerParams,
    grads: &mut LayerParams,
    x: ArrayView1<f64>,
    label: usize,
    margin: MarginState,
) -> Result<HeadResult> {
    let (w, dw) = match (params, grads) {
        (LayerParams::AsoftmaxHead { w }, LayerParams::AsoftmaxHead { w: dw }) => (w, dw),
        _ => return Err(Error::Shape("angular head parameter mismatch".into())),
    };
    check_label(label, w.nrows())?;
    if margin.m < 1 {
        return Err(Error::Config("margin must be a positive integer".into()));
    }
    let n_classes = w.nrows();
    let xn = x.dot(&x).sqrt().max(NORM_FLOOR);
    let x_hat = x.mapv(|v| v / xn);

    let mut w_norms = Array1::zeros(n_classes);
    let mut u = Array1::zeros(n_classes);
    for j in 0..n_classes {
        let row = w.row(j);
        let wn = row.dot(&row).sqrt().max(NORM_FLOOR);
        w_norms[j] = wn;
        u[j] = (row.dot(&x) / (wn * xn)).clamp(-1.0, 1.0);
    }

    let lam = margin.lambda;
    let (psi, dpsi) = psi_and_dpsi(margin.m, u[label]);
    let f_target = (lam * u[label] + psi) / (1.0 + lam);
    let df_target = (lam + dpsi) / (1.0 + lam);

    let mut logits = u.mapv(|uj| xn * uj);
    logits[label] = xn * f_target;
    let p = softmax_stable(&logits);
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    let mut dlogits = p;
    dlogits[label] -= 1.0;

    let mut d_input = Array1::zeros(x.len());
    for j in 0..n_classes {
        let w_hat = w.row(j).mapv(|v| v / w_norms[j]);
        if j == label {
            // z = xn * F(u): dz/dx = F*x_hat + F'(u) (w_hat - u x_hat),
            // dz/dw = xn F'(u) (x_hat - u w_hat) / ||w||.
            let g = dlogits[j];
            for (k, d) in d_input.iter_mut().enumerate() {
                *d += g * (f_target * x_hat[k] + df_target * (w_hat[k] - u[j] * x_hat[k]));
            }
            let mut dw_row = dw.row_mut(j);
            for (k, d) in dw_row.iter_mut().enumerate() {
                *d += g * xn * df_target * (x_hat[k] - u[j] * w_hat[k]) / w_norms[j];
            }
        } else {
            // z = xn * u = w_hat . x: dz/dx = w_hat,
            // dz/dw = (x - xn u w_hat) / ||w||.
            let g = dlogits[j];
            for (k, d) in d_input.iter_mut().enumerate() {
                *d += g * w_hat[k];
            }
            let mut dw_row = dw.row_mut(j);
            for (k, d) in dw_row.iter_mut().enumerate() {
                *d += g * (x[k] - xn * u[j] * w_hat[k]) / w_norms[j];
            }
        }
    }
    Ok(HeadResult { loss, d_input })
}

/// Plain class scores for accuracy checks: affine logits for the softmax
/// head, cosine scores for the angular one.
pub fn inference_scores(params: &LayerParams, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    match params {
        LayerParams::SoftmaxHead { w, b } => Ok(w.dot(&x) + b),
        LayerParams::AsoftmaxHead { w } => {
            let xn = x.dot(&x).sqrt().max(NORM_FLOOR);
            let mut scores = Array1::zeros(w.nrows());
            for j in 0..w.nrows() {
                let row = w.row(j);
                let wn = row.dot(&row).sqrt().max(NORM_FLOOR);
                scores[j] = row.dot(&x) / (wn * xn);
            }
            Ok(scores)
        }
        _ => Err(Error::Shape("not a head layer".into())),
    }
}

/// Dispatch on the head kind stored in the final layer.
pub fn head_loss(
    params: &LayerParams,
    grads: &mut LayerParams,
    body_out: &Array2<f64>,
    label: usize,
    margin: MarginState,
) -> Result<HeadResult> {
    let x = body_out.row(0);
    match params {
        LayerParams::SoftmaxHead { .. } => softmax_head(params, grads, x, label),
        LayerParams::AsoftmaxHead { .. } => asoftmax_head(params, grads, x, label, margin),
        _ => Err(Error::Shape("final layer is not a training head".into())),
    }
}
