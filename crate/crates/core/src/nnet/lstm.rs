//! Projected LSTM cell with delayed recurrence. Gate order in the stacked
//! weight matrix is input, forget, cell, output.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::arch::LstmDims;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
pub(crate) struct LstmCache {
    pub i: Array2<f64>,
    pub f: Array2<f64>,
    pub g: Array2<f64>,
    pub o: Array2<f64>,
    pub c: Array2<f64>,
    pub tanh_c: Array2<f64>,
    pub h: Array2<f64>,
    pub r: Array2<f64>,
}

/// Runs the recurrence over all frames. Recurrent state older than the
/// sequence start is zero.
pub(crate) fn lstm_forward(
    x: &ArrayView2<f64>,
    dims: &LstmDims,
    wg: &Array2<f64>,
    bg: &Array1<f64>,
    wrp: &Array2<f64>,
    wnp: &Array2<f64>,
) -> (Array2<f64>, LstmCache) {
    let t_len = x.nrows();
    let in_dim = x.ncols();
    let cell = dims.cell_dim;
    let rproj = dims.recurrent_proj;
    let nrproj = dims.nonrecurrent_proj;
    let delay = (-dims.delay) as usize;

    let mut cache = LstmCache {
        i: Array2::zeros((t_len, cell)),
        f: Array2::zeros((t_len, cell)),
        g: Array2::zeros((t_len, cell)),
        o: Array2::zeros((t_len, cell)),
        c: Array2::zeros((t_len, cell)),
        tanh_c: Array2::zeros((t_len, cell)),
        h: Array2::zeros((t_len, cell)),
        r: Array2::zeros((t_len, rproj)),
    };
    let mut y = Array2::zeros((t_len, rproj + nrproj));
    let zeros_r = Array1::<f64>::zeros(rproj);
    let zeros_c = Array1::<f64>::zeros(cell);

    for t in 0..t_len {
        let r_prev = if t >= delay {
            cache.r.row(t - delay).to_owned()
        } else {
            zeros_r.clone()
        };
        let c_prev = if t >= delay {
            cache.c.row(t - delay).to_owned()
        } else {
            zeros_c.clone()
        };
        let mut xin = Array1::zeros(in_dim + rproj);
        xin.slice_mut(s![..in_dim]).assign(&x.row(t));
        xin.slice_mut(s![in_dim..]).assign(&r_prev);
        let a = wg.dot(&xin) + bg;
        for k in 0..cell {
            let i_k = sigmoid(a[k]);
            let f_k = sigmoid(a[cell + k]);
            let g_k = a[2 * cell + k].tanh();
            let o_k = sigmoid(a[3 * cell + k]);
            let c_k = f_k * c_prev[k] + i_k * g_k;
            let tc = c_k.tanh();
            cache.i[[t, k]] = i_k;
            cache.f[[t, k]] = f_k;
            cache.g[[t, k]] = g_k;
            cache.o[[t, k]] = o_k;
            cache.c[[t, k]] = c_k;
            cache.tanh_c[[t, k]] = tc;
            cache.h[[t, k]] = o_k * tc;
        }
        let h_t = cache.h.row(t).to_owned();
        let r_t = wrp.dot(&h_t);
        let p_t = wnp.dot(&h_t);
        cache.r.row_mut(t).assign(&r_t);
        y.row_mut(t).slice_mut(s![..rproj]).assign(&r_t);
        y.row_mut(t).slice_mut(s![rproj..]).assign(&p_t);
    }
    (y, cache)
}

pub(crate) struct LstmGrads {
    pub dx: Array2<f64>,
    pub dwg: Array2<f64>,
    pub dbg: Array1<f64>,
    pub dwrp: Array2<f64>,
    pub dwnp: Array2<f64>,
}

/// Backpropagation through time. Walks frames in reverse, pushing gradient
/// through the delayed cell and projection recurrences.
pub(crate) fn lstm_backward(
    x: &ArrayView2<f64>,
    dims: &LstmDims,
    wg: &Array2<f64>,
    wrp: &Array2<f64>,
    wnp: &Array2<f64>,
    cache: &LstmCache,
    dy: &ArrayView2<f64>,
) -> LstmGrads {
    let t_len = x.nrows();
    let in_dim = x.ncols();
    let cell = dims.cell_dim;
    let rproj = dims.recurrent_proj;
    let delay = (-dims.delay) as usize;

    let mut dx = Array2::zeros((t_len, in_dim));
    let mut dwg = Array2::zeros(wg.raw_dim());
    let mut dbg = Array1::zeros(4 * cell);
    let mut dwrp = Array2::zeros(wrp.raw_dim());
    let mut dwnp = Array2::zeros(wnp.raw_dim());
    // Gradient pushed back to r[t] / c[t] from frames t + delay.
    let mut dr_acc = Array2::<f64>::zeros((t_len, rproj));
    let mut dc_acc = Array2::<f64>::zeros((t_len, cell));

    for t in (0..t_len).rev() {
        let dr_total = &dy.slice(s![t, ..rproj]) + &dr_acc.row(t);
        let dp = dy.slice(s![t, rproj..]);
        let h_t = cache.h.row(t);
        dwrp += &dr_total
            .view()
            .insert_axis(Axis(1))
            .dot(&h_t.insert_axis(Axis(0)));
        dwnp += &dp.insert_axis(Axis(1)).dot(&h_t.insert_axis(Axis(0)));
        let dh = wrp.t().dot(&dr_total) + wnp.t().dot(&dp);

        let o_t = cache.o.row(t);
        let tc = cache.tanh_c.row(t);
        let mut dc_total = dc_acc.row(t).to_owned();
        for k in 0..cell {
            dc_total[k] += dh[k] * o_t[k] * (1.0 - tc[k] * tc[k]);
        }

        let i_t = cache.i.row(t);
        let f_t = cache.f.row(t);
        let g_t = cache.g.row(t);
        let mut da = Array1::zeros(4 * cell);
        for k in 0..cell {
            let c_prev = if t >= delay { cache.c[[t - delay, k]] } else { 0.0 };
            da[k] = dc_total[k] * g_t[k] * i_t[k] * (1.0 - i_t[k]);
            da[cell + k] = dc_total[k] * c_prev * f_t[k] * (1.0 - f_t[k]);
            da[2 * cell + k] = dc_total[k] * i_t[k] * (1.0 - g_t[k] * g_t[k]);
            da[3 * cell + k] = dh[k] * tc[k] * o_t[k] * (1.0 - o_t[k]);
        }

        let mut xin = Array1::zeros(in_dim + rproj);
        xin.slice_mut(s![..in_dim]).assign(&x.row(t));
        if t >= delay {
            xin.slice_mut(s![in_dim..]).assign(&cache.r.row(t - delay));
        }
        dwg += &da
            .view()
            .insert_axis(Axis(1))
            .dot(&xin.view().insert_axis(Axis(0)));
        dbg += &da;
        let dxin = wg.t().dot(&da);
        dx.row_mut(t).assign(&dxin.slice(s![..in_dim]));
        if t >= delay {
            let mut dr_prev = dr_acc.row_mut(t - delay);
            dr_prev += &dxin.slice(s![in_dim..]);
            let mut dc_prev = dc_acc.row_mut(t - delay);
            for k in 0..cell {
                dc_prev[k] += dc_total[k] * f_t[k];
            }
        }
    }
    LstmGrads { dx, dwg, dbg, dwrp, dwnp }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;
    use rand::Rng;

    fn dims() -> LstmDims {
        LstmDims { cell_dim: 4, delay: -2, recurrent_proj: 2, nonrecurrent_proj: 2 }
    }

    fn random_params(
        d: &LstmDims,
        in_dim: usize,
        seed: u64,
    ) -> (Array2<f64>, Array1<f64>, Array2<f64>, Array2<f64>) {
        let mut rng = rng_from_seed(seed);
        let mut mat = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random_range(-0.5..0.5))
        };
        let wg = mat(4 * d.cell_dim, in_dim + d.recurrent_proj);
        let wrp = mat(d.recurrent_proj, d.cell_dim);
        let wnp = mat(d.nonrecurrent_proj, d.cell_dim);
        let mut rng2 = rng_from_seed(seed + 1);
        let bg = Array1::from_shape_fn(4 * d.cell_dim, |_| rng2.random_range(-0.1..0.1));
        (wg, bg, wrp, wnp)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let d = dims();
        let x = Array2::from_elem((6, 3), 0.7);
        let wg = Array2::zeros((4 * d.cell_dim, 3 + d.recurrent_proj));
        let bg = Array1::zeros(4 * d.cell_dim);
        let wrp = Array2::zeros((d.recurrent_proj, d.cell_dim));
        let wnp = Array2::zeros((d.nonrecurrent_proj, d.cell_dim));
        let (y, _) = lstm_forward(&x.view(), &d, &wg, &bg, &wrp, &wnp);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_causal() {
        let d = dims();
        let (wg, bg, wrp, wnp) = random_params(&d, 3, 11);
        let mut rng = rng_from_seed(12);
        let x = Array2::from_shape_fn((9, 3), |_| rng.random_range(-1.0..1.0));
        let (y, _) = lstm_forward(&x.view(), &d, &wg, &bg, &wrp, &wnp);
        let mut x2 = x.clone();
        x2[[5, 1]] += 0.3;
        let (y2, _) = lstm_forward(&x2.view(), &d, &wg, &bg, &wrp, &wnp);
        for t in 0..5 {
            for j in 0..y.ncols() {
                assert_eq!(y[[t, j]], y2[[t, j]], "frame {t} saw the future");
            }
        }
        let changed = (0..y.ncols()).any(|j| y[[5, j]] != y2[[5, j]]);
        assert!(changed, "perturbation never reached the output");
    }

    #[test]
    fn matches_scalar_recurrence_oracle() {
        let d = LstmDims { cell_dim: 2, delay: -1, recurrent_proj: 1, nonrecurrent_proj: 1 };
        let (wg, bg, wrp, wnp) = random_params(&d, 2, 21);
        let mut rng = rng_from_seed(22);
        let x = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let (y, _) = lstm_forward(&x.view(), &d, &wg, &bg, &wrp, &wnp);

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut r_hist = vec![0.0f64; 6];
        let mut c_hist = vec![[0.0f64; 2]; 6];
        for t in 0..5 {
            let r_prev = r_hist[t];
            let c_prev = c_hist[t];
            let xin = [x[[t, 0]], x[[t, 1]], r_prev];
            let mut a = [0.0; 8];
            for (row, a_val) in a.iter_mut().enumerate() {
                *a_val = bg[row] + (0..3).map(|c| wg[[row, c]] * xin[c]).sum::<f64>();
            }
            let mut h = [0.0; 2];
            let mut c_now = [0.0; 2];
            for k in 0..2 {
                let i = sig(a[k]);
                let f = sig(a[2 + k]);
                let g = a[4 + k].tanh();
                let o = sig(a[6 + k]);
                c_now[k] = f * c_prev[k] + i * g;
                h[k] = o * c_now[k].tanh();
            }
            let r = wrp[[0, 0]] * h[0] + wrp[[0, 1]] * h[1];
            let p = wnp[[0, 0]] * h[0] + wnp[[0, 1]] * h[1];
            assert!((y[[t, 0]] - r).abs() < 1e-10, "frame {t}");
            assert!((y[[t, 1]] - p).abs() < 1e-10, "frame {t}");
            r_hist[t + 1] = r;
            c_hist[t + 1] = c_now;
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let d = dims();
        let (mut wg, bg, wrp, wnp) = random_params(&d, 3, 31);
        let mut rng = rng_from_seed(32);
        let x = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((7, 4), |_| rng.random_range(-1.0..1.0));
        let loss = |wg: &Array2<f64>, x: &Array2<f64>| -> f64 {
            let (y, _) = lstm_forward(&x.view(), &d, wg, &bg, &wrp, &wnp);
            (&y * &probe).sum()
        };
        let (_, cache) = lstm_forward(&x.view(), &d, &wg, &bg, &wrp, &wnp);
        let grads = lstm_backward(&x.view(), &d, &wg, &wrp, &wnp, &cache, &probe.view());

        let h = 1e-6;
        for &(r, c) in &[(0usize, 0usize), (3, 2), (9, 4), (15, 1)] {
            let orig = wg[[r, c]];
            wg[[r, c]] = orig + h;
            let up = loss(&wg, &x);
            wg[[r, c]] = orig - h;
            let dn = loss(&wg, &x);
            wg[[r, c]] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads.dwg[[r, c]];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                "wg[{r},{c}]: fd {fd} vs analytic {an}"
            );
        }
        let mut x2 = x.clone();
        for &(r, c) in &[(0usize, 0usize), (4, 1), (6, 2)] {
            let orig = x2[[r, c]];
            x2[[r, c]] = orig + h;
            let up = loss(&wg, &x2);
            x2[[r, c]] = orig - h;
            let dn = loss(&wg, &x2);
            x2[[r, c]] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads.dx[[r, c]];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                "x[{r},{c}]: fd {fd} vs analytic {an}"
            );
        }
    }
}
