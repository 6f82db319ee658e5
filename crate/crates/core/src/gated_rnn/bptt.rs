use nalgebra::DMatrix;

use super::cell::{gru_backward, lstm_backward, GruCache, LstmCache};
use super::{gru_forward, lstm_forward, GatedRnnModel, Layer, RnnState};
use crate::{Error, Real, Result};

/// Regularisation masks for one window, one column per batch member.
#[derive(Debug, Clone)]
pub(crate) struct WindowMasks<T> {
    /// Per layer; 1 keeps the new value, 0 keeps the previous one.
    pub zoneout: Option<Vec<DMatrix<T>>>,
    /// Already scaled by the inverse keep probability.
    pub dropout: Option<DMatrix<T>>,
}

impl<T> Default for WindowMasks<T> {
    fn default() -> Self {
        Self {
            zoneout: None,
            dropout: None,
        }
    }
}

enum Cache<T> {
    Gru(GruCache<T>),
    Lstm(LstmCache<T>),
}

fn blend<T: Real>(mask: &DMatrix<T>, new: &DMatrix<T>, old: &DMatrix<T>) -> DMatrix<T> {
    DMatrix::from_fn(new.nrows(), new.ncols(), |i, j| {
        let m = mask[(i, j)];
        m * new[(i, j)] + (T::one() - m) * old[(i, j)]
    })
}

/// Runs the model over `inputs` (one `d_in × B` block per step) starting from
/// `state`, which is advanced in place. The last `targets.len()` steps
/// contribute the mean squared error. With `grad` supplied, gradients of that
/// loss with respect to every parameter are accumulated into it.
pub(crate) fn window_pass<T: Real>(
    model: &GatedRnnModel<T>,
    inputs: &[DMatrix<T>],
    targets: &[DMatrix<T>],
    state: &mut RnnState<T>,
    masks: &WindowMasks<T>,
    grad: Option<&mut GatedRnnModel<T>>,
) -> T {
    let steps = inputs.len();
    let k1 = targets.len();
    debug_assert!(k1 >= 1 && k1 <= steps);
    let first_loss = steps - k1;
    let n = model.layers.len();
    let batch = inputs[0].ncols();
    let d_out = model.output_dim();
    let keep_caches = grad.is_some();

    let mut caches: Vec<Vec<Cache<T>>> = Vec::with_capacity(if keep_caches { steps } else { 0 });
    let mut tops = Vec::with_capacity(k1);
    let mut errs = Vec::with_capacity(k1);
    let mut sse = T::zero();

    for (t, x) in inputs.iter().enumerate() {
        let mut input = x.clone();
        let mut step_caches = Vec::with_capacity(n);
        for (k, layer) in model.layers.iter().enumerate() {
            let h_old = &state.h[k];
            let h_new = match layer {
                Layer::Gru(l) => {
                    let (h, cache) = gru_forward(l, &input, h_old);
                    if keep_caches {
                        step_caches.push(Cache::Gru(cache));
                    }
                    match &masks.zoneout {
                        Some(z) => blend(&z[k], &h, h_old),
                        None => h,
                    }
                }
                Layer::Lstm(l) => {
                    let (h, c, cache) = lstm_forward(l, &input, h_old, &state.c[k]);
                    if keep_caches {
                        step_caches.push(Cache::Lstm(cache));
                    }
                    match &masks.zoneout {
                        Some(z) => {
                            state.c[k] = blend(&z[k], &c, &state.c[k]);
                            blend(&z[k], &h, h_old)
                        }
                        None => {
                            state.c[k] = c;
                            h
                        }
                    }
                }
            };
            state.h[k] = h_new;
            input = if k == 0 {
                state.h[k].clone()
            } else {
                &state.h[k] + &input
            };
        }
        if keep_caches {
            caches.push(step_caches);
        }
        if t >= first_loss {
            let top = match &masks.dropout {
                Some(d) => input.component_mul(d),
                None => input,
            };
            let err = &model.w_o * &top - &targets[t - first_loss];
            sse += err.norm_squared();
            tops.push(top);
            errs.push(err);
        }
    }
    let denom = T::from_usize_lossy(k1 * d_out * batch);
    let loss = sse / denom;

    let Some(grad) = grad else {
        return loss;
    };
    let d_h = model.hidden_dim();
    let scale = T::lit(2.0) / denom;
    let w_o_t = model.w_o.transpose();
    let mut dh_carry = vec![DMatrix::zeros(d_h, batch); n];
    let mut dc_carry = vec![DMatrix::zeros(d_h, batch); state.c.len()];

    for t in (0..steps).rev() {
        let mut d_out_k = if t >= first_loss {
            let i = t - first_loss;
            let dy = &errs[i] * scale;
            grad.w_o.gemm(T::one(), &dy, &tops[i].transpose(), T::one());
            let d_top = &w_o_t * &dy;
            match &masks.dropout {
                Some(d) => d_top.component_mul(d),
                None => d_top,
            }
        } else {
            DMatrix::zeros(d_h, batch)
        };
        for k in (0..n).rev() {
            let dh_new = &d_out_k + &dh_carry[k];
            let (dh_cell, dh_old) = match &masks.zoneout {
                Some(z) => (
                    dh_new.component_mul(&z[k]),
                    dh_new.zip_map(&z[k], |g, m| g * (T::one() - m)),
                ),
                None => (dh_new, DMatrix::zeros(d_h, batch)),
            };
            let dx = match (&model.layers[k], &mut grad.layers[k], &caches[t][k]) {
                (Layer::Gru(l), Layer::Gru(g), Cache::Gru(cache)) => {
                    let (dx, dh_prev) = gru_backward(l, cache, &dh_cell, g);
                    dh_carry[k] = dh_prev + dh_old;
                    dx
                }
                (Layer::Lstm(l), Layer::Lstm(g), Cache::Lstm(cache)) => {
                    let (dc_cell, dc_old) = match &masks.zoneout {
                        Some(z) => (
                            dc_carry[k].component_mul(&z[k]),
                            dc_carry[k].zip_map(&z[k], |g, m| g * (T::one() - m)),
                        ),
                        None => (dc_carry[k].clone(), DMatrix::zeros(d_h, batch)),
                    };
                    let (dx, dh_prev, dc_prev) = lstm_backward(l, cache, &dh_cell, &dc_cell, g);
                    dh_carry[k] = dh_prev + dh_old;
                    dc_carry[k] = dc_prev + dc_old;
                    dx
                }
                _ => unreachable!("gradient buffer mirrors the model"),
            };
            d_out_k = if k == 0 { dx } else { dx + d_out_k };
        }
    }
    loss
}

#[derive(Debug, Clone)]
pub struct BpttOutput<T> {
    pub loss: T,
    pub grads: GatedRnnModel<T>,
    /// Hidden state after the window's `κ2 + κ1 − 1` cell applications.
    pub state: RnnState<T>,
}

/// Loss and gradients for one window of `κ2 + κ1` consecutive observations
/// (rows of `window`). The cell consumes rows `0..len−1`; the last `kappa1`
/// predictions are scored against the last `kappa1` rows.
pub fn bptt_gradients<T: Real>(
    model: &GatedRnnModel<T>,
    window: &DMatrix<T>,
    kappa1: usize,
    h_init: &RnnState<T>,
) -> Result<BpttOutput<T>> {
    let d = model.input_dim();
    if model.output_dim() != d {
        return Err(Error::mismatch("bptt window model output", d, model.output_dim()));
    }
    if window.ncols() != d {
        return Err(Error::mismatch("bptt window width", d, window.ncols()));
    }
    let len = window.nrows();
    if kappa1 == 0 || len < kappa1 + 1 {
        return Err(Error::InvalidArgument(format!(
            "window of {len} rows cannot score {kappa1} predictions"
        )));
    }
    model.check_state(h_init)?;
    if h_init.batch() != 1 {
        return Err(Error::mismatch("bptt initial state batch", 1, h_init.batch()));
    }
    let row = |i: usize| DMatrix::from_iterator(window.ncols(), 1, window.row(i).iter().copied());
    let inputs: Vec<DMatrix<T>> = (0..len - 1).map(row).collect();
    let targets: Vec<DMatrix<T>> = (len - kappa1..len).map(row).collect();
    let mut state = h_init.clone();
    let mut grads = model.zeros_like();
    let loss = window_pass(
        model,
        &inputs,
        &targets,
        &mut state,
        &WindowMasks::default(),
        Some(&mut grads),
    );
    if !loss.is_finite() {
        return Err(Error::TrainingDivergence(format!("window loss {}", loss.as_f64())));
    }
    Ok(BpttOutput { loss, grads, state })
}

#[cfg(test)]
mod tests {
    use super::super::{CellKind, GruLayer};
    use super::*;
    use crate::linalg::{gaussian_matrix, rng};

    fn finite_difference_check(kind: CellKind, layers: usize, seed: u64) {
        let (d_o, d_h, k1, k2) = (3, 8, 2, 4);
        let mut model: GatedRnnModel<f64> =
            GatedRnnModel::new(kind, d_o, d_h, d_o, layers, seed).unwrap();
        // Non-trivial biases so every parameter is exercised.
        let mut r = rng(seed + 100);
        for b in model.blocks_mut() {
            if b.ncols() == 1 {
                *b += gaussian_matrix::<f64>(b.nrows(), 1, &mut r) * 0.3;
            }
        }
        let window: DMatrix<f64> = gaussian_matrix(k1 + k2, d_o, &mut r);
        let mut init = model.zero_state(1);
        for m in init.h.iter_mut().chain(init.c.iter_mut()) {
            *m = gaussian_matrix(d_h, 1, &mut r) * 0.5;
        }
        let out = bptt_gradients(&model, &window, k1, &init).unwrap();
        let analytic = out.grads.flat_params();
        let base = model.flat_params();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for p in 0..base.len() {
            let mut plus = base.clone();
            plus[p] += h;
            let mut minus = base.clone();
            minus[p] -= h;
            model.set_flat_params(&plus).unwrap();
            let lp = bptt_gradients(&model, &window, k1, &init).unwrap().loss;
            model.set_flat_params(&minus).unwrap();
            let lm = bptt_gradients(&model, &window, k1, &init).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - analytic[p]).abs() / fd.abs().max(analytic[p].abs()).max(1e-7);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "{kind:?} x{layers}: worst relative error {worst}");
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        finite_difference_check(CellKind::Gru, 1, 1);
        finite_difference_check(CellKind::Gru, 2, 2);
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        finite_difference_check(CellKind::Lstm, 1, 3);
        finite_difference_check(CellKind::Lstm, 2, 4);
    }

    #[test]
    fn zero_model_on_zero_data_has_zero_loss_and_gradient() {
        let model: GatedRnnModel<f64> = GatedRnnModel {
            kind: CellKind::Gru,
            layers: vec![Layer::Gru(GruLayer::zeros(2, 3))],
            w_o: DMatrix::zeros(2, 3),
        };
        let out = bptt_gradients(&model, &DMatrix::zeros(5, 2), 2, &model.zero_state(1)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.flat_params().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn kappa1_one_is_one_step_regression() {
        let model: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Gru, 2, 4, 2, 1, 8).unwrap();
        let window: DMatrix<f64> = gaussian_matrix(4, 2, &mut rng(2));
        let out = bptt_gradients(&model, &window, 1, &model.zero_state(1)).unwrap();
        let mut s = model.zero_state(1);
        let mut pred = DMatrix::zeros(2, 1);
        for t in 0..3 {
            pred = model.forward(&window.rows(t, 1).transpose(), &mut s).unwrap();
        }
        let want = (pred - window.rows(3, 1).transpose()).norm_squared() / 2.0;
        assert!((out.loss - want).abs() < 1e-14);
        assert_eq!(out.state, s);
    }

    #[test]
    fn consecutive_windows_match_one_long_run() {
        let model: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Lstm, 2, 4, 2, 2, 8).unwrap();
        let series: DMatrix<f64> = gaussian_matrix(9, 2, &mut rng(4));
        let a = bptt_gradients(&model, &series.rows(0, 5).into_owned(), 2, &model.zero_state(1))
            .unwrap();
        let b = bptt_gradients(&model, &series.rows(4, 5).into_owned(), 2, &a.state).unwrap();
        let mut s = model.zero_state(1);
        for t in 0..8 {
            model.forward(&series.rows(t, 1).transpose(), &mut s).unwrap();
        }
        assert_eq!(b.state, s);
    }
}
