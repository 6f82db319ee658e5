use nalgebra::DMatrix;

use super::{GruLayer, LstmLayer};
use crate::Real;

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `[top; bottom]`
fn stack<T: Real>(top: &DMatrix<T>, bottom: &DMatrix<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// `act(W·v + b)` with the bias broadcast over columns.
fn gate<T: Real>(w: &DMatrix<T>, b: &DMatrix<T>, v: &DMatrix<T>, act: impl Fn(T) -> T) -> DMatrix<T> {
    let mut a = DMatrix::zeros(w.nrows(), v.ncols());
    for mut col in a.column_iter_mut() {
        col.copy_from(&b.column(0));
    }
    a.gemm(T::one(), w, v, T::one());
    a.apply(|x| *x = act(*x));
    a
}

fn add_weight_grad<T: Real>(dw: &mut DMatrix<T>, db: &mut DMatrix<T>, da: &DMatrix<T>, v: &DMatrix<T>) {
    dw.gemm(T::one(), da, &v.transpose(), T::one());
    for (d, s) in db.iter_mut().zip(da.row_iter().map(|r| r.sum())) {
        *d += s;
    }
}

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    hx: DMatrix<T>,
    rhx: DMatrix<T>,
    z: DMatrix<T>,
    r: DMatrix<T>,
    cand: DMatrix<T>,
    h_prev: DMatrix<T>,
}

/// `z = σ(W_z[h,x]+b_z)`, `r = σ(W_r[h,x]+b_r)`, `h̃ = tanh(W_h[r⊙h,x]+b_h)`,
/// `h' = (1−z)⊙h + z⊙h̃`.
pub fn gru_forward<T: Real>(
    layer: &GruLayer<T>,
    x: &DMatrix<T>,
    h_prev: &DMatrix<T>,
) -> (DMatrix<T>, GruCache<T>) {
    let hx = stack(h_prev, x);
    let z = gate(&layer.w_z, &layer.b_z, &hx, sigmoid);
    let r = gate(&layer.w_r, &layer.b_r, &hx, sigmoid);
    let rhx = stack(&r.component_mul(h_prev), x);
    let cand = gate(&layer.w_h, &layer.b_h, &rhx, |v: T| v.tanh());
    let h = DMatrix::from_fn(h_prev.nrows(), h_prev.ncols(), |i, j| {
        let zz = z[(i, j)];
        (T::one() - zz) * h_prev[(i, j)] + zz * cand[(i, j)]
    });
    let cache = GruCache {
        hx,
        rhx,
        z,
        r,
        cand,
        h_prev: h_prev.clone(),
    };
    (h, cache)
}

/// Backward pass of [`gru_forward`]; accumulates into `grad` and returns `(dx, dh_prev)`.
pub(crate) fn gru_backward<T: Real>(
    layer: &GruLayer<T>,
    cache: &GruCache<T>,
    dh: &DMatrix<T>,
    grad: &mut GruLayer<T>,
) -> (DMatrix<T>, DMatrix<T>) {
    let d_h = dh.nrows();
    let one = T::one();
    let GruCache { hx, rhx, z, r, cand, h_prev } = cache;

    let mut dh_prev = dh.zip_map(z, |g, zz| g * (one - zz));
    let da_c = DMatrix::from_fn(d_h, dh.ncols(), |i, j| {
        let c = cand[(i, j)];
        dh[(i, j)] * z[(i, j)] * (one - c * c)
    });
    let da_z = DMatrix::from_fn(d_h, dh.ncols(), |i, j| {
        let zz = z[(i, j)];
        dh[(i, j)] * (cand[(i, j)] - h_prev[(i, j)]) * zz * (one - zz)
    });
    add_weight_grad(&mut grad.w_h, &mut grad.b_h, &da_c, rhx);
    let drhx = layer.w_h.transpose() * &da_c;
    let d_rh = drhx.rows(0, d_h);
    let mut dx = drhx.rows(d_h, drhx.nrows() - d_h).into_owned();

    let da_r = DMatrix::from_fn(d_h, dh.ncols(), |i, j| {
        let rr = r[(i, j)];
        d_rh[(i, j)] * h_prev[(i, j)] * rr * (one - rr)
    });
    dh_prev += d_rh.component_mul(r);

    add_weight_grad(&mut grad.w_z, &mut grad.b_z, &da_z, hx);
    add_weight_grad(&mut grad.w_r, &mut grad.b_r, &da_r, hx);
    let mut dhx = layer.w_z.transpose() * &da_z;
    dhx.gemm(one, &layer.w_r.transpose(), &da_r, one);
    dh_prev += dhx.rows(0, d_h);
    dx += dhx.rows(d_h, dhx.nrows() - d_h);
    (dx, dh_prev)
}

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    hx: DMatrix<T>,
    f: DMatrix<T>,
    i: DMatrix<T>,
    g: DMatrix<T>,
    o: DMatrix<T>,
    c_prev: DMatrix<T>,
    tanh_c: DMatrix<T>,
}

/// `c' = f⊙c + i⊙c̃`, `h' = o⊙tanh(c')` with sigmoid gates on `[h, x]`.
pub fn lstm_forward<T: Real>(
    layer: &LstmLayer<T>,
    x: &DMatrix<T>,
    h_prev: &DMatrix<T>,
    c_prev: &DMatrix<T>,
) -> (DMatrix<T>, DMatrix<T>, LstmCache<T>) {
    let hx = stack(h_prev, x);
    let f = gate(&layer.w_f, &layer.b_f, &hx, sigmoid);
    let i = gate(&layer.w_i, &layer.b_i, &hx, sigmoid);
    let g = gate(&layer.w_c, &layer.b_c, &hx, |v: T| v.tanh());
    let o = gate(&layer.w_h, &layer.b_h, &hx, sigmoid);
    let c = f.component_mul(c_prev) + i.component_mul(&g);
    let tanh_c = c.map(|v| v.tanh());
    let h = o.component_mul(&tanh_c);
    let cache = LstmCache {
        hx,
        f,
        i,
        g,
        o,
        c_prev: c_prev.clone(),
        tanh_c,
    };
    (h, c, cache)
}

/// Backward pass of [`lstm_forward`]. `dc` is the gradient reaching the new
/// cell state from later steps. Returns `(dx, dh_prev, dc_prev)`.
pub(crate) fn lstm_backward<T: Real>(
    layer: &LstmLayer<T>,
    cache: &LstmCache<T>,
    dh: &DMatrix<T>,
    dc: &DMatrix<T>,
    grad: &mut LstmLayer<T>,
) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
    let (d_h, b) = (dh.nrows(), dh.ncols());
    let one = T::one();
    let LstmCache { hx, f, i, g, o, c_prev, tanh_c } = cache;

    let dc_total = DMatrix::from_fn(d_h, b, |r, s| {
        let t = tanh_c[(r, s)];
        dc[(r, s)] + dh[(r, s)] * o[(r, s)] * (one - t * t)
    });
    let da_o = DMatrix::from_fn(d_h, b, |r, s| {
        let oo = o[(r, s)];
        dh[(r, s)] * tanh_c[(r, s)] * oo * (one - oo)
    });
    let da_f = DMatrix::from_fn(d_h, b, |r, s| {
        let ff = f[(r, s)];
        dc_total[(r, s)] * c_prev[(r, s)] * ff * (one - ff)
    });
    let da_i = DMatrix::from_fn(d_h, b, |r, s| {
        let ii = i[(r, s)];
        dc_total[(r, s)] * g[(r, s)] * ii * (one - ii)
    });
    let da_g = DMatrix::from_fn(d_h, b, |r, s| {
        let gg = g[(r, s)];
        dc_total[(r, s)] * i[(r, s)] * (one - gg * gg)
    });
    let dc_prev = dc_total.component_mul(f);

    add_weight_grad(&mut grad.w_f, &mut grad.b_f, &da_f, hx);
    add_weight_grad(&mut grad.w_i, &mut grad.b_i, &da_i, hx);
    add_weight_grad(&mut grad.w_c, &mut grad.b_c, &da_g, hx);
    add_weight_grad(&mut grad.w_h, &mut grad.b_h, &da_o, hx);

    let mut dhx = layer.w_f.transpose() * &da_f;
    dhx.gemm(one, &layer.w_i.transpose(), &da_i, one);
    dhx.gemm(one, &layer.w_c.transpose(), &da_g, one);
    dhx.gemm(one, &layer.w_h.transpose(), &da_o, one);
    let dh_prev = dhx.rows(0, d_h).into_owned();
    let dx = dhx.rows(d_h, dhx.nrows() - d_h).into_owned();
    (dx, dh_prev, dc_prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rng;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn zero_weight_gru_halves_state() {
        let l = GruLayer::<f64>::zeros(2, 3);
        let (h, _) = gru_forward(&l, &col(&[1.0, -2.0]), &col(&[0.4, -0.2, 1.0]));
        assert_eq!(h.as_slice(), &[0.2, -0.1, 0.5]);
        let (h, _) = gru_forward(&l, &col(&[1.0, -2.0]), &col(&[0.0; 3]));
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_weight_lstm_halves_cell() {
        let l = LstmLayer::<f64>::zeros(2, 2);
        let c0 = col(&[0.8, -1.2]);
        let (h, c, _) = lstm_forward(&l, &col(&[0.3, 0.3]), &col(&[0.0, 0.0]), &c0);
        assert_eq!(c.as_slice(), &[0.4, -0.6]);
        assert!((h[0] - 0.5 * 0.4f64.tanh()).abs() < 1e-15);
        assert!((h[1] - 0.5 * (-0.6f64).tanh()).abs() < 1e-15);
        let (h, _, _) = lstm_forward(&l, &col(&[0.3, 0.3]), &col(&[0.0, 0.0]), &col(&[0.0, 0.0]));
        assert!(h.iter().all(|v| *v == 0.0));
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn two_unit_gru_by_hand() {
        // One input, two units; weights on [h1, h2, x].
        let l = GruLayer {
            w_z: DMatrix::from_row_slice(2, 3, &[0.1, 0.0, 0.5, 0.0, -0.2, 1.0]),
            w_r: DMatrix::from_row_slice(2, 3, &[0.3, 0.3, 0.0, -0.4, 0.0, 0.2]),
            w_h: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -1.0, 0.5, 0.5, 0.0]),
            b_z: col(&[0.0, 0.1]),
            b_r: col(&[0.2, 0.0]),
            b_h: col(&[0.0, -0.3]),
        };
        let (h1, h2, x) = (0.5, -0.25, 2.0);
        let z = [sig(0.1 * h1 + 0.5 * x), sig(-0.2 * h2 + x + 0.1)];
        let r = [sig(0.3 * h1 + 0.3 * h2 + 0.2), sig(-0.4 * h1 + 0.2 * x)];
        let c = [
            (r[0] * h1 - x).tanh(),
            (0.5 * r[0] * h1 + 0.5 * r[1] * h2 - 0.3).tanh(),
        ];
        let want = [
            (1.0 - z[0]) * h1 + z[0] * c[0],
            (1.0 - z[1]) * h2 + z[1] * c[1],
        ];
        let (h, _) = gru_forward(&l, &col(&[x]), &col(&[h1, h2]));
        assert!((h[0] - want[0]).abs() < 1e-15 && (h[1] - want[1]).abs() < 1e-15);
    }

    #[test]
    fn two_unit_lstm_by_hand() {
        let m = |v: [f64; 6]| DMatrix::from_row_slice(2, 3, &v);
        let l = LstmLayer {
            w_f: m([0.2, 0.0, 0.1, 0.0, 0.3, -0.1]),
            w_i: m([-0.5, 0.2, 0.0, 0.1, 0.1, 0.4]),
            w_c: m([0.0, 1.0, -0.5, 0.7, 0.0, 0.2]),
            w_h: m([0.3, -0.3, 0.3, 0.0, 0.0, 1.0]),
            b_f: col(&[1.0, 1.0]),
            b_i: col(&[0.0, -0.2]),
            b_c: col(&[0.1, 0.0]),
            b_h: col(&[0.0, 0.0]),
        };
        let (h1, h2, x, c1, c2) = (0.1, -0.6, 0.5, 0.9, -0.3);
        let f = [sig(0.2 * h1 + 0.1 * x + 1.0), sig(0.3 * h2 - 0.1 * x + 1.0)];
        let i = [sig(-0.5 * h1 + 0.2 * h2), sig(0.1 * h1 + 0.1 * h2 + 0.4 * x - 0.2)];
        let g = [(h2 - 0.5 * x + 0.1).tanh(), (0.7 * h1 + 0.2 * x).tanh()];
        let o = [sig(0.3 * h1 - 0.3 * h2 + 0.3 * x), sig(x)];
        let c = [f[0] * c1 + i[0] * g[0], f[1] * c2 + i[1] * g[1]];
        let (h, cn, _) = lstm_forward(&l, &col(&[x]), &col(&[h1, h2]), &col(&[c1, c2]));
        for k in 0..2 {
            assert!((cn[k] - c[k]).abs() < 1e-15);
            assert!((h[k] - o[k] * c[k].tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_state_is_a_convex_combination() {
        let mut r = rng(11);
        let l = GruLayer::<f64>::new(3, 6, &mut r);
        let x: DMatrix<f64> = crate::linalg::gaussian_matrix(3, 4, &mut r);
        let h0: DMatrix<f64> = crate::linalg::gaussian_matrix(6, 4, &mut r);
        let (h, cache) = gru_forward(&l, &x, &h0);
        for k in 0..h.len() {
            let (a, b) = (h0[k], cache.cand[k]);
            assert!(h[k] >= a.min(b) - 1e-15 && h[k] <= a.max(b) + 1e-15);
        }
    }

    #[test]
    fn batch_columns_are_independent() {
        let mut r = rng(12);
        let l = LstmLayer::<f64>::new(2, 3, &mut r);
        let x: DMatrix<f64> = crate::linalg::gaussian_matrix(2, 3, &mut r);
        let h: DMatrix<f64> = crate::linalg::gaussian_matrix(3, 3, &mut r);
        let c: DMatrix<f64> = crate::linalg::gaussian_matrix(3, 3, &mut r);
        let (hb, cb, _) = lstm_forward(&l, &x, &h, &c);
        for j in 0..3 {
            let (hs, cs, _) = lstm_forward(
                &l,
                &x.columns(j, 1).into_owned(),
                &h.columns(j, 1).into_owned(),
                &c.columns(j, 1).into_owned(),
            );
            assert!((hb.column(j) - hs.column(0)).norm() < 1e-14);
            assert!((cb.column(j) - cs.column(0)).norm() < 1e-14);
        }
    }
}
