//! Lyapunov spectra of trained surrogates (Jacobian chain rule with periodic
//! QR re-orthonormalisation) and the Kaplan-Yorke dimension.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::BLOWUP_THRESHOLD;
use crate::forecasting::AnyModel;
use crate::gated_rnn::{gru_forward, CellKind, GatedRnnModel, GruLayer, Layer};
use crate::linalg::{qr_positive, random_orthonormal, rng};
use crate::reservoir::ReservoirModel;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSpectrum<T> {
    /// Descending, in inverse time units.
    pub exponents: Vec<T>,
    pub converged: bool,
    /// Sorted estimates recorded at each convergence check.
    pub history: Vec<Vec<T>>,
    pub ky_dimension: T,
    /// Every partial sum was non-negative, so the dimension is only a lower bound.
    pub ky_saturated: bool,
}

impl<T: Real> LyapunovSpectrum<T> {
    /// `index,exponent[,padded]` table. With `zero_pad > 0` a third column lists
    /// the spectrum with that many zero exponents inserted in sorted position.
    pub fn to_csv(&self, zero_pad: usize) -> String {
        let mut padded: Vec<f64> = self.exponents.iter().map(|v| v.as_f64()).collect();
        padded.extend(std::iter::repeat_n(0.0, zero_pad));
        padded.sort_by(|a, b| b.total_cmp(a));
        let mut s = String::from(if zero_pad > 0 {
            "index,exponent,padded\n"
        } else {
            "index,exponent\n"
        });
        let rows = if zero_pad > 0 { padded.len() } else { self.exponents.len() };
        for i in 0..rows {
            let e = self
                .exponents
                .get(i)
                .map(|v| format!("{:e}", v.as_f64()))
                .unwrap_or_default();
            if zero_pad > 0 {
                let _ = writeln!(s, "{},{},{:e}", i + 1, e, padded[i]);
            } else {
                let _ = writeln!(s, "{},{}", i + 1, e);
            }
        }
        s
    }

    /// One row per convergence check: `check,e1,e2,…`.
    pub fn history_csv(&self) -> String {
        let n = self.exponents.len();
        let mut s = String::from("check");
        for i in 1..=n {
            let _ = write!(s, ",e{i}");
        }
        s.push('\n');
        for (k, row) in self.history.iter().enumerate() {
            let _ = write!(s, "{}", k + 1);
            for v in row {
                let _ = write!(s, ",{:e}", v.as_f64());
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KaplanYorke<T> {
    pub dimension: T,
    pub saturated: bool,
}

/// `j + S_j / |Λ_{j+1}|` with `j` the largest count whose partial sum is non-negative.
pub fn kaplan_yorke<T: Real>(exponents: &[T]) -> KaplanYorke<T> {
    let mut sorted = exponents.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if sorted.first().is_none_or(|l| *l < T::zero()) {
        return KaplanYorke {
            dimension: T::zero(),
            saturated: false,
        };
    }
    let mut sum = T::zero();
    for (j, &l) in sorted.iter().enumerate() {
        if sum + l < T::zero() {
            return KaplanYorke {
                dimension: T::from_usize_lossy(j) + sum / l.abs(),
                saturated: false,
            };
        }
        sum += l;
    }
    KaplanYorke {
        dimension: T::from_usize_lossy(sorted.len()),
        saturated: true,
    }
}

/// `∂h_{t+1}/∂h_t`, `∂h_{t+1}/∂o_{t+1}` and `∂ô/∂h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobians<T> {
    pub j1: DMatrix<T>,
    pub j2: DMatrix<T>,
    pub j0: DMatrix<T>,
}

/// A recurrent model with a single hidden vector: `h' = f(o, h)`, `ô = g(h)`.
pub trait TangentModel<T: Real> {
    fn hidden_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn readout(&self, h: &DVector<T>) -> DVector<T>;
    fn transition(&self, o: &DVector<T>, h: &DVector<T>) -> DVector<T>;
    /// `J1`, `J2` at `(o, h)` and `J0` at `h`.
    fn jacobians(&self, o: &DVector<T>, h: &DVector<T>) -> Jacobians<T>;

    /// One closed-loop step `h ↦ f(g(h), h)` together with `(J1 + J2·J0)·δ`.
    fn closed_loop_step(&self, h: &DVector<T>, delta: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
        let o = self.readout(h);
        let j = self.jacobians(&o, h);
        let mut jd = &j.j1 * delta;
        jd.gemm(T::one(), &j.j2, &(&j.j0 * delta), T::one());
        (self.transition(&o, h), jd)
    }
}

fn augment_derivative<T: Real>(h: &DVector<T>) -> Vec<T> {
    let half = h.len() / 2;
    h.iter()
        .enumerate()
        .map(|(i, &x)| if i < half { T::one() } else { T::lit(2.0) * x })
        .collect()
}

impl<T: Real> TangentModel<T> for ReservoirModel<T> {
    fn hidden_dim(&self) -> usize {
        ReservoirModel::hidden_dim(self)
    }

    fn output_dim(&self) -> usize {
        ReservoirModel::output_dim(self)
    }

    fn readout(&self, h: &DVector<T>) -> DVector<T> {
        ReservoirModel::readout(self, h.as_slice())
    }

    fn transition(&self, o: &DVector<T>, h: &DVector<T>) -> DVector<T> {
        let mut next = h.clone();
        self.advance_in_place(o.as_slice(), &mut next);
        next
    }

    fn jacobians(&self, o: &DVector<T>, h: &DVector<T>) -> Jacobians<T> {
        let next = self.transition(o, h);
        let d: Vec<T> = next.iter().map(|v| T::one() - *v * *v).collect();
        let mut j1 = self.w_hh.to_dense();
        let mut j2 = self.w_in.clone();
        for (i, s) in d.iter().enumerate() {
            j1.row_mut(i).scale_mut(*s);
            j2.row_mut(i).scale_mut(*s);
        }
        let mut j0 = self.w_out.clone();
        for (c, a) in augment_derivative(h).into_iter().enumerate() {
            j0.column_mut(c).scale_mut(a);
        }
        Jacobians { j1, j2, j0 }
    }

    fn closed_loop_step(&self, h: &DVector<T>, delta: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
        let o = TangentModel::readout(self, h);
        let next = self.transition(&o, h);
        let a = augment_derivative(h);
        let mut scaled = delta.clone();
        for (i, s) in a.iter().enumerate() {
            scaled.row_mut(i).scale_mut(*s);
        }
        let through_output = &self.w_out * scaled;
        let mut jd = &self.w_in * through_output;
        let mut col = vec![T::zero(); delta.nrows()];
        for c in 0..delta.ncols() {
            self.w_hh.mul_vec_into(delta.column(c).as_slice(), &mut col);
            for (dst, v) in jd.column_mut(c).iter_mut().zip(&col) {
                *dst += *v;
            }
        }
        for (i, v) in next.iter().enumerate() {
            jd.row_mut(i).scale_mut(T::one() - *v * *v);
        }
        (next, jd)
    }
}

/// Single-layer GRU viewed as `h' = f(o, h)`, `ô = W_o·h`.
#[derive(Debug, Clone, Copy)]
pub struct GruTangent<'a, T> {
    pub layer: &'a GruLayer<T>,
    pub w_o: &'a DMatrix<T>,
}

impl<'a, T: Real> GruTangent<'a, T> {
    pub fn new(model: &'a GatedRnnModel<T>) -> Result<Self> {
        match (model.kind, model.layers.as_slice()) {
            (CellKind::Gru, [Layer::Gru(layer)]) => Ok(Self {
                layer,
                w_o: &model.w_o,
            }),
            (CellKind::Lstm, _) => Err(Error::UnsupportedModel(
                "surrogate spectra need a single hidden vector; LSTM carries two".into(),
            )),
            _ => Err(Error::UnsupportedModel(format!(
                "surrogate spectra support single-layer GRUs, got {} layers",
                model.layers.len()
            ))),
        }
    }
}

fn sig<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> TangentModel<T> for GruTangent<'_, T> {
    fn hidden_dim(&self) -> usize {
        self.layer.hidden()
    }

    fn output_dim(&self) -> usize {
        self.w_o.nrows()
    }

    fn readout(&self, h: &DVector<T>) -> DVector<T> {
        self.w_o * h
    }

    fn transition(&self, o: &DVector<T>, h: &DVector<T>) -> DVector<T> {
        let x = DMatrix::from_column_slice(o.len(), 1, o.as_slice());
        let hp = DMatrix::from_column_slice(h.len(), 1, h.as_slice());
        let (next, _) = gru_forward(self.layer, &x, &hp);
        DVector::from_column_slice(next.as_slice())
    }

    // With a_g = W_g[h; o] + b_g:
    //   dz = z(1−z)·W_z,  dr = r(1−r)·W_r  (rows scaled, split into h / o columns)
    //   dh̃/dh = (1−h̃²)·(W_hh·diag(r) + W_hh·diag(h)·dr_h)
    //   dh̃/do = (1−h̃²)·(W_hh·diag(h)·dr_o + W_ho)
    //   dh'/dh = diag(1−z) + diag(h̃−h)·dz_h + diag(z)·dh̃/dh
    //   dh'/do = diag(h̃−h)·dz_o + diag(z)·dh̃/do
    fn jacobians(&self, o: &DVector<T>, h: &DVector<T>) -> Jacobians<T> {
        let l = self.layer;
        let n = h.len();
        let m = o.len();
        let mut hx = DVector::zeros(n + m);
        hx.rows_mut(0, n).copy_from(h);
        hx.rows_mut(n, m).copy_from(o);
        let z = (&l.w_z * &hx + l.b_z.column(0)).map(sig);
        let r = (&l.w_r * &hx + l.b_r.column(0)).map(sig);
        let mut rhx = hx.clone();
        for i in 0..n {
            rhx[i] = r[i] * h[i];
        }
        let cand = (&l.w_h * &rhx + l.b_h.column(0)).map(|v| v.tanh());

        let scale_rows = |w: &DMatrix<T>, s: &DVector<T>| {
            let mut out = w.clone();
            for i in 0..out.nrows() {
                out.row_mut(i).scale_mut(s[i]);
            }
            out
        };
        let one = T::one();
        let dz = scale_rows(&l.w_z, &z.map(|v| v * (one - v)));
        let dr = scale_rows(&l.w_r, &r.map(|v| v * (one - v)));
        let w_hh = l.w_h.columns(0, n);
        let w_ho = l.w_h.columns(n, m);

        // W_hh·diag(h)
        let mut w_hh_h = w_hh.into_owned();
        for c in 0..n {
            w_hh_h.column_mut(c).scale_mut(h[c]);
        }
        let mut w_hh_r = w_hh.into_owned();
        for c in 0..n {
            w_hh_r.column_mut(c).scale_mut(r[c]);
        }
        let dc_scale = cand.map(|v| one - v * v);
        let dcand_h = scale_rows(&(w_hh_r + &w_hh_h * dr.columns(0, n)), &dc_scale);
        let dcand_o = scale_rows(&(&w_hh_h * dr.columns(n, m) + w_ho), &dc_scale);

        let gap = &cand - h;
        let mut j1 = scale_rows(&dz.columns(0, n).into_owned(), &gap) + scale_rows(&dcand_h, &z);
        for i in 0..n {
            j1[(i, i)] += one - z[i];
        }
        let j2 = scale_rows(&dz.columns(n, m).into_owned(), &gap) + scale_rows(&dcand_o, &z);
        Jacobians {
            j1,
            j2,
            j0: self.w_o.clone(),
        }
    }
}

/// Linear map `h' = A·h` read out through the identity; a test double with a
/// closed-form spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap<T> {
    pub a: DMatrix<T>,
}

impl<T: Real> TangentModel<T> for LinearMap<T> {
    fn hidden_dim(&self) -> usize {
        self.a.nrows()
    }

    fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn readout(&self, h: &DVector<T>) -> DVector<T> {
        h.clone()
    }

    fn transition(&self, _o: &DVector<T>, h: &DVector<T>) -> DVector<T> {
        &self.a * h
    }

    fn jacobians(&self, o: &DVector<T>, _h: &DVector<T>) -> Jacobians<T> {
        let n = self.a.nrows();
        Jacobians {
            j1: self.a.clone(),
            j2: DMatrix::zeros(n, o.len()),
            j0: DMatrix::identity(n, n),
        }
    }
}

impl<T: Real> AnyModel<T> {
    /// The model as a single-hidden-vector map, if it is one.
    pub fn as_tangent(&self) -> Result<Box<dyn TangentModel<T> + '_>> {
        match self {
            AnyModel::Reservoir(m) => Ok(Box::new(m)),
            AnyModel::Rnn(m) => Ok(Box::new(GruTangent::new(m)?)),
        }
    }
}

impl<T: Real, M: TangentModel<T> + ?Sized> TangentModel<T> for &M {
    fn hidden_dim(&self) -> usize {
        (**self).hidden_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn readout(&self, h: &DVector<T>) -> DVector<T> {
        (**self).readout(h)
    }
    fn transition(&self, o: &DVector<T>, h: &DVector<T>) -> DVector<T> {
        (**self).transition(o, h)
    }
    fn jacobians(&self, o: &DVector<T>, h: &DVector<T>) -> Jacobians<T> {
        (**self).jacobians(o, h)
    }
    fn closed_loop_step(&self, h: &DVector<T>, delta: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
        (**self).closed_loop_step(h, delta)
    }
}

/// Jacobian blocks of any supported model at `(o_next, h)`.
pub fn model_jacobians<T: Real>(model: &AnyModel<T>, o_next: &[T], h: &[T]) -> Result<Jacobians<T>> {
    let m = model.as_tangent()?;
    if o_next.len() != m.output_dim() {
        return Err(Error::mismatch("jacobian input", m.output_dim(), o_next.len()));
    }
    if h.len() != m.hidden_dim() {
        return Err(Error::mismatch("jacobian hidden", m.hidden_dim(), h.len()));
    }
    Ok(m.jacobians(&DVector::from_column_slice(o_next), &DVector::from_column_slice(h)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovRunParams {
    /// Teacher-forced warm-up steps; the warm series holds one more sample.
    pub warmup: usize,
    pub exponents: usize,
    /// Maximum closed-loop steps after the tangent spin-up.
    pub max_steps: usize,
    pub reortho_every: usize,
    /// Must be a multiple of `reortho_every`.
    pub check_every: usize,
    pub tolerance: f64,
    /// Model time per step.
    pub dt: f64,
    /// Closed-loop steps that align the deviation vectors before accumulation.
    pub spinup: usize,
    pub seed: u64,
}

impl Default for LyapunovRunParams {
    fn default() -> Self {
        Self {
            warmup: 2000,
            exponents: 1,
            max_steps: 100_000,
            reortho_every: 10,
            check_every: 1000,
            tolerance: 1e-4,
            dt: 1.0,
            spinup: 500,
            seed: 7,
        }
    }
}

impl LyapunovRunParams {
    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.exponents == 0 || self.exponents > hidden {
            return Err(Error::InvalidArgument(format!(
                "exponent count {} must lie in 1..={hidden}",
                self.exponents
            )));
        }
        if self.reortho_every == 0 || self.check_every == 0 || !self.check_every.is_multiple_of(self.reortho_every) {
            return Err(Error::InvalidArgument(format!(
                "check interval {} must be a positive multiple of the QR interval {}",
                self.check_every, self.reortho_every
            )));
        }
        if !(self.dt > 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument("dt must be positive, tolerance non-negative".into()));
        }
        Ok(())
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Spectrum of the closed-loop surrogate map seeded by a teacher-forced warm-up
/// on `warm` (`(warmup + 1) × d_o`, row-major).
pub fn surrogate_spectrum<T: Real, M: TangentModel<T> + ?Sized>(
    model: &M,
    warm: &[T],
    params: &LyapunovRunParams,
) -> Result<LyapunovSpectrum<T>> {
    let d_h = model.hidden_dim();
    let d_o = model.output_dim();
    params.validate(d_h)?;
    if warm.len() != (params.warmup + 1) * d_o {
        return Err(Error::mismatch(
            "lyapunov warm-up series",
            (params.warmup + 1) * d_o,
            warm.len() / d_o.max(1),
        ));
    }
    let mut h = DVector::zeros(d_h);
    for row in warm.chunks_exact(d_o) {
        h = model.transition(&DVector::from_column_slice(row), &h);
    }
    let mut delta: DMatrix<T> = random_orthonormal(d_h, params.exponents, &mut rng(params.seed));

    let bad = |h: &DVector<T>| h.iter().any(|v| !v.is_finite() || v.abs().as_f64() > BLOWUP_THRESHOLD);
    for s in 1..=params.spinup {
        let (next, jd) = model.closed_loop_step(&h, &delta);
        h = next;
        delta = jd;
        if bad(&h) {
            return Err(Error::SurrogateDiverged { step: s, history: Vec::new() });
        }
        if s % params.reortho_every == 0 {
            delta = qr_positive(delta).0;
        }
    }
    delta = qr_positive(delta).0;

    let mut sums = vec![0.0f64; params.exponents];
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut last_qr = 0;
    let mut converged = false;
    for t in 1..=params.max_steps {
        let (next, jd) = model.closed_loop_step(&h, &delta);
        h = next;
        delta = jd;
        if bad(&h) {
            return Err(Error::SurrogateDiverged {
                step: params.spinup + t,
                history,
            });
        }
        if t % params.reortho_every != 0 {
            continue;
        }
        let (q, r) = qr_positive(delta);
        delta = q;
        for (acc, k) in sums.iter_mut().zip(0..params.exponents) {
            *acc += r[(k, k)].as_f64().ln();
        }
        last_qr = t;
        if t % params.check_every == 0 {
            let l = sorted_desc(sums.iter().map(|s| s / (t as f64 * params.dt)).collect());
            let done = history
                .last()
                .is_some_and(|prev| l2_distance(prev, &l) < params.tolerance);
            history.push(l);
            if done {
                converged = true;
                break;
            }
        }
    }
    let exponents = if last_qr == 0 {
        vec![0.0; params.exponents]
    } else {
        sorted_desc(sums.iter().map(|s| s / (last_qr as f64 * params.dt)).collect())
    };
    let lit = |v: &[f64]| v.iter().map(|x| T::lit(*x)).collect::<Vec<T>>();
    let exponents = lit(&exponents);
    let ky = kaplan_yorke(&exponents);
    Ok(LyapunovSpectrum {
        exponents,
        converged,
        history: history.iter().map(|v| lit(v)).collect(),
        ky_dimension: ky.dimension,
        ky_saturated: ky.saturated,
    })
}

/// Surrogate spectrum for an [`AnyModel`], rejecting unsupported kinds.
pub fn surrogate_spectrum_any<T: Real>(
    model: &AnyModel<T>,
    warm: &[T],
    params: &LyapunovRunParams,
) -> Result<LyapunovSpectrum<T>> {
    let m = model.as_tangent()?;
    surrogate_spectrum(m.as_ref(), warm, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gated_rnn::GatedRnnModel;
    use crate::reservoir::{build_reservoir, ReservoirParams};

    #[test]
    fn kaplan_yorke_cases() {
        let ky = kaplan_yorke(&[0.5, -1.0]);
        assert_eq!(ky.dimension, 1.5);
        assert!(!ky.saturated);
        assert_eq!(kaplan_yorke(&[-0.1, -1.0]).dimension, 0.0);
        let sat = kaplan_yorke(&[0.3, 0.1]);
        assert_eq!(sat.dimension, 2.0);
        assert!(sat.saturated);
        // 0.9 + 0.0 − 0.5 = 0.4 ≥ 0, then −1.0 breaks: 3 + 0.4/1.0.
        assert!((kaplan_yorke(&[0.9, 0.0, -0.5, -1.0]).dimension - 3.4f64).abs() < 1e-15);
    }

    fn params(n: usize) -> LyapunovRunParams {
        LyapunovRunParams {
            warmup: 0,
            exponents: n,
            max_steps: 2000,
            reortho_every: 10,
            check_every: 100,
            tolerance: 0.0,
            dt: 1.0,
            spinup: 200,
            seed: 3,
        }
    }

    #[test]
    fn diagonal_map_recovers_logs() {
        let m = LinearMap {
            a: DMatrix::from_diagonal(&DVector::from_vec(vec![0.9f64, 0.5])),
        };
        for seed in [1, 2, 3] {
            let s = surrogate_spectrum(&m, &[0.0, 0.0], &LyapunovRunParams { seed, ..params(2) }).unwrap();
            assert!((s.exponents[0] - 0.9f64.ln()).abs() < 1e-8, "{:?}", s.exponents);
            assert!((s.exponents[1] - 0.5f64.ln()).abs() < 1e-8);
        }
    }

    #[test]
    fn rotation_has_zero_exponents() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let m = LinearMap {
            a: DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
        };
        let out = surrogate_spectrum(&m, &[0.1, 0.2], &params(2)).unwrap();
        assert!(out.exponents.iter().all(|e| e.abs() < 1e-6), "{:?}", out.exponents);
    }

    #[test]
    fn linear_double_jacobian_is_a() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let m = LinearMap { a: a.clone() };
        let h = DVector::from_vec(vec![1.0, 2.0]);
        let j = m.jacobians(&h, &h);
        assert_eq!(&j.j1 + &j.j2 * &j.j0, a);
    }

    fn rc() -> ReservoirModel<f64> {
        let mut m: ReservoirModel<f64> = build_reservoir(&ReservoirParams {
            hidden: 20,
            input_dim: 3,
            output_dim: 3,
            ..Default::default()
        })
        .unwrap();
        m.w_out = crate::linalg::gaussian_matrix(3, 20, &mut rng(4)) * 0.1;
        m
    }

    #[test]
    fn rc_jacobian_at_origin_is_raw_weights() {
        let m = rc();
        let z = DVector::zeros(20);
        let j = m.jacobians(&DVector::zeros(3), &z);
        assert_eq!(j.j1, m.w_hh.to_dense());
        assert_eq!(j.j2, m.w_in);
    }

    fn fd_check(model: &dyn TangentModel<f64>, o: &DVector<f64>, h: &DVector<f64>) {
        let j = model.jacobians(o, h);
        let eps = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
        for c in 0..h.len() {
            let mut hp = h.clone();
            hp[c] += eps;
            let mut hm = h.clone();
            hm[c] -= eps;
            let d1 = (model.transition(o, &hp) - model.transition(o, &hm)) / (2.0 * eps);
            let d0 = (model.readout(&hp) - model.readout(&hm)) / (2.0 * eps);
            for i in 0..h.len() {
                assert!(rel(j.j1[(i, c)], d1[i]) < 1e-5, "J1[{i},{c}]");
            }
            for i in 0..o.len() {
                assert!(rel(j.j0[(i, c)], d0[i]) < 1e-5, "J0[{i},{c}]");
            }
        }
        for c in 0..o.len() {
            let mut op = o.clone();
            op[c] += eps;
            let mut om = o.clone();
            om[c] -= eps;
            let d2 = (model.transition(&op, h) - model.transition(&om, h)) / (2.0 * eps);
            for i in 0..h.len() {
                assert!(rel(j.j2[(i, c)], d2[i]) < 1e-5, "J2[{i},{c}]");
            }
        }
    }

    #[test]
    fn rc_jacobians_match_finite_differences() {
        let m = rc();
        let mut r = rng(8);
        let h = DVector::from_column_slice(crate::linalg::gaussian_matrix::<f64>(20, 1, &mut r).as_slice()) * 0.3;
        let o = DVector::from_vec(vec![0.2, -0.4, 0.1]);
        fd_check(&m, &o, &h);
    }

    #[test]
    fn gru_jacobians_match_finite_differences() {
        let mut m: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Gru, 3, 6, 3, 1, 5).unwrap();
        let mut r = rng(9);
        for b in m.blocks_mut() {
            if b.ncols() == 1 {
                *b += crate::linalg::gaussian_matrix::<f64>(b.nrows(), 1, &mut r) * 0.3;
            }
        }
        let g = GruTangent::new(&m).unwrap();
        let h = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.0, -0.7, 0.1]);
        let o = DVector::from_vec(vec![0.4, -1.0, 0.25]);
        fd_check(&g, &o, &h);
    }

    #[test]
    fn sparse_closed_loop_matches_dense_jacobian() {
        let m = rc();
        let h = DVector::from_fn(20, |i, _| ((i as f64) * 0.37).sin() * 0.5);
        let delta: DMatrix<f64> = random_orthonormal(20, 3, &mut rng(2));
        let (next, jd) = m.closed_loop_step(&h, &delta);
        let o = TangentModel::readout(&m, &h);
        let j = m.jacobians(&o, &h);
        let dense = (&j.j1 + &j.j2 * &j.j0) * &delta;
        assert!((jd - dense).norm() < 1e-12);
        assert_eq!(next, m.transition(&o, &h));
    }

    #[test]
    fn lstm_and_stacked_models_are_rejected() {
        let lstm: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Lstm, 2, 4, 2, 1, 1).unwrap();
        assert!(matches!(GruTangent::new(&lstm), Err(Error::UnsupportedModel(_))));
        let deep: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Gru, 2, 4, 2, 2, 1).unwrap();
        assert!(matches!(
            model_jacobians(&AnyModel::Rnn(deep), &[0.0, 0.0], &[0.0; 4]),
            Err(Error::UnsupportedModel(_))
        ));
    }

    #[test]
    fn invalid_run_params() {
        let m = LinearMap { a: DMatrix::<f64>::identity(2, 2) };
        let p = LyapunovRunParams { check_every: 15, ..params(2) };
        assert!(surrogate_spectrum(&m, &[0.0, 0.0], &p).is_err());
        assert!(surrogate_spectrum(&m, &[0.0, 0.0], &params(3)).is_err());
    }
}
