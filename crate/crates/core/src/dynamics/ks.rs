//! Kuramoto-Sivashinsky `u_t = −ν u_xxxx − u_xx − u u_x` on a periodic domain,
//! integrated pseudo-spectrally with fourth-order exponential time differencing
//! (ETDRK4).
//!
//! The state is carried as the full complex DFT of the real grid field. The
//! quadratic term is formed in physical space and truncated with the 2/3 rule.
//! The zero mode is neutral under both the linear and nonlinear parts, so the
//! mean of the field is conserved exactly; tangent vectors are kept in the
//! zero-mean subspace.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dynamics::{lorenz96::check_blowup, TimeSeriesDataset};
use crate::linalg::{gaussian, rng};
use crate::{Error, Result};

/// Contour points used for the φ-function averages.
const CONTOUR_POINTS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct KsConfig {
    pub domain_length: f64,
    pub viscosity: f64,
    /// Number of periodic grid nodes (`Δx = L / D`).
    pub nodes: usize,
    pub dt: f64,
    pub t_transient: f64,
    pub t_total: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for KsConfig {
    fn default() -> Self {
        Self {
            domain_length: 200.0,
            viscosity: 1.0,
            nodes: 512,
            dt: 0.25,
            t_transient: 1.0e4,
            t_total: 6.0e4,
            train_fraction: 0.5,
            seed: 1,
        }
    }
}

impl KsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 8 || !self.nodes.is_multiple_of(2) {
            return Err(Error::InvalidDimension(format!(
                "KS grid needs an even node count >= 8, got {}",
                self.nodes
            )));
        }
        if !(self.dt > 0.0 && self.domain_length > 0.0 && self.viscosity > 0.0) {
            return Err(Error::InvalidConfig(
                "KS needs positive dt, domain length and viscosity".into(),
            ));
        }
        if !(self.t_transient >= 0.0 && self.t_transient < self.t_total) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= t_transient < t_total, got {} and {}",
                self.t_transient, self.t_total
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig("train_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.domain_length / self.nodes as f64
    }

    pub fn transient_steps(&self) -> usize {
        (self.t_transient / self.dt).round() as usize
    }

    pub fn total_steps(&self) -> usize {
        (self.t_total / self.dt).round() as usize
    }
}

/// Precomputed ETDRK4 coefficients and FFT plans for one grid and step size.
pub struct KsSolver {
    n: usize,
    /// Wavenumbers used for the first derivative (Nyquist set to zero).
    k_deriv: Vec<f64>,
    linear: Vec<f64>,
    dealias: Vec<bool>,
    e: Vec<f64>,
    e2: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl std::fmt::Debug for KsSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KsSolver").field("n", &self.n).finish_non_exhaustive()
    }
}

impl KsSolver {
    pub fn new(domain_length: f64, viscosity: f64, nodes: usize, dt: f64) -> Result<Self> {
        if nodes < 8 || !nodes.is_multiple_of(2) {
            return Err(Error::InvalidDimension(format!(
                "KS grid needs an even node count >= 8, got {nodes}"
            )));
        }
        let n = nodes;
        let mut k_deriv = vec![0.0; n];
        let mut linear = vec![0.0; n];
        let mut dealias = vec![false; n];
        for i in 0..n {
            let m: i64 = if i <= n / 2 { i as i64 } else { i as i64 - n as i64 };
            let k = 2.0 * PI * m as f64 / domain_length;
            linear[i] = k * k - viscosity * k * k * k * k;
            if i != n / 2 {
                k_deriv[i] = k;
            }
            dealias[i] = (m.unsigned_abs() as usize) <= n / 3;
        }

        let roots: Vec<Complex64> = (0..CONTOUR_POINTS)
            .map(|j| Complex64::from_polar(1.0, PI * (2.0 * j as f64 + 1.0) / CONTOUR_POINTS as f64))
            .collect();
        let mean_over = |lin: f64, f: &dyn Fn(Complex64) -> Complex64| -> f64 {
            let sum: Complex64 = roots.iter().map(|r| f(Complex64::new(dt * lin, 0.0) + r)).sum();
            (sum / CONTOUR_POINTS as f64).re
        };
        let mut e = vec![0.0; n];
        let mut e2 = vec![0.0; n];
        let mut q = vec![0.0; n];
        let mut f1 = vec![0.0; n];
        let mut f2 = vec![0.0; n];
        let mut f3 = vec![0.0; n];
        for i in 0..n {
            let l = linear[i];
            e[i] = (dt * l).exp();
            e2[i] = (dt * l / 2.0).exp();
            q[i] = dt * mean_over(l, &|z| ((z / 2.0).exp() - 1.0) / z);
            f1[i] = dt
                * mean_over(l, &|z| {
                    (-4.0 - z + z.exp() * (4.0 - 3.0 * z + z * z)) / (z * z * z)
                });
            f2[i] = dt * mean_over(l, &|z| (2.0 + z + z.exp() * (z - 2.0)) / (z * z * z));
            f3[i] = dt
                * mean_over(l, &|z| (-4.0 - 3.0 * z - z * z + z.exp() * (4.0 - z)) / (z * z * z));
        }

        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Ok(Self {
            n,
            k_deriv,
            linear,
            dealias,
            e,
            e2,
            q,
            f1,
            f2,
            f3,
            forward,
            inverse,
            scratch: vec![Complex64::default(); scratch_len],
        })
    }

    pub fn from_config(cfg: &KsConfig) -> Result<Self> {
        cfg.validate()?;
        Self::new(cfg.domain_length, cfg.viscosity, cfg.nodes, cfg.dt)
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    /// Linear growth rate `k² − ν k⁴` of each DFT bin.
    pub fn linear_rates(&self) -> &[f64] {
        &self.linear
    }

    pub fn to_spectral(&mut self, u: &[f64]) -> Vec<Complex64> {
        let mut v: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward.process_with_scratch(&mut v, &mut self.scratch);
        v
    }

    pub fn to_physical(&mut self, v: &[Complex64]) -> Vec<f64> {
        let mut buf = v.to_vec();
        self.inverse.process_with_scratch(&mut buf, &mut self.scratch);
        let scale = 1.0 / self.n as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// `−(ik/2)·P[FFT(u²)]` for the field `v`; also returns `u` in physical space.
    fn nonlinear(&mut self, v: &[Complex64]) -> (Vec<Complex64>, Vec<f64>) {
        let u = self.to_physical(v);
        let mut w: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x * x, 0.0)).collect();
        self.forward.process_with_scratch(&mut w, &mut self.scratch);
        for i in 0..self.n {
            w[i] = if self.dealias[i] {
                Complex64::new(0.0, -0.5 * self.k_deriv[i]) * w[i]
            } else {
                Complex64::default()
            };
        }
        (w, u)
    }

    /// Linearised nonlinear term `−ik·P[FFT(u·δu)]` around the physical field `u`.
    fn nonlinear_tangent(&mut self, u: &[f64], w: &[Complex64]) -> Vec<Complex64> {
        let du = self.to_physical(w);
        let mut p: Vec<Complex64> = u
            .iter()
            .zip(&du)
            .map(|(a, b)| Complex64::new(a * b, 0.0))
            .collect();
        self.forward.process_with_scratch(&mut p, &mut self.scratch);
        for i in 0..self.n {
            p[i] = if self.dealias[i] {
                Complex64::new(0.0, -self.k_deriv[i]) * p[i]
            } else {
                Complex64::default()
            };
        }
        p
    }

    /// Advances the spectral state by one step.
    pub fn step(&mut self, v: &mut [Complex64]) {
        self.step_with_tangents(v, &mut []);
    }

    /// Advances the state and a set of spectral tangent vectors together; the
    /// tangents see the linearised nonlinear term evaluated at each base stage.
    pub fn step_with_tangents(&mut self, v: &mut [Complex64], tangents: &mut [Vec<Complex64>]) {
        let n = self.n;
        let (nv, u_v) = self.nonlinear(v);
        let a: Vec<Complex64> = (0..n).map(|i| self.e2[i] * v[i] + self.q[i] * nv[i]).collect();
        let (na, u_a) = self.nonlinear(&a);
        let b: Vec<Complex64> = (0..n).map(|i| self.e2[i] * v[i] + self.q[i] * na[i]).collect();
        let (nb, u_b) = self.nonlinear(&b);
        let c: Vec<Complex64> = (0..n)
            .map(|i| self.e2[i] * a[i] + self.q[i] * (2.0 * nb[i] - nv[i]))
            .collect();
        let (nc, u_c) = self.nonlinear(&c);

        for w in tangents.iter_mut() {
            let nw = self.nonlinear_tangent(&u_v, w);
            let wa: Vec<Complex64> =
                (0..n).map(|i| self.e2[i] * w[i] + self.q[i] * nw[i]).collect();
            let nwa = self.nonlinear_tangent(&u_a, &wa);
            let wb: Vec<Complex64> =
                (0..n).map(|i| self.e2[i] * w[i] + self.q[i] * nwa[i]).collect();
            let nwb = self.nonlinear_tangent(&u_b, &wb);
            let wc: Vec<Complex64> = (0..n)
                .map(|i| self.e2[i] * wa[i] + self.q[i] * (2.0 * nwb[i] - nw[i]))
                .collect();
            let nwc = self.nonlinear_tangent(&u_c, &wc);
            for i in 0..n {
                w[i] = self.e[i] * w[i]
                    + self.f1[i] * nw[i]
                    + 2.0 * self.f2[i] * (nwa[i] + nwb[i])
                    + self.f3[i] * nwc[i];
            }
        }

        for i in 0..n {
            v[i] = self.e[i] * v[i]
                + self.f1[i] * nv[i]
                + 2.0 * self.f2[i] * (na[i] + nb[i])
                + self.f3[i] * nc[i];
        }
        hermitize(v);
        for w in tangents.iter_mut() {
            hermitize(w);
        }
    }

    /// Integrates a physical initial field for `steps` steps and returns the final field.
    pub fn integrate(&mut self, u0: &[f64], steps: usize) -> Vec<f64> {
        let mut v = self.to_spectral(u0);
        for _ in 0..steps {
            self.step(&mut v);
        }
        self.to_physical(&v)
    }
}

/// Projects a spectrum onto the transforms of real fields. Rounding leaves a
/// small anti-Hermitian part that only the linear operator acts on, so its
/// long-wave modes would otherwise grow without bound.
fn hermitize(v: &mut [Complex64]) {
    let n = v.len();
    v[0].im = 0.0;
    v[n / 2].im = 0.0;
    for i in 1..n / 2 {
        let avg = (v[i] + v[n - i].conj()) * 0.5;
        v[i] = avg;
        v[n - i] = avg.conj();
    }
}

/// Zero-mean Gaussian perturbation of amplitude 1e−3 around the zero field.
pub(crate) fn ks_initial_condition(nodes: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut u: Vec<f64> = (0..nodes).map(|_| 1e-3 * gaussian::<f64>(&mut r)).collect();
    let mean = u.iter().sum::<f64>() / nodes as f64;
    u.iter_mut().for_each(|x| *x -= mean);
    u
}

pub fn simulate_ks(cfg: &KsConfig) -> Result<TimeSeriesDataset<f64>> {
    let mut solver = KsSolver::from_config(cfg)?;
    let u0 = ks_initial_condition(cfg.nodes, cfg.seed);
    simulate_ks_from(cfg, &mut solver, &u0)
}

pub fn simulate_ks_from(
    cfg: &KsConfig,
    solver: &mut KsSolver,
    u0: &[f64],
) -> Result<TimeSeriesDataset<f64>> {
    if u0.len() != cfg.nodes {
        return Err(Error::mismatch("KS initial field", cfg.nodes, u0.len()));
    }
    let mut v = solver.to_spectral(u0);
    let transient = cfg.transient_steps();
    let total = cfg.total_steps();
    let retained = total - transient;
    let mut values = Vec::with_capacity(retained * cfg.nodes);
    for step in 0..total {
        solver.step(&mut v);
        if step >= transient {
            let u = solver.to_physical(&v);
            check_blowup(&u, step)?;
            values.extend_from_slice(&u);
        } else if step % 64 == 0 {
            check_blowup(&solver.to_physical(&v), step)?;
        }
    }
    let split = ((retained as f64) * cfg.train_fraction).floor().max(1.0) as usize;
    TimeSeriesDataset::new(values, cfg.nodes, cfg.dt, split.min(retained))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_stays_zero() {
        let mut s = KsSolver::new(22.0, 1.0, 32, 0.25).unwrap();
        let u = s.integrate(&[0.0; 32], 200);
        assert!(u.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn phi_functions_match_closed_form_away_from_zero() {
        let dt = 0.25;
        let s = KsSolver::new(22.0, 1.0, 32, dt).unwrap();
        for i in 0..32 {
            let z = dt * s.linear[i];
            if z.abs() > 0.5 {
                let q = dt * ((z / 2.0).exp() - 1.0) / z;
                let f2 = dt * (2.0 + z + z.exp() * (z - 2.0)) / z.powi(3);
                assert!((s.q[i] - q).abs() < 1e-10 * q.abs().max(1e-3));
                assert!((s.f2[i] - f2).abs() < 1e-9 * f2.abs().max(1e-3));
            }
        }
        // Zero mode: φ limits Q = dt/2, f1 = f3 = dt/6, f2 = dt/6.
        assert!((s.q[0] - dt / 2.0).abs() < 1e-12);
        assert!((s.f1[0] - dt / 6.0).abs() < 1e-12);
        assert!((s.f2[0] - dt / 6.0).abs() < 1e-12);
        assert!((s.f3[0] - dt / 6.0).abs() < 1e-12);
    }

    #[test]
    fn mean_is_conserved() {
        let mut s = KsSolver::new(22.0, 1.0, 64, 0.25).unwrap();
        let u0: Vec<f64> = (0..64)
            .map(|i| 0.3 + (2.0 * PI * i as f64 / 64.0).cos())
            .collect();
        let u = s.integrate(&u0, 100);
        let m = u.iter().sum::<f64>() / 64.0;
        assert!((m - 0.3).abs() < 1e-12);
    }

    #[test]
    fn long_runs_stay_bounded_and_real() {
        let mut s = KsSolver::new(60.0, 1.0, 128, 0.25).unwrap();
        let u0 = ks_initial_condition(128, 3);
        let mut v = s.to_spectral(&u0);
        for _ in 0..4000 {
            s.step(&mut v);
        }
        for i in 1..64 {
            assert_eq!(v[i], v[128 - i].conj());
        }
        let u = s.to_physical(&v);
        assert!(u.iter().all(|x| x.abs() < 10.0));
    }

    #[test]
    fn odd_grid_is_rejected() {
        assert!(KsSolver::new(22.0, 1.0, 31, 0.25).is_err());
        assert!(KsConfig {
            nodes: 6,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
