use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;

use crate::dynamics::ks::{ks_initial_condition, KsSolver};
use crate::dynamics::lorenz96::{check_blowup, lorenz96_rhs_into, lorenz96_tangent_into};
use crate::dynamics::{initial_condition, rk4::Rk4, SystemConfig};
use crate::linalg::{qr_positive, random_orthonormal, rng, gaussian_matrix};
use crate::lyapunov::{kaplan_yorke, LyapunovSpectrum};
use crate::{Error, Result};

/// Controls for the tangent-space (QR) Lyapunov computation.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentParams {
    /// Number of leading exponents.
    pub exponents: usize,
    /// Steps between QR re-orthonormalizations.
    pub reortho_every: usize,
    /// Accumulation horizon in time units.
    pub horizon: f64,
    /// Time the tangent vectors are evolved (with QR) before accumulation.
    pub spinup: f64,
    /// Steps between recorded estimates; rounded up to a multiple of `reortho_every`.
    pub check_every: usize,
    /// L2 change between successive estimates below which the run counts as converged.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for TangentParams {
    fn default() -> Self {
        Self {
            exponents: 1,
            reortho_every: 10,
            horizon: 500.0,
            spinup: 20.0,
            check_every: 1000,
            tolerance: 1e-3,
            seed: 7,
        }
    }
}

/// Lyapunov spectrum of the true equations: tangent vectors are evolved with
/// the exact linearisation alongside the trajectory (same integrator) and
/// re-orthonormalised by QR every `reortho_every` steps.
pub fn true_lyapunov_spectrum(
    system: &SystemConfig,
    params: &TangentParams,
) -> Result<LyapunovSpectrum<f64>> {
    let dim = system.state_dim();
    if params.exponents == 0 || params.exponents > dim {
        return Err(Error::InvalidArgument(format!(
            "exponent count {} must lie in 1..={dim}",
            params.exponents
        )));
    }
    if params.reortho_every == 0 || !(params.horizon > 0.0) {
        return Err(Error::InvalidArgument(
            "need reortho_every >= 1 and a positive horizon".into(),
        ));
    }
    match system {
        SystemConfig::Lorenz96(cfg) => {
            cfg.validate()?;
            let mut flow = Lorenz96Tangent::new(cfg.grid_size, cfg.forcing, cfg.dt, params, cfg.seed);
            flow.settle(cfg.transient_steps())?;
            accumulate(&mut flow, cfg.dt, params)
        }
        SystemConfig::KuramotoSivashinsky(cfg) => {
            let mut flow = KsTangent::new(cfg, params)?;
            flow.settle(cfg.transient_steps())?;
            accumulate(&mut flow, cfg.dt, params)
        }
    }
}

trait TangentFlow {
    /// Evolve the base trajectory without tangents.
    fn settle(&mut self, steps: usize) -> Result<()>;
    fn step(&mut self, step: usize) -> Result<()>;
    /// QR of the tangent block; replaces it with `Q` and returns `diag(R)`.
    fn reorthonormalize(&mut self) -> Vec<f64>;
}

fn accumulate(flow: &mut impl TangentFlow, dt: f64, p: &TangentParams) -> Result<LyapunovSpectrum<f64>> {
    let spin = (p.spinup / dt).round() as usize;
    for s in 1..=spin {
        flow.step(s)?;
        if s % p.reortho_every == 0 {
            flow.reorthonormalize();
        }
    }
    flow.reorthonormalize();

    let steps = ((p.horizon / dt).round() as usize).max(p.reortho_every);
    let check = p.check_every.max(1).div_ceil(p.reortho_every) * p.reortho_every;
    let mut sums = vec![0.0f64; p.exponents];
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut last_change = f64::INFINITY;
    let mut last_norm_step = 0;
    for s in 1..=steps {
        flow.step(s)?;
        if s % p.reortho_every == 0 || s == steps {
            for (acc, r) in sums.iter_mut().zip(flow.reorthonormalize()) {
                *acc += r.ln();
            }
            last_norm_step = s;
            if s % check == 0 || s == steps {
                let est = sorted_desc(sums.iter().map(|v| v / (s as f64 * dt)).collect());
                if let Some(prev) = history.last() {
                    last_change = l2_distance(&est, prev);
                }
                history.push(est);
            }
        }
    }
    debug_assert_eq!(last_norm_step, steps);
    let exponents = history.last().cloned().unwrap_or_default();
    let ky = kaplan_yorke(&exponents);
    Ok(LyapunovSpectrum {
        exponents,
        converged: last_change < p.tolerance,
        history,
        ky_dimension: ky.dimension,
        ky_saturated: ky.saturated,
    })
}

pub(crate) fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    v
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct Lorenz96Tangent {
    j: usize,
    k: usize,
    forcing: f64,
    dt: f64,
    /// `[x, v_1, …, v_k]` flattened.
    y: Vec<f64>,
    rk: Rk4<f64>,
}

impl Lorenz96Tangent {
    fn new(j: usize, forcing: f64, dt: f64, p: &TangentParams, seed: u64) -> Self {
        let x: Vec<f64> = initial_condition(j, forcing, seed);
        let v: DMatrix<f64> = random_orthonormal(j, p.exponents, &mut rng(p.seed));
        let mut y = x;
        y.extend_from_slice(v.as_slice());
        Self {
            j,
            k: p.exponents,
            forcing,
            dt,
            rk: Rk4::new(y.len()),
            y,
        }
    }
}

impl TangentFlow for Lorenz96Tangent {
    fn settle(&mut self, steps: usize) -> Result<()> {
        let (j, f) = (self.j, self.forcing);
        let mut rk = Rk4::new(j);
        let rhs = |s: &[f64], d: &mut [f64]| lorenz96_rhs_into(s, f, d).expect("J >= 4");
        let x = &mut self.y[..j];
        for s in 0..steps {
            rk.step_in_place(&rhs, x, self.dt);
            check_blowup(x, s)?;
        }
        Ok(())
    }

    fn step(&mut self, step: usize) -> Result<()> {
        let (j, k, f) = (self.j, self.k, self.forcing);
        let rhs = |s: &[f64], d: &mut [f64]| {
            let (x, vs) = s.split_at(j);
            let (dx, dvs) = d.split_at_mut(j);
            lorenz96_rhs_into(x, f, dx).expect("J >= 4");
            for c in 0..k {
                lorenz96_tangent_into(x, &vs[c * j..(c + 1) * j], &mut dvs[c * j..(c + 1) * j]);
            }
        };
        self.rk.step_in_place(&rhs, &mut self.y, self.dt);
        check_blowup(&self.y[..j], step)
    }

    fn reorthonormalize(&mut self) -> Vec<f64> {
        let j = self.j;
        let v = DMatrix::from_column_slice(j, self.k, &self.y[j..]);
        let (q, r) = qr_positive(v);
        self.y[j..].copy_from_slice(q.as_slice());
        r.diagonal().iter().copied().collect()
    }
}

struct KsTangent {
    solver: KsSolver,
    v: Vec<Complex64>,
    tangents: Vec<Vec<Complex64>>,
    nodes: usize,
}

impl KsTangent {
    fn new(cfg: &crate::dynamics::KsConfig, p: &TangentParams) -> Result<Self> {
        let mut solver = KsSolver::from_config(cfg)?;
        let u0 = ks_initial_condition(cfg.nodes, cfg.seed);
        let v = solver.to_spectral(&u0);
        let mut g: DMatrix<f64> = gaussian_matrix(cfg.nodes, p.exponents, &mut rng(p.seed));
        for mut col in g.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        let (q, _) = qr_positive(g);
        let tangents = q
            .column_iter()
            .map(|c| {
                let mut w = solver.to_spectral(c.as_slice());
                w[0] = Complex64::default();
                w
            })
            .collect();
        Ok(Self {
            solver,
            v,
            tangents,
            nodes: cfg.nodes,
        })
    }
}

impl TangentFlow for KsTangent {
    fn settle(&mut self, steps: usize) -> Result<()> {
        for s in 0..steps {
            self.solver.step(&mut self.v);
            if s % 64 == 0 {
                check_blowup(&self.solver.to_physical(&self.v), s)?;
            }
        }
        Ok(())
    }

    fn step(&mut self, step: usize) -> Result<()> {
        self.solver.step_with_tangents(&mut self.v, &mut self.tangents);
        if step.is_multiple_of(64) {
            check_blowup(&self.solver.to_physical(&self.v), step)?;
        }
        Ok(())
    }

    fn reorthonormalize(&mut self) -> Vec<f64> {
        let k = self.tangents.len();
        let mut m = DMatrix::zeros(self.nodes, k);
        for (c, w) in self.tangents.iter().enumerate() {
            let u = self.solver.to_physical(w);
            m.column_mut(c).copy_from_slice(&u);
        }
        let (q, r) = qr_positive(m);
        for (c, w) in self.tangents.iter_mut().enumerate() {
            let mut spec = self.solver.to_spectral(q.column(c).as_slice());
            // Keep the tangent block in the zero-mean subspace.
            spec[0] = Complex64::default();
            *w = spec;
        }
        r.diagonal().iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{KsConfig, Lorenz96Config};

    #[test]
    fn rejects_too_many_exponents() {
        let sys = SystemConfig::Lorenz96(Lorenz96Config {
            grid_size: 5,
            ..Default::default()
        });
        let p = TangentParams {
            exponents: 6,
            ..Default::default()
        };
        assert!(true_lyapunov_spectrum(&sys, &p).is_err());
    }

    #[test]
    fn short_lorenz96_run_is_sorted_and_dissipative() {
        let sys = SystemConfig::Lorenz96(Lorenz96Config {
            grid_size: 8,
            t_transient: 20.0,
            t_total: 21.0,
            ..Default::default()
        });
        let p = TangentParams {
            exponents: 8,
            horizon: 50.0,
            spinup: 5.0,
            check_every: 500,
            ..Default::default()
        };
        let s = true_lyapunov_spectrum(&sys, &p).unwrap();
        assert!(s.exponents.windows(2).all(|w| w[0] >= w[1]));
        // Divergence of the vector field is −J, so the full spectrum sums to −J.
        let sum: f64 = s.exponents.iter().sum();
        assert!((sum + 8.0).abs() < 0.05, "sum {sum}");
        assert!(!s.history.is_empty());
    }

    #[test]
    fn ks_tangents_stay_zero_mean() {
        let cfg = KsConfig {
            domain_length: 22.0,
            nodes: 32,
            t_transient: 10.0,
            t_total: 11.0,
            ..Default::default()
        };
        let p = TangentParams {
            exponents: 3,
            ..Default::default()
        };
        let mut flow = KsTangent::new(&cfg, &p).unwrap();
        flow.settle(40).unwrap();
        for s in 1..=20 {
            flow.step(s).unwrap();
        }
        flow.reorthonormalize();
        for w in &flow.tangents {
            assert!(w[0].norm() < 1e-12);
        }
    }
}
