use crate::dynamics::{initial_condition, rk4::Rk4, TimeSeriesDataset, BLOWUP_THRESHOLD};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Lorenz96Config {
    /// Number of sites `J` on the latitude circle.
    pub grid_size: usize,
    pub forcing: f64,
    pub dt: f64,
    /// Integration time discarded before sampling starts.
    pub t_transient: f64,
    /// Total integration time including the transient.
    pub t_total: f64,
    /// Fraction of retained samples assigned to the training split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            grid_size: 40,
            forcing: 8.0,
            dt: 0.01,
            t_transient: 1000.0,
            t_total: 3000.0,
            train_fraction: 0.5,
            seed: 1,
        }
    }
}

impl Lorenz96Config {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 4 {
            return Err(Error::InvalidDimension(format!(
                "Lorenz-96 needs at least 4 sites, got {}",
                self.grid_size
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
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

    pub fn transient_steps(&self) -> usize {
        (self.t_transient / self.dt).round() as usize
    }

    pub fn total_steps(&self) -> usize {
        (self.t_total / self.dt).round() as usize
    }
}

/// `dx_j/dt = (x_{j+1} − x_{j−2}) x_{j−1} − x_j + F` with periodic indices.
pub fn lorenz96_rhs<T: Real>(state: &[T], forcing: T) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); state.len()];
    lorenz96_rhs_into(state, forcing, &mut out)?;
    Ok(out)
}

pub fn lorenz96_rhs_into<T: Real>(x: &[T], forcing: T, out: &mut [T]) -> Result<()> {
    let n = x.len();
    if n < 4 {
        return Err(Error::InvalidDimension(format!(
            "Lorenz-96 state needs at least 4 components, got {n}"
        )));
    }
    for j in 0..n {
        let xp1 = x[(j + 1) % n];
        let xm1 = x[(j + n - 1) % n];
        let xm2 = x[(j + n - 2) % n];
        out[j] = (xp1 - xm2) * xm1 - x[j] + forcing;
    }
    Ok(())
}

/// Tangent flow `J(x)·v` of Lorenz-96, using the exact cyclic stencil Jacobian.
pub fn lorenz96_tangent_into<T: Real>(x: &[T], v: &[T], out: &mut [T]) {
    let n = x.len();
    for j in 0..n {
        let (jp1, jm1, jm2) = ((j + 1) % n, (j + n - 1) % n, (j + n - 2) % n);
        out[j] = (v[jp1] - v[jm2]) * x[jm1] + (x[jp1] - x[jm2]) * v[jm1] - v[j];
    }
}

/// Dense Jacobian of the Lorenz-96 vector field at `x`.
pub fn lorenz96_jacobian<T: Real>(x: &[T]) -> nalgebra::DMatrix<T> {
    let n = x.len();
    let mut jac = nalgebra::DMatrix::zeros(n, n);
    for j in 0..n {
        let (jp1, jm1, jm2) = ((j + 1) % n, (j + n - 1) % n, (j + n - 2) % n);
        jac[(j, jp1)] += x[jm1];
        jac[(j, jm2)] -= x[jm1];
        jac[(j, jm1)] += x[jp1] - x[jm2];
        jac[(j, j)] -= T::one();
    }
    jac
}

/// Integrates the configured system and returns the post-transient trajectory
/// sampled every `dt`.
pub fn simulate_lorenz96(cfg: &Lorenz96Config) -> Result<TimeSeriesDataset<f64>> {
    cfg.validate()?;
    let j = cfg.grid_size;
    let mut x: Vec<f64> = initial_condition(j, cfg.forcing, cfg.seed);
    let mut stepper = Rk4::new(j);
    let forcing = cfg.forcing;
    let rhs = |s: &[f64], d: &mut [f64]| {
        lorenz96_rhs_into(s, forcing, d).expect("validated dimension");
    };
    let transient = cfg.transient_steps();
    let total = cfg.total_steps();
    let retained = total - transient;
    let mut values = Vec::with_capacity(retained * j);
    for step in 0..total {
        stepper.step_in_place(&rhs, &mut x, cfg.dt);
        check_blowup(&x, step)?;
        if step >= transient {
            values.extend_from_slice(&x);
        }
    }
    let split = ((retained as f64) * cfg.train_fraction).floor().max(1.0) as usize;
    TimeSeriesDataset::new(values, j, cfg.dt, split.min(retained))
}

pub(crate) fn check_blowup<T: Real>(x: &[T], step: usize) -> Result<()> {
    for v in x {
        let a = v.as_f64().abs();
        if !a.is_finite() || a > BLOWUP_THRESHOLD {
            return Err(Error::SimulationBlowup {
                step,
                magnitude: a,
            });
        }
    }
    Ok(())
}
