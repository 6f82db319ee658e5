//! Ground-truth trajectories and true Lyapunov spectra.

mod dataset;
pub mod ks;
pub mod lorenz96;
pub mod rk4;
mod tangent;

pub use dataset::{column_stats, TimeSeriesDataset};
pub use ks::{simulate_ks, KsConfig, KsSolver};
pub use lorenz96::{
    lorenz96_jacobian, lorenz96_rhs, lorenz96_rhs_into, lorenz96_tangent_into,
    simulate_lorenz96, Lorenz96Config,
};
pub use rk4::{rk4_step, Rk4};
pub use tangent::{true_lyapunov_spectrum, TangentParams};

use crate::linalg::{gaussian, rng};
use crate::{Real, Result};

/// Any state magnitude above this marks a simulation as blown up.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub enum SystemConfig {
    Lorenz96(Lorenz96Config),
    KuramotoSivashinsky(KsConfig),
}

impl SystemConfig {
    pub fn simulate(&self) -> Result<TimeSeriesDataset<f64>> {
        match self {
            SystemConfig::Lorenz96(c) => simulate_lorenz96(c),
            SystemConfig::KuramotoSivashinsky(c) => simulate_ks(c),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            SystemConfig::Lorenz96(c) => c.grid_size,
            SystemConfig::KuramotoSivashinsky(c) => c.nodes,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            SystemConfig::Lorenz96(c) => c.dt,
            SystemConfig::KuramotoSivashinsky(c) => c.dt,
        }
    }
}

/// Uniform state `level` plus a seeded Gaussian perturbation of amplitude 1e−3.
pub fn initial_condition<T: Real>(n: usize, level: f64, seed: u64) -> Vec<T> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| T::lit(level + 1e-3 * gaussian::<f64>(&mut r)))
        .collect()
}
