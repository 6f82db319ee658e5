//! Data-driven forecasting of chaotic dynamics with recurrent surrogates.
//!
//! The crate generates ground-truth trajectories (Lorenz-96, Kuramoto-Sivashinsky),
//! trains echo-state reservoirs and gated recurrent networks on them, forecasts in
//! closed loop, scores forecasts (NRMSE, valid prediction time, power spectrum),
//! scales to long periodic states with a halo-exchanging parallel ensemble, and
//! recovers Lyapunov spectra from both the equations and trained surrogates.
//!
//! Every numerical module is generic over a [`Real`] scalar; the aliases at the
//! crate root fix it to `f64` (or `f32` where noted).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod forecasting;
pub mod gated_rnn;
pub mod harness;
pub mod linalg;
pub mod lyapunov;
pub mod metrics;
pub mod parallel;
pub mod reduction;
pub mod reservoir;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

pub use error::{Error, Result};

/// Scalar type the numerical core is generic over.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal or statistic.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable in every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Real converts to f64")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type TimeSeriesDataset = dynamics::TimeSeriesDataset<f64>;
pub type SvdBasis = reduction::SvdBasis<f64>;
pub type ReservoirModel = reservoir::ReservoirModel<f64>;
pub type ReservoirModelF32 = reservoir::ReservoirModel<f32>;
pub type RidgeAccumulator = reservoir::RidgeAccumulator<f64>;
pub type GatedRnnModel = gated_rnn::GatedRnnModel<f64>;
pub type GatedRnnModelF32 = gated_rnn::GatedRnnModel<f32>;
pub type ForecastRun = forecasting::ForecastRun<f64>;
pub type MetricsReport = metrics::MetricsReport<f64>;
pub type LyapunovSpectrum = lyapunov::LyapunovSpectrum<f64>;
pub type ParallelModel = parallel::ParallelModel<forecasting::AnyModel<f64>>;
pub type AnyModel = forecasting::AnyModel<f64>;
