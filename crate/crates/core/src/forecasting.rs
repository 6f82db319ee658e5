//! Closed-loop forecasting: warm the hidden state up on ground truth, then
//! feed each prediction back as the next input.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rayon::prelude::*;

use crate::dynamics::TimeSeriesDataset;
use crate::gated_rnn::{
    train_bptt_supervised, BpttConfig, CellKind, GatedRnnModel, RnnState, TrainingReport,
};
use crate::linalg::{mix_seed, rng};
use crate::reservoir::{build_reservoir, train_rc_supervised, ReservoirModel, ReservoirParams};
use crate::{Error, Real, Result};

/// Divergence bound as a multiple of the largest training magnitude.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// A trained recurrent model driven one input at a time.
pub trait Surrogate<T: Real>: Send + Sync {
    type State: Clone + Send + Sync;

    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    /// Consume one input vector.
    fn advance(&self, state: &mut Self::State, input: &[T]);
    /// Prediction of the next observation given the current state.
    fn predict(&self, state: &Self::State) -> Vec<T>;
}

impl<T: Real> Surrogate<T> for ReservoirModel<T> {
    type State = DVector<T>;

    fn input_dim(&self) -> usize {
        ReservoirModel::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        ReservoirModel::output_dim(self)
    }

    fn initial_state(&self) -> DVector<T> {
        DVector::zeros(self.hidden_dim())
    }

    fn advance(&self, state: &mut DVector<T>, input: &[T]) {
        self.advance_in_place(input, state);
    }

    fn predict(&self, state: &DVector<T>) -> Vec<T> {
        self.readout(state.as_slice()).as_slice().to_vec()
    }
}

/// Recurrent state plus the latest top-layer output (which carries the residual).
#[derive(Debug, Clone, PartialEq)]
pub struct RnnForecastState<T> {
    pub state: RnnState<T>,
    pub top: DMatrix<T>,
}

impl<T: Real> Surrogate<T> for GatedRnnModel<T> {
    type State = RnnForecastState<T>;

    fn input_dim(&self) -> usize {
        GatedRnnModel::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        GatedRnnModel::output_dim(self)
    }

    fn initial_state(&self) -> RnnForecastState<T> {
        RnnForecastState {
            state: self.zero_state(1),
            top: DMatrix::zeros(self.hidden_dim(), 1),
        }
    }

    fn advance(&self, s: &mut RnnForecastState<T>, input: &[T]) {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        s.top = self.step(&x, &mut s.state);
    }

    fn predict(&self, s: &RnnForecastState<T>) -> Vec<T> {
        self.readout(&s.top).as_slice().to_vec()
    }
}

/// Either model family behind one type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel<T> {
    Reservoir(ReservoirModel<T>),
    Rnn(GatedRnnModel<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyState<T> {
    Reservoir(DVector<T>),
    Rnn(RnnForecastState<T>),
}

impl<T: Real> AnyModel<T> {
    pub fn family(&self) -> &'static str {
        match self {
            AnyModel::Reservoir(_) => "rc",
            AnyModel::Rnn(m) => m.kind.name(),
        }
    }

    pub fn memory_bytes(&self) -> usize {
        match self {
            AnyModel::Reservoir(m) => m.memory_bytes(),
            AnyModel::Rnn(m) => m.memory_bytes(),
        }
    }
}

impl<T: Real> Surrogate<T> for AnyModel<T> {
    type State = AnyState<T>;

    fn input_dim(&self) -> usize {
        match self {
            AnyModel::Reservoir(m) => Surrogate::input_dim(m),
            AnyModel::Rnn(m) => Surrogate::input_dim(m),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            AnyModel::Reservoir(m) => Surrogate::output_dim(m),
            AnyModel::Rnn(m) => Surrogate::output_dim(m),
        }
    }

    fn initial_state(&self) -> AnyState<T> {
        match self {
            AnyModel::Reservoir(m) => AnyState::Reservoir(m.initial_state()),
            AnyModel::Rnn(m) => AnyState::Rnn(m.initial_state()),
        }
    }

    fn advance(&self, state: &mut AnyState<T>, input: &[T]) {
        match (self, state) {
            (AnyModel::Reservoir(m), AnyState::Reservoir(s)) => m.advance(s, input),
            (AnyModel::Rnn(m), AnyState::Rnn(s)) => m.advance(s, input),
            _ => panic!("state does not belong to this model family"),
        }
    }

    fn predict(&self, state: &AnyState<T>) -> Vec<T> {
        match (self, state) {
            (AnyModel::Reservoir(m), AnyState::Reservoir(s)) => m.predict(s),
            (AnyModel::Rnn(m), AnyState::Rnn(s)) => m.predict(s),
            _ => panic!("state does not belong to this model family"),
        }
    }
}

/// Architecture and training settings for one model.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// Input/output dims and seed are filled in by [`train_model`].
    Reservoir(ReservoirParams),
    Rnn(RnnSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnSpec {
    pub kind: CellKind,
    pub hidden: usize,
    pub layers: usize,
    pub bptt: BpttConfig,
}

impl ModelSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Reservoir(_) => "rc",
            ModelSpec::Rnn(r) => r.kind.name(),
        }
    }
}

/// Builds and trains a model mapping rows of `inputs` (`N × d_in`) to the
/// aligned rows of `targets` (`N × d_out`). `seed` drives every random choice.
pub fn train_model<T: Real>(
    spec: &ModelSpec,
    inputs: &[T],
    targets: &[T],
    d_in: usize,
    d_out: usize,
    seed: u64,
) -> Result<(AnyModel<T>, Option<TrainingReport>)> {
    match spec {
        ModelSpec::Reservoir(p) => {
            let params = ReservoirParams {
                input_dim: d_in,
                output_dim: d_out,
                seed,
                ..p.clone()
            };
            let model = build_reservoir(&params)?;
            Ok((AnyModel::Reservoir(train_rc_supervised(&model, inputs, targets)?), None))
        }
        ModelSpec::Rnn(r) => {
            let model = GatedRnnModel::new(r.kind, d_in, r.hidden, d_out, r.layers, seed)?;
            let cfg = BpttConfig {
                seed: mix_seed(seed, 1),
                ..r.bptt.clone()
            };
            let (trained, report) = train_bptt_supervised(&model, inputs, targets, &cfg)?;
            Ok((AnyModel::Rnn(trained), Some(report)))
        }
    }
}

/// Trains on the dataset's training split with next-step targets.
pub fn train_on_dataset<T: Real>(
    spec: &ModelSpec,
    dataset: &TimeSeriesDataset<T>,
    seed: u64,
) -> Result<(AnyModel<T>, Option<TrainingReport>)> {
    let split = dataset.split();
    if split < 2 {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let d = dataset.dim();
    train_model(spec, dataset.rows(0..split - 1), dataset.rows(1..split), d, d, seed)
}

/// Teacher-forced pass over `series` (row-major) from the zero state.
pub fn warmup<T: Real, M: Surrogate<T> + ?Sized>(model: &M, series: &[T]) -> Result<M::State> {
    let d = model.input_dim();
    if !series.len().is_multiple_of(d) {
        return Err(Error::mismatch("warm-up series width", d, series.len() % d));
    }
    let mut state = model.initial_state();
    for row in series.chunks_exact(d) {
        model.advance(&mut state, row);
    }
    Ok(state)
}

/// Closed-loop predictions and the step (if any) at which a component left the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    /// Row-major; `horizon` rows, or up to and including the divergent step.
    pub predictions: Vec<T>,
    pub diverged_at: Option<usize>,
}

/// Step `k` consumes `o_start` (k = 0) or prediction `k − 1`, then predicts.
/// A prediction with a non-finite component or one larger than `bound` in
/// magnitude ends the run.
pub fn iterative_forecast<T: Real, M: Surrogate<T> + ?Sized>(
    model: &M,
    state: &mut M::State,
    o_start: &[T],
    horizon: usize,
    bound: T,
) -> Result<Trajectory<T>> {
    let d = model.output_dim();
    if model.input_dim() != d {
        return Err(Error::mismatch("closed-loop model input", d, model.input_dim()));
    }
    if o_start.len() != d {
        return Err(Error::mismatch("forecast start", d, o_start.len()));
    }
    let mut predictions = Vec::with_capacity(horizon * d);
    let mut input = o_start.to_vec();
    for k in 0..horizon {
        model.advance(state, &input);
        let pred = model.predict(state);
        let diverged = pred.iter().any(|v| !v.is_finite() || v.abs() > bound);
        predictions.extend_from_slice(&pred);
        if diverged {
            return Ok(Trajectory {
                predictions,
                diverged_at: Some(k),
            });
        }
        input = pred;
    }
    Ok(Trajectory {
        predictions,
        diverged_at: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRun<T> {
    /// Row of the dataset used as `o_start`.
    pub initial_index: usize,
    pub warmup_steps: usize,
    /// Requested horizon.
    pub horizon: usize,
    pub dim: usize,
    /// Row-major; same number of rows as `targets`.
    pub predictions: Vec<T>,
    pub targets: Vec<T>,
    pub diverged_at: Option<usize>,
}

impl<T: Real> ForecastRun<T> {
    pub fn steps(&self) -> usize {
        self.predictions.len() / self.dim.max(1)
    }
}

/// Positions `s` in the test split with room for `n_w` warm-up rows before
/// and `horizon` target rows after.
pub fn valid_starts<T: Real>(
    dataset: &TimeSeriesDataset<T>,
    n_w: usize,
    horizon: usize,
) -> std::ops::Range<usize> {
    let lo = dataset.split() + n_w;
    let hi = dataset.len().saturating_sub(horizon);
    lo..hi.max(lo)
}

/// One forecast from start row `s`: warm-up on rows `[s − n_w, s)`, start at
/// row `s`, compare against rows `s + 1 ..= s + horizon`.
pub fn forecast_from<T: Real, M: Surrogate<T> + ?Sized>(
    model: &M,
    dataset: &TimeSeriesDataset<T>,
    start: usize,
    n_w: usize,
    horizon: usize,
    bound: T,
) -> Result<ForecastRun<T>> {
    if start < n_w || start + horizon >= dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "start {start} leaves no room for {n_w} warm-up and {horizon} forecast steps"
        )));
    }
    let mut state = warmup(model, dataset.rows(start - n_w..start))?;
    let traj = iterative_forecast(model, &mut state, dataset.row(start), horizon, bound)?;
    let dim = dataset.dim();
    let steps = traj.predictions.len() / dim;
    Ok(ForecastRun {
        initial_index: start,
        warmup_steps: n_w,
        horizon,
        dim,
        targets: dataset.rows(start + 1..start + 1 + steps).to_vec(),
        predictions: traj.predictions,
        diverged_at: traj.diverged_at,
    })
}

/// Forecasts from `n_ic` start rows drawn without replacement from the test
/// split, in ascending start order. Runs execute concurrently.
pub fn evaluate_many<T: Real, M: Surrogate<T> + ?Sized>(
    model: &M,
    dataset: &TimeSeriesDataset<T>,
    n_ic: usize,
    n_w: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<ForecastRun<T>>> {
    if model.input_dim() != dataset.dim() || model.output_dim() != dataset.dim() {
        return Err(Error::mismatch("model vs dataset", dataset.dim(), model.input_dim()));
    }
    let starts = sample_starts(dataset, n_ic, n_w, horizon, seed)?;
    let bound = dataset.train_max_abs() * T::lit(DIVERGENCE_FACTOR);
    starts
        .par_iter()
        .map(|&s| forecast_from(model, dataset, s, n_w, horizon, bound))
        .collect()
}

pub fn sample_starts<T: Real>(
    dataset: &TimeSeriesDataset<T>,
    n_ic: usize,
    n_w: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let range = valid_starts(dataset, n_w, horizon);
    if n_ic > range.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_ic} initial conditions requested but only {} test positions fit warm-up {n_w} and horizon {horizon}",
            range.len()
        )));
    }
    let mut starts: Vec<usize> = sample(&mut rng(seed), range.len(), n_ic)
        .into_iter()
        .map(|i| range.start + i)
        .collect();
    starts.sort_unstable();
    Ok(starts)
}
