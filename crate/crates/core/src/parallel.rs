//! Local-interaction ensembles for long periodic 1-D states.
//!
//! The state is cut into contiguous groups of `G` components. Each group's
//! model sees its own components plus `I` neighbours on either side (wrapping
//! around) and predicts only its own. In closed loop every member reads the
//! fully assembled previous state, which makes one forecast step a
//! gather / predict / assemble cycle with a barrier between steps.

use std::ops::Range;

use rayon::prelude::*;

use crate::dynamics::TimeSeriesDataset;
use crate::forecasting::{train_model, AnyModel, ModelSpec, Surrogate, Trajectory};
use crate::linalg::mix_seed;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub owned: Range<usize>,
    /// Left halo, owned, right halo; length `2I + G`.
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialDecomposition {
    pub dim: usize,
    pub group_size: usize,
    pub interaction: usize,
    pub groups: Vec<Group>,
}

impl SpatialDecomposition {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn input_width(&self) -> usize {
        2 * self.interaction + self.group_size
    }
}

pub fn decompose(dim: usize, group_size: usize, interaction: usize) -> Result<SpatialDecomposition> {
    if group_size == 0 || dim == 0 || !dim.is_multiple_of(group_size) {
        return Err(Error::InvalidDecomposition(format!(
            "group size {group_size} does not divide state dimension {dim}"
        )));
    }
    if 2 * interaction + group_size > dim {
        return Err(Error::InvalidDecomposition(format!(
            "input width {} exceeds state dimension {dim}",
            2 * interaction + group_size
        )));
    }
    let groups = (0..dim / group_size)
        .map(|g| {
            let start = g * group_size;
            let inputs = (0..2 * interaction + group_size)
                .map(|k| (start + dim + k - interaction) % dim)
                .collect();
            Group {
                owned: start..start + group_size,
                inputs,
            }
        })
        .collect();
    Ok(SpatialDecomposition {
        dim,
        group_size,
        interaction,
        groups,
    })
}

pub fn gather_local<T: Copy>(decomp: &SpatialDecomposition, group: usize, state: &[T]) -> Vec<T> {
    decomp.groups[group].inputs.iter().map(|&i| state[i]).collect()
}

/// Column-gathers a row-major series for one group.
fn gather_rows<T: Copy>(decomp: &SpatialDecomposition, group: usize, rows: &[T]) -> Vec<T> {
    rows.chunks_exact(decomp.dim)
        .flat_map(|r| gather_local(decomp, group, r))
        .collect()
}

fn owned_rows<T: Copy>(decomp: &SpatialDecomposition, group: usize, rows: &[T]) -> Vec<T> {
    let owned = decomp.groups[group].owned.clone();
    rows.chunks_exact(decomp.dim)
        .flat_map(|r| r[owned.clone()].iter().copied())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelModel<M> {
    pub decomposition: SpatialDecomposition,
    pub members: Vec<M>,
}

impl<M> ParallelModel<M> {
    pub fn new<T: Real>(decomposition: SpatialDecomposition, members: Vec<M>) -> Result<Self>
    where
        M: Surrogate<T>,
    {
        if members.len() != decomposition.group_count() {
            return Err(Error::mismatch(
                "parallel member count",
                decomposition.group_count(),
                members.len(),
            ));
        }
        for (g, m) in members.iter().enumerate() {
            if m.input_dim() != decomposition.input_width() {
                return Err(Error::mismatch("member input", decomposition.input_width(), m.input_dim())
                    .in_group(g));
            }
            if m.output_dim() != decomposition.group_size {
                return Err(Error::mismatch("member output", decomposition.group_size, m.output_dim())
                    .in_group(g));
            }
        }
        Ok(Self {
            decomposition,
            members,
        })
    }
}

impl<T: Real> ParallelModel<AnyModel<T>> {
    pub fn memory_bytes(&self) -> usize {
        self.members.iter().map(AnyModel::memory_bytes).sum()
    }
}

/// The whole ensemble behaves like one model over the global state, so the
/// generic warm-up and closed-loop routines apply unchanged.
impl<T: Real, M: Surrogate<T>> Surrogate<T> for ParallelModel<M> {
    type State = Vec<M::State>;

    fn input_dim(&self) -> usize {
        self.decomposition.dim
    }

    fn output_dim(&self) -> usize {
        self.decomposition.dim
    }

    fn initial_state(&self) -> Vec<M::State> {
        self.members.iter().map(Surrogate::initial_state).collect()
    }

    fn advance(&self, states: &mut Vec<M::State>, input: &[T]) {
        let decomp = &self.decomposition;
        if self.members.len() == 1 {
            self.members[0].advance(&mut states[0], &gather_local(decomp, 0, input));
            return;
        }
        // `input` is the assembled state; members only read it.
        self.members
            .par_iter()
            .zip(states.par_iter_mut())
            .enumerate()
            .for_each(|(g, (m, s))| m.advance(s, &gather_local(decomp, g, input)));
    }

    fn predict(&self, states: &Vec<M::State>) -> Vec<T> {
        let mut out = vec![T::zero(); self.decomposition.dim];
        for ((m, s), group) in self.members.iter().zip(states).zip(&self.decomposition.groups) {
            out[group.owned.clone()].copy_from_slice(&m.predict(s));
        }
        out
    }
}

/// Trains one member per group from `fit(group, inputs, targets)`, where
/// inputs are the gathered training rows `0..split−1` and targets the owned
/// components of rows `1..split`.
pub fn train_members<T, M, F>(
    decomp: &SpatialDecomposition,
    dataset: &TimeSeriesDataset<T>,
    concurrent: bool,
    fit: F,
) -> Result<ParallelModel<M>>
where
    T: Real,
    M: Surrogate<T>,
    F: Fn(usize, &[T], &[T]) -> Result<M> + Sync,
{
    if dataset.dim() != decomp.dim {
        return Err(Error::mismatch("parallel dataset", decomp.dim, dataset.dim()));
    }
    let split = dataset.split();
    if split < 2 {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let one = |g: usize| {
        let inputs = gather_rows(decomp, g, dataset.rows(0..split - 1));
        let targets = owned_rows(decomp, g, dataset.rows(1..split));
        fit(g, &inputs, &targets).map_err(|e| e.in_group(g))
    };
    let members: Result<Vec<M>> = if concurrent {
        (0..decomp.group_count()).into_par_iter().map(one).collect()
    } else {
        (0..decomp.group_count()).map(one).collect()
    };
    ParallelModel::new(decomp.clone(), members?)
}

/// Trains every member from `spec` with seed `mix_seed(seed, group)`. With
/// `shared`, group 0 is trained and copied to every group.
pub fn train_parallel<T: Real>(
    decomp: &SpatialDecomposition,
    dataset: &TimeSeriesDataset<T>,
    spec: &ModelSpec,
    seed: u64,
    shared: bool,
) -> Result<ParallelModel<AnyModel<T>>> {
    let width = decomp.input_width();
    let g_size = decomp.group_size;
    let fit = |g: usize, x: &[T], y: &[T]| {
        train_model(spec, x, y, width, g_size, mix_seed(seed, g as u64)).map(|(m, _)| m)
    };
    if !shared {
        return train_members(decomp, dataset, true, fit);
    }
    let single = SpatialDecomposition {
        groups: decomp.groups[..1].to_vec(),
        ..decomp.clone()
    };
    let first = train_members(&single, dataset, false, fit)?.members.remove(0);
    ParallelModel::new(decomp.clone(), vec![first; decomp.group_count()])
}

/// Warms every member on its gathered slice of `warm` (row-major, `d_o`
/// columns), then forecasts `horizon` steps from the last warm-up row.
pub fn parallel_forecast<T: Real, M: Surrogate<T>>(
    model: &ParallelModel<M>,
    warm: &[T],
    horizon: usize,
    bound: T,
) -> Result<Trajectory<T>> {
    let d = model.decomposition.dim;
    if warm.len() < d || !warm.len().is_multiple_of(d) {
        return Err(Error::mismatch("parallel warm-up width", d, warm.len() % d));
    }
    let (head, last) = warm.split_at(warm.len() - d);
    let mut state = crate::forecasting::warmup(model, head)?;
    crate::forecasting::iterative_forecast(model, &mut state, last, horizon, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecasting::iterative_forecast;
    use crate::reservoir::{solve_readout, RidgeAccumulator};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    /// Linear member `y = W x` on the last consumed input.
    #[derive(Clone)]
    struct Linear {
        w: DMatrix<f64>,
    }

    impl Surrogate<f64> for Linear {
        type State = Vec<f64>;
        fn input_dim(&self) -> usize {
            self.w.ncols()
        }
        fn output_dim(&self) -> usize {
            self.w.nrows()
        }
        fn initial_state(&self) -> Vec<f64> {
            vec![0.0; self.w.ncols()]
        }
        fn advance(&self, s: &mut Vec<f64>, x: &[f64]) {
            s.copy_from_slice(x);
        }
        fn predict(&self, s: &Vec<f64>) -> Vec<f64> {
            (&self.w * nalgebra::DVector::from_column_slice(s)).as_slice().to_vec()
        }
    }

    /// Ridge fit with the raw inputs in place of reservoir states.
    fn ridge_linear(x: &[f64], y: &[f64], d_in: usize, d_out: usize) -> Result<Linear> {
        let n = x.len() / d_in;
        let mut acc = RidgeAccumulator::new(d_in, d_out);
        acc.accumulate_batch(
            &DMatrix::from_row_slice(n, d_in, x),
            &DMatrix::from_row_slice(n, d_out, y),
        )?;
        Ok(Linear {
            w: solve_readout(&acc, 0.0)?,
        })
    }

    #[test]
    fn decomposition_examples() {
        let d = decompose(40, 2, 4).unwrap();
        assert_eq!((d.group_count(), d.input_width()), (20, 10));
        let d = decompose(512, 8, 8).unwrap();
        assert_eq!((d.group_count(), d.input_width()), (64, 24));
        let d = decompose(4, 4, 0).unwrap();
        assert_eq!(d.groups[0].inputs, vec![0, 1, 2, 3]);
        assert!(decompose(10, 3, 1).is_err());
        assert!(decompose(6, 2, 3).is_err());
    }

    #[test]
    fn gather_examples() {
        let ramp: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let d = decompose(6, 2, 1).unwrap();
        assert_eq!(gather_local(&d, 0, &ramp), vec![5.0, 0.0, 1.0, 2.0]);
        assert_eq!(gather_local(&d, 2, &ramp), vec![3.0, 4.0, 5.0, 0.0]);
        let d0 = decompose(6, 2, 0).unwrap();
        assert_eq!(gather_local(&d0, 1, &ramp), vec![2.0, 3.0]);
        let full = decompose(6, 6, 0).unwrap();
        assert_eq!(gather_local(&full, 0, &ramp), ramp);
    }

    proptest! {
        #[test]
        fn ownership_is_a_partition(g in 1usize..6, n in 1usize..8, i in 0usize..6) {
            let dim = g * n;
            prop_assume!(2 * i + g <= dim);
            let d = decompose(dim, g, i).unwrap();
            let mut count = vec![0; dim];
            for grp in &d.groups {
                prop_assert_eq!(grp.inputs.len(), 2 * i + g);
                prop_assert_eq!(&grp.inputs[i..i + g], &grp.owned.clone().collect::<Vec<_>>()[..]);
                for k in grp.owned.clone() {
                    count[k] += 1;
                }
                for w in grp.inputs.windows(2) {
                    prop_assert_eq!(w[1], (w[0] + 1) % dim);
                }
            }
            prop_assert!(count.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn identity_members_hold_state() {
        let d = decompose(6, 2, 1).unwrap();
        let mut pick = DMatrix::zeros(2, 4);
        pick[(0, 1)] = 1.0;
        pick[(1, 2)] = 1.0;
        let pm = ParallelModel::new(d, vec![Linear { w: pick }; 3]).unwrap();
        let x0 = [1.0, -2.0, 3.0, 0.5, 4.0, -1.0];
        let t = parallel_forecast(&pm, &x0, 5, 1e9).unwrap();
        for row in t.predictions.chunks(6) {
            assert_eq!(row, x0);
        }
    }

    #[test]
    fn sentinel_spreads_at_most_one_reach_per_step() {
        // Members sum all their inputs into every owned output, the fastest
        // spread a member can produce.
        let (dim, g, i) = (24, 2, 1);
        let d = decompose(dim, g, i).unwrap();
        let w = DMatrix::from_element(g, 2 * i + g, 1.0);
        let pm = ParallelModel::new(d, vec![Linear { w }; dim / g]).unwrap();
        let mut x0 = vec![0.0; dim];
        x0[11] = f64::NAN;
        let mut state = pm.initial_state();
        pm.advance(&mut state, &x0);
        let mut reach = 0usize;
        for _ in 0..4 {
            let pred = pm.predict(&state);
            let spread = pred
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_nan())
                .map(|(k, _)| (k as isize - 11).unsigned_abs())
                .max()
                .unwrap();
            assert!(spread <= reach + i + g, "spread {spread} after reach {reach}");
            reach = spread;
            pm.advance(&mut state, &pred);
        }
    }

    #[test]
    fn single_group_matches_member() {
        let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, -0.2, 0.8, 0.3, 0.0, 0.1, 0.95]);
        let member = Linear { w: a };
        let pm = ParallelModel::new(decompose(3, 3, 0).unwrap(), vec![member.clone()]).unwrap();
        let x0 = [1.0, 2.0, -1.0];
        let mut s = member.initial_state();
        let direct = iterative_forecast(&member, &mut s, &x0, 20, 1e9).unwrap();
        let par = parallel_forecast(&pm, &x0, 20, 1e9).unwrap();
        assert_eq!(direct, par);
    }

    #[test]
    fn two_groups_reproduce_linear_system() {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[0.5, 0.4, 0.0, -0.3, 0.2, 0.6, 0.3, 0.0, 0.0, -0.4, 0.7, 0.2, 0.3, 0.0, 0.1, 0.8],
        );
        let mut r = crate::linalg::rng(3);
        let xs: DMatrix<f64> = crate::linalg::gaussian_matrix(4, 200, &mut r);
        let ys = &a * &xs;
        let d = decompose(4, 2, 1).unwrap();
        let members: Vec<Linear> = (0..2)
            .map(|g| {
                let x = gather_rows(&d, g, xs.as_slice());
                let y = owned_rows(&d, g, ys.as_slice());
                ridge_linear(&x, &y, 4, 2).unwrap()
            })
            .collect();
        let pm = ParallelModel::new(d, members).unwrap();
        let x0 = [1.0, -0.5, 0.25, 2.0];
        let t = parallel_forecast(&pm, &x0, 10, 1e9).unwrap();
        let mut x = nalgebra::DVector::from_column_slice(&x0);
        for row in t.predictions.chunks(4) {
            x = &a * x;
            for (p, e) in row.iter().zip(x.iter()) {
                assert!((p - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn member_count_checked() {
        let d = decompose(4, 2, 0).unwrap();
        let w = DMatrix::zeros(2, 2);
        assert!(ParallelModel::new(d.clone(), vec![Linear { w: w.clone() }]).is_err());
        assert!(ParallelModel::new(d, vec![Linear { w: DMatrix::zeros(2, 3) }; 2]).is_err());
    }
}
