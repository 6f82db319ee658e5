//! Echo-state reservoir computer with an augmented quadratic readout trained by
//! batched Tikhonov-regularised least squares.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::{column_stats, TimeSeriesDataset};
use crate::linalg::{gaussian, rng, spectral_radius, uniform_matrix, CsrMatrix};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirParams {
    /// Reservoir size `d_h`; must be even.
    pub hidden: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Expected number of nonzeros per row of the recurrent matrix.
    pub degree: f64,
    /// Target spectral radius of the recurrent matrix.
    pub radius: f64,
    /// Input weights are drawn from `U[−ω, ω]`.
    pub input_scaling: f64,
    /// Tikhonov parameter `η`.
    pub regularization: f64,
    /// Training-input noise as a fraction of each component's std.
    pub noise_level: f64,
    /// Teacher-forced states excluded from the regression.
    pub warmup: usize,
    /// Samples per accumulation batch (`d_n`).
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ReservoirParams {
    fn default() -> Self {
        Self {
            hidden: 1000,
            input_dim: 1,
            output_dim: 1,
            degree: 3.0,
            radius: 0.9,
            input_scaling: 0.5,
            regularization: 1e-6,
            noise_level: 0.0,
            warmup: 2000,
            batch_size: 1000,
            seed: 1,
        }
    }
}

impl ReservoirParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "reservoir size must be even and >= 2, got {}",
                self.hidden
            )));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("reservoir needs nonzero input/output dims".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidConfig(format!("radius must be > 0, got {}", self.radius)));
        }
        if !(self.degree >= 1.0) || self.degree > self.hidden as f64 {
            return Err(Error::InvalidConfig(format!(
                "degree must lie in [1, {}], got {}",
                self.hidden, self.degree
            )));
        }
        if !(self.regularization >= 0.0) || !(self.noise_level >= 0.0) {
            return Err(Error::InvalidConfig(
                "regularization and noise level must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirModel<T> {
    /// `d_h × d_in`
    pub w_in: DMatrix<T>,
    /// `d_h × d_h`, sparse.
    pub w_hh: CsrMatrix<T>,
    /// `d_out × d_h`
    pub w_out: DMatrix<T>,
    pub params: ReservoirParams,
    pub trained: bool,
}

/// Power-iteration settings for the spectral-radius estimate.
pub const RADIUS_MAX_ITER: usize = 1000;
pub const RADIUS_TOL: f64 = 1e-8;

pub fn build_reservoir<T: Real>(params: &ReservoirParams) -> Result<ReservoirModel<T>> {
    params.validate()?;
    let d_h = params.hidden;
    let mut r = rng(params.seed);
    let w_in = uniform_matrix(d_h, params.input_dim, params.input_scaling, &mut r);

    let p = params.degree / d_h as f64;
    let mut triplets = Vec::with_capacity((params.degree * d_h as f64 * 1.2) as usize + 8);
    for i in 0..d_h {
        for j in 0..d_h {
            if r.random::<f64>() < p {
                triplets.push((i, j, T::lit(r.random_range(-1.0..=1.0))));
            }
        }
    }
    let mut w_hh = CsrMatrix::from_triplets(d_h, d_h, triplets);
    let estimate = estimate_radius(&w_hh)?;
    w_hh.scale(T::lit(params.radius / estimate));

    Ok(ReservoirModel {
        w_in,
        w_hh,
        w_out: DMatrix::zeros(params.output_dim, d_h),
        params: params.clone(),
        trained: false,
    })
}

pub fn estimate_radius<T: Real>(w: &CsrMatrix<T>) -> Result<f64> {
    spectral_radius(
        |x: &[T], y: &mut [T]| w.mul_vec_into(x, y),
        w.nrows(),
        RADIUS_MAX_ITER,
        RADIUS_TOL,
    )
}

/// `h = tanh(W_in·o + W_hh·h_prev)`
pub fn rc_step<T: Real>(model: &ReservoirModel<T>, o: &[T], h_prev: &[T]) -> Result<DVector<T>> {
    if o.len() != model.w_in.ncols() {
        return Err(Error::mismatch("rc_step input", model.w_in.ncols(), o.len()));
    }
    if h_prev.len() != model.w_in.nrows() {
        return Err(Error::mismatch("rc_step hidden", model.w_in.nrows(), h_prev.len()));
    }
    let mut h = DVector::from_column_slice(h_prev);
    model.advance_in_place(o, &mut h);
    Ok(h)
}

/// First half copied, second half squared.
pub fn augment_hidden<T: Real>(h: &[T]) -> Vec<T> {
    let half = h.len() / 2;
    h.iter()
        .enumerate()
        .map(|(i, &x)| if i < half { x } else { x * x })
        .collect()
}

impl<T: Real> ReservoirModel<T> {
    pub fn hidden_dim(&self) -> usize {
        self.w_in.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_out.nrows()
    }

    /// Pre-activation `W_in·o + W_hh·h`, then `tanh`, written back into `h`.
    pub(crate) fn advance_in_place(&self, o: &[T], h: &mut DVector<T>) {
        let mut pre = vec![T::zero(); h.len()];
        self.w_hh.mul_vec_into(h.as_slice(), &mut pre);
        let mut pre = DVector::from_vec(pre);
        pre.gemv(T::one(), &self.w_in, &DVector::from_column_slice(o), T::one());
        for (dst, p) in h.iter_mut().zip(pre.iter()) {
            *dst = p.tanh();
        }
    }

    pub fn readout(&self, h: &[T]) -> DVector<T> {
        &self.w_out * DVector::from_vec(augment_hidden(h))
    }

    /// Parameter memory in bytes (dense input/readout plus CSR storage).
    pub fn memory_bytes(&self) -> usize {
        let s = std::mem::size_of::<T>();
        (self.w_in.len() + self.w_out.len() + self.w_hh.nnz()) * s
            + (self.w_hh.nnz() + self.w_hh.nrows() + 1) * std::mem::size_of::<usize>()
    }
}

/// Running sums `H̄ = HᵀH` and `Ȳ = YᵀH` over batches of augmented states.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeAccumulator<T> {
    pub hbar: DMatrix<T>,
    pub ybar: DMatrix<T>,
    pub count: usize,
}

impl<T: Real> RidgeAccumulator<T> {
    pub fn new(hidden: usize, outputs: usize) -> Self {
        Self {
            hbar: DMatrix::zeros(hidden, hidden),
            ybar: DMatrix::zeros(outputs, hidden),
            count: 0,
        }
    }

    /// Adds a batch given row-wise: `h_b` is `d_n × d_h`, `y_b` is `d_n × d_o`.
    pub fn accumulate_batch(&mut self, h_b: &DMatrix<T>, y_b: &DMatrix<T>) -> Result<()> {
        if h_b.nrows() != y_b.nrows() {
            return Err(Error::mismatch("ridge batch rows", h_b.nrows(), y_b.nrows()));
        }
        self.accumulate_columns(&h_b.transpose(), &y_b.transpose())
    }

    /// Same as [`accumulate_batch`](Self::accumulate_batch) with one sample per column.
    pub fn accumulate_columns(&mut self, h_cols: &DMatrix<T>, y_cols: &DMatrix<T>) -> Result<()> {
        if h_cols.nrows() != self.hbar.nrows() {
            return Err(Error::mismatch("ridge batch width", self.hbar.nrows(), h_cols.nrows()));
        }
        if y_cols.nrows() != self.ybar.nrows() {
            return Err(Error::mismatch("ridge target width", self.ybar.nrows(), y_cols.nrows()));
        }
        if h_cols.ncols() != y_cols.ncols() {
            return Err(Error::mismatch("ridge batch samples", h_cols.ncols(), y_cols.ncols()));
        }
        if h_cols.ncols() == 0 {
            return Ok(());
        }
        let ht = h_cols.transpose();
        self.hbar.gemm(T::one(), h_cols, &ht, T::one());
        self.ybar.gemm(T::one(), y_cols, &ht, T::one());
        self.count += h_cols.ncols();
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.hbar.shape() != self.hbar.shape() || other.ybar.shape() != self.ybar.shape() {
            return Err(Error::mismatch("ridge merge", self.hbar.nrows(), other.hbar.nrows()));
        }
        self.hbar += &other.hbar;
        self.ybar += &other.ybar;
        self.count += other.count;
        Ok(())
    }
}

/// `W_out = Ȳ (H̄ + ηI)⁻¹` via a Cholesky solve with one refinement sweep.
pub fn solve_readout<T: Real>(acc: &RidgeAccumulator<T>, eta: T) -> Result<DMatrix<T>> {
    let n = acc.hbar.nrows();
    let mut a = acc.hbar.clone();
    for i in 0..n {
        a[(i, i)] += eta;
    }
    let rhs = acc.ybar.transpose();
    let deficient = |a: &DMatrix<T>| -> Error {
        let eig = a.clone().symmetric_eigenvalues();
        let max = eig.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let tol = max * T::default_epsilon() * T::from_usize_lossy(n);
        Error::RankDeficient {
            deficient: eig.iter().filter(|v| **v <= tol).count().max(1),
            dimension: n,
        }
    };
    let chol = match a.clone().cholesky() {
        Some(c) => c,
        None => return Err(deficient(&a)),
    };
    // A numerically singular system can still factor with tiny pivots.
    let l = chol.l_dirty();
    let max_diag = (0..n).fold(T::zero(), |m, i| m.max(a[(i, i)]));
    let min_pivot = (0..n).fold(T::max_value().unwrap(), |m, i| m.min(l[(i, i)] * l[(i, i)]));
    if min_pivot <= max_diag * T::default_epsilon() * T::from_usize_lossy(n) {
        return Err(deficient(&a));
    }
    let mut x = chol.solve(&rhs);
    let residual = &rhs - &a * &x;
    x += chol.solve(&residual);
    if !crate::linalg::all_finite(x.as_slice()) {
        return Err(Error::NonFinite("ridge readout solution"));
    }
    Ok(x.transpose())
}

/// Teacher-forced training on `inputs` (row-major, `T × d_in`) against
/// `targets` (`T × d_out`, the value to predict after consuming each input).
pub fn train_rc_supervised<T: Real>(
    model: &ReservoirModel<T>,
    inputs: &[T],
    targets: &[T],
) -> Result<ReservoirModel<T>> {
    let mut acc = RidgeAccumulator::new(model.hidden_dim(), model.output_dim());
    accumulate_states(model, inputs, targets, &mut acc)?;
    let w_out = solve_readout(&acc, T::lit(model.params.regularization))?;
    let mut trained = model.clone();
    trained.w_out = w_out;
    trained.trained = true;
    Ok(trained)
}

/// Runs the teacher-forced pass and adds its post-warm-up augmented states to `acc`.
pub fn accumulate_states<T: Real>(
    model: &ReservoirModel<T>,
    inputs: &[T],
    targets: &[T],
    acc: &mut RidgeAccumulator<T>,
) -> Result<()> {
    let (d_in, d_out, d_h) = (model.input_dim(), model.output_dim(), model.hidden_dim());
    if !inputs.len().is_multiple_of(d_in) || !targets.len().is_multiple_of(d_out) {
        return Err(Error::InvalidDimension("ragged training rows".into()));
    }
    let steps = inputs.len() / d_in;
    if targets.len() / d_out != steps {
        return Err(Error::mismatch("training targets", steps, targets.len() / d_out));
    }
    let p = &model.params;
    if steps <= p.warmup {
        return Err(Error::InvalidArgument(format!(
            "{steps} training steps leave nothing after {} warm-up steps",
            p.warmup
        )));
    }
    let noise_scale: Vec<f64> = if p.noise_level > 0.0 {
        column_stats(inputs, d_in)
            .1
            .iter()
            .map(|s| s.as_f64() * p.noise_level)
            .collect()
    } else {
        vec![0.0; d_in]
    };
    let mut noise_rng = rng(crate::linalg::mix_seed(p.seed, 0x4e01_5e));

    let batch = p.batch_size;
    let mut h_cols = DMatrix::zeros(d_h, batch);
    let mut y_cols = DMatrix::zeros(d_out, batch);
    let mut filled = 0;
    let mut h = DVector::zeros(d_h);
    let mut x = vec![T::zero(); d_in];
    let half = d_h / 2;
    for t in 0..steps {
        let row = &inputs[t * d_in..(t + 1) * d_in];
        for i in 0..d_in {
            x[i] = if noise_scale[i] > 0.0 {
                row[i] + T::lit(noise_scale[i]) * gaussian::<T>(&mut noise_rng)
            } else {
                row[i]
            };
        }
        model.advance_in_place(&x, &mut h);
        if t < p.warmup {
            continue;
        }
        let mut col = h_cols.column_mut(filled);
        for i in 0..d_h {
            col[i] = if i < half { h[i] } else { h[i] * h[i] };
        }
        y_cols
            .column_mut(filled)
            .copy_from_slice(&targets[t * d_out..(t + 1) * d_out]);
        filled += 1;
        if filled == batch {
            acc.accumulate_columns(&h_cols, &y_cols)?;
            filled = 0;
        }
    }
    if filled > 0 {
        acc.accumulate_columns(
            &h_cols.columns(0, filled).into_owned(),
            &y_cols.columns(0, filled).into_owned(),
        )?;
    }
    Ok(())
}

/// Trains on the dataset's training split with next-step targets.
pub fn train_rc<T: Real>(
    model: &ReservoirModel<T>,
    dataset: &TimeSeriesDataset<T>,
) -> Result<ReservoirModel<T>> {
    if model.input_dim() != dataset.dim() || model.output_dim() != dataset.dim() {
        return Err(Error::mismatch("reservoir vs dataset", model.input_dim(), dataset.dim()));
    }
    let split = dataset.split();
    if split < 2 {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    train_rc_supervised(model, dataset.rows(0..split - 1), dataset.rows(1..split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(hidden: usize) -> ReservoirParams {
        ReservoirParams {
            hidden,
            input_dim: 2,
            output_dim: 2,
            degree: 3.0,
            radius: 0.6,
            warmup: 10,
            batch_size: 17,
            ..Default::default()
        }
    }

    #[test]
    fn radius_is_enforced() {
        let m: ReservoirModel<f64> = build_reservoir(&params(200)).unwrap();
        let rho = estimate_radius(&m.w_hh).unwrap();
        assert!((0.594..=0.606).contains(&rho), "{rho}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a: ReservoirModel<f64> = build_reservoir(&params(100)).unwrap();
        let b: ReservoirModel<f64> = build_reservoir(&params(100)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonzero_count_tracks_degree() {
        let p = ReservoirParams {
            degree: 10.0,
            ..params(200)
        };
        let m: ReservoirModel<f64> = build_reservoir(&p).unwrap();
        let nnz = m.w_hh.nnz() as f64;
        assert!((nnz - 2000.0).abs() < 200.0, "{nnz}");
    }

    #[test]
    fn invalid_params_are_rejected() {
        for p in [
            ReservoirParams { hidden: 7, ..params(8) },
            ReservoirParams { radius: 0.0, ..params(8) },
            ReservoirParams { degree: 0.5, ..params(8) },
            ReservoirParams { regularization: -1.0, ..params(8) },
        ] {
            assert!(build_reservoir::<f64>(&p).is_err());
        }
    }

    #[test]
    fn step_of_zero_is_zero_and_bounded() {
        let m: ReservoirModel<f64> = build_reservoir(&params(50)).unwrap();
        let h = rc_step(&m, &[0.0, 0.0], &[0.0; 50]).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
        let h = rc_step(&m, &[1e3, -1e3], &vec![0.9; 50]).unwrap();
        assert!(h.iter().all(|v| v.abs() <= 1.0));
        assert!(rc_step(&m, &[0.0], &[0.0; 50]).is_err());
    }

    #[test]
    fn two_node_step_by_hand() {
        let m = ReservoirModel {
            w_in: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            w_hh: CsrMatrix::from_triplets(2, 2, vec![(0, 1, 0.5), (1, 0, 0.5)]),
            w_out: DMatrix::zeros(1, 2),
            params: ReservoirParams::default(),
            trained: false,
        };
        let h = rc_step(&m, &[1.0], &[0.2, -0.4]).unwrap();
        assert_eq!(h.as_slice(), &[0.8f64.tanh(), 0.1f64.tanh()]);
    }

    #[test]
    fn augmentation_squares_second_half() {
        assert_eq!(augment_hidden(&[0.0; 4]), vec![0.0; 4]);
        assert_eq!(augment_hidden(&[1.0, -1.0, 2.0, -2.0]), vec![1.0, -1.0, 4.0, 4.0]);
        let h = [0.3, -0.7, 0.5, -0.1];
        let neg: Vec<f64> = h.iter().map(|x| -x).collect();
        assert_eq!(augment_hidden(&h)[2..], augment_hidden(&neg)[2..]);
    }

    #[test]
    fn accumulate_by_hand() {
        let mut acc = RidgeAccumulator::<f64>::new(2, 1);
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, -1.0, 3.0]);
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        acc.accumulate_batch(&h, &y).unwrap();
        // HᵀH = [[2, -1], [-1, 14]], YᵀH = [1·1 + 0·2 − 3, 2 + 2 + 9] = [-2, 13]
        assert_eq!(acc.hbar, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 14.0]));
        assert_eq!(acc.ybar, DMatrix::from_row_slice(1, 2, &[-2.0, 13.0]));
        assert_eq!(acc.count, 3);

        let before = acc.clone();
        acc.accumulate_batch(&DMatrix::zeros(0, 2), &DMatrix::zeros(0, 1)).unwrap();
        assert_eq!(acc, before);
    }

    #[test]
    fn split_batches_match_single_batch() {
        let mut r = rng(5);
        let h: DMatrix<f64> = crate::linalg::gaussian_matrix(40, 6, &mut r);
        let y: DMatrix<f64> = crate::linalg::gaussian_matrix(40, 2, &mut r);
        let mut one = RidgeAccumulator::new(6, 2);
        one.accumulate_batch(&h, &y).unwrap();
        let mut two = RidgeAccumulator::new(6, 2);
        two.accumulate_batch(&h.rows(0, 20).into_owned(), &y.rows(0, 20).into_owned())
            .unwrap();
        two.accumulate_batch(&h.rows(20, 20).into_owned(), &y.rows(20, 20).into_owned())
            .unwrap();
        assert!((&one.hbar - &two.hbar).norm() <= 1e-12 * one.hbar.norm());
        assert!((&one.ybar - &two.ybar).norm() <= 1e-12 * one.ybar.norm());
    }

    #[test]
    fn solve_trivial_cases() {
        let acc = RidgeAccumulator {
            hbar: DMatrix::<f64>::identity(3, 3),
            ybar: DMatrix::identity(3, 3),
            count: 3,
        };
        assert_eq!(solve_readout(&acc, 0.0).unwrap(), DMatrix::identity(3, 3));

        let acc = RidgeAccumulator {
            hbar: DMatrix::from_element(1, 1, 4.0),
            ybar: DMatrix::from_element(1, 1, 2.0),
            count: 1,
        };
        assert!((solve_readout::<f64>(&acc, 1.0).unwrap()[(0, 0)] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn singular_system_reports_deficiency() {
        let acc = RidgeAccumulator {
            hbar: DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 2.0]),
            ybar: DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]),
            count: 2,
        };
        match solve_readout(&acc, 0.0) {
            Err(Error::RankDeficient { deficient, dimension }) => {
                assert_eq!(deficient, 1);
                assert_eq!(dimension, 3);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        assert!(solve_readout(&acc, 1e-3).is_ok());
    }

    #[test]
    fn warmup_longer_than_data_is_rejected() {
        let m: ReservoirModel<f64> = build_reservoir(&params(10)).unwrap();
        let xs = vec![0.1; 2 * 8];
        assert!(train_rc_supervised(&m, &xs, &xs).is_err());
    }
}
