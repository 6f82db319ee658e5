//! Small linear-algebra and randomness helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Real, Result};

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; derives independent child seeds from a base seed.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian<T: Real>(rng: &mut SeededRng) -> T {
    let x: f64 = StandardNormal.sample(rng);
    T::lit(x)
}

pub fn gaussian_matrix<T: Real>(rows: usize, cols: usize, rng: &mut SeededRng) -> DMatrix<T> {
    // Column-major fill keeps the draw order independent of nalgebra internals.
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = gaussian(rng);
        }
    }
    m
}

pub fn uniform_matrix<T: Real>(
    rows: usize,
    cols: usize,
    bound: f64,
    rng: &mut SeededRng,
) -> DMatrix<T> {
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = T::lit(rng.random_range(-bound..=bound));
        }
    }
    m
}

/// Thin QR with the sign of each column of `Q` chosen so that `diag(R) >= 0`.
pub fn qr_positive<T: Real>(a: DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let qr = a.qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for k in 0..r.nrows().min(r.ncols()) {
        if r[(k, k)] < T::zero() {
            r.row_mut(k).neg_mut();
            q.column_mut(k).neg_mut();
        }
    }
    (q, r)
}

/// Random orthonormal `n × k` matrix: sign-fixed QR of a Gaussian matrix.
pub fn random_orthonormal<T: Real>(n: usize, k: usize, rng: &mut SeededRng) -> DMatrix<T> {
    qr_positive(gaussian_matrix(n, k, rng)).0
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self> {
        if row_ptr.len() != rows + 1
            || col_idx.len() != values.len()
            || row_ptr.last().copied() != Some(values.len())
            || row_ptr.windows(2).any(|w| w[0] > w[1])
            || col_idx.iter().any(|&c| c >= cols)
        {
            return Err(Error::Inconsistent("malformed CSR structure".into()));
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// `out = self · x`
    pub fn mul_vec_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *o = acc;
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// `diag(scale) · self · dense`, used for Jacobian blocks.
    pub fn row_scaled_mul_dense(&self, scale: &[T], dense: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.rows, dense.ncols());
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let w = self.values[k] * scale[r];
                let c = self.col_idx[k];
                for j in 0..dense.ncols() {
                    out[(r, j)] += w * dense[(c, j)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[(r, self.col_idx[k])] += self.values[k];
            }
        }
        m
    }
}

/// Spectral-radius estimate of a square operator by power iteration.
///
/// Real dominant eigenvalues and complex-conjugate dominant pairs are both
/// handled: after each step the last three iterates are fitted with the
/// two-term recurrence `x_{k+2} = a x_{k+1} + b x_k`, whose characteristic
/// roots approximate the dominant eigenvalue(s). Iterates start from the
/// all-ones vector; stops after `max_iter` steps or when the relative change
/// of the estimate drops below `tol`.
pub fn spectral_radius<T: Real>(
    apply: impl Fn(&[T], &mut [T]),
    n: usize,
    max_iter: usize,
    tol: f64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::DegenerateReservoir("empty operator".into()));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut x0: Vec<f64> = vec![1.0 / (n as f64).sqrt(); n];
    let mut buf_in = vec![T::zero(); n];
    let mut buf_out = vec![T::zero(); n];
    let mut step = |x: &[f64]| -> Vec<f64> {
        for (b, &v) in buf_in.iter_mut().zip(x) {
            *b = T::lit(v);
        }
        apply(&buf_in, &mut buf_out);
        buf_out.iter().map(|v| v.as_f64()).collect()
    };

    let mut x1 = step(&x0);
    let mut prev = f64::NAN;
    let mut estimate = f64::NAN;
    for _ in 0..max_iter {
        let s = norm(&x1);
        if !s.is_finite() {
            return Err(Error::DegenerateReservoir("power iteration overflowed".into()));
        }
        if s < 1e-300 {
            return Err(Error::DegenerateReservoir(
                "power iteration collapsed to zero (nilpotent or all-zero matrix)".into(),
            ));
        }
        // Normalise the pair by the same factor so the recurrence is preserved.
        x0.iter_mut().for_each(|v| *v /= s);
        x1.iter_mut().for_each(|v| *v /= s);
        let x2 = step(&x1);

        // Least squares for x2 ≈ a x1 + b x0.
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let (g11, g10, g00) = (dot(&x1, &x1), dot(&x1, &x0), dot(&x0, &x0));
        let (r1, r0) = (dot(&x1, &x2), dot(&x0, &x2));
        let det = g11 * g00 - g10 * g10;
        let rho = if det.abs() > 1e-14 * g11 * g00 {
            let a = (r1 * g00 - r0 * g10) / det;
            let b = (g11 * r0 - g10 * r1) / det;
            let disc = a * a + 4.0 * b;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                ((a + sq) / 2.0).abs().max(((a - sq) / 2.0).abs())
            } else {
                // |λ|² = λ·λ̄ = −b for the conjugate pair.
                (-b).sqrt()
            }
        } else {
            // x1 ∥ x0: plain Rayleigh growth.
            norm(&x2) / norm(&x1)
        };
        estimate = rho;
        if prev.is_finite() && ((rho - prev) / rho).abs() < tol {
            break;
        }
        prev = rho;
        x0 = x1;
        x1 = x2;
    }
    if !(estimate.is_finite() && estimate > 0.0) {
        return Err(Error::DegenerateReservoir(format!(
            "spectral radius estimate {estimate} is not positive"
        )));
    }
    Ok(estimate)
}

pub fn dvector_from<T: Real>(xs: &[T]) -> DVector<T> {
    DVector::from_column_slice(xs)
}

pub fn all_finite<T: Real>(xs: &[T]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_from_triplets_matches_dense() {
        let m = CsrMatrix::from_triplets(
            3,
            3,
            vec![(2, 0, 1.0), (0, 1, 2.0), (0, 1, 0.5), (1, 2, -1.0)],
        );
        assert_eq!(m.nnz(), 3);
        let d = m.to_dense();
        assert_eq!(d[(0, 1)], 2.5);
        assert_eq!(m.mul_vec(&[1.0, 2.0, 3.0]), vec![5.0, -3.0, 1.0]);
    }

    #[test]
    fn spectral_radius_of_rotation_and_diagonal() {
        // Rotation scaled by 0.7: complex pair with modulus 0.7.
        let (c, s) = (0.7 * 0.3f64.cos(), 0.7 * 0.3f64.sin());
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let apply = |x: &[f64], y: &mut [f64]| {
            let v = &rot * DVector::from_column_slice(x);
            y.copy_from_slice(v.as_slice());
        };
        let rho = spectral_radius::<f64>(apply, 2, 1000, 1e-12).unwrap();
        assert!((rho - 0.7).abs() < 1e-10, "{rho}");

        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, -0.9, 0.5]));
        let apply = |x: &[f64], y: &mut [f64]| {
            let v = &diag * DVector::from_column_slice(x);
            y.copy_from_slice(v.as_slice());
        };
        let rho = spectral_radius::<f64>(apply, 3, 1000, 1e-12).unwrap();
        assert!((rho - 0.9).abs() < 1e-8, "{rho}");
    }

    #[test]
    fn spectral_radius_rejects_zero_matrix() {
        let apply = |_: &[f64], y: &mut [f64]| y.fill(0.0);
        assert!(matches!(
            spectral_radius::<f64>(apply, 4, 100, 1e-8),
            Err(Error::DegenerateReservoir(_))
        ));
    }

    #[test]
    fn qr_positive_has_nonnegative_diagonal() {
        let mut r = rng(3);
        let a: DMatrix<f64> = gaussian_matrix(6, 3, &mut r);
        let (q, rr) = qr_positive(a.clone());
        for k in 0..3 {
            assert!(rr[(k, k)] >= 0.0);
        }
        assert!((&q * &rr - a).norm() < 1e-12);
        assert!((q.transpose() * &q - DMatrix::identity(3, 3)).norm() < 1e-12);
    }
}
