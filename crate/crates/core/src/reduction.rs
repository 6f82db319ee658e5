//! Reduced-order observables from the leading right singular vectors of the
//! mean-subtracted training data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::dynamics::TimeSeriesDataset;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SvdBasis<T> {
    pub mean: DVector<T>,
    /// `d × r`, orthonormal columns.
    pub modes: DMatrix<T>,
    /// All `d` singular values, descending.
    pub singular_values: Vec<T>,
}

impl<T: Real> SvdBasis<T> {
    pub fn dim(&self) -> usize {
        self.modes.nrows()
    }

    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }
}

/// Thin SVD of the centred `N × d` data (row-major) through the eigensystem of
/// its `d × d` scatter matrix. Each mode's largest-magnitude entry is positive.
pub fn fit_svd<T: Real>(values: &[T], dim: usize, rank: usize) -> Result<SvdBasis<T>> {
    if dim == 0 || !values.len().is_multiple_of(dim) {
        return Err(Error::InvalidDimension(format!(
            "{} values do not form rows of width {dim}",
            values.len()
        )));
    }
    if rank > dim {
        return Err(Error::InvalidRank {
            requested: rank,
            dimension: dim,
        });
    }
    let n = values.len() / dim;
    if n == 0 {
        return Err(Error::InvalidArgument("cannot fit a basis to zero samples".into()));
    }
    let (mean, _) = crate::dynamics::column_stats(values, dim);
    let mean = DVector::from_vec(mean);
    let mut centred = DMatrix::from_row_slice(n, dim, values);
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let scatter = centred.transpose() * &centred;
    let eig = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let singular_values = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(T::zero()).sqrt())
        .collect();
    let mut modes = DMatrix::zeros(dim, rank);
    for (c, &i) in order.iter().take(rank).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let pivot = v.iter().copied().fold(T::zero(), |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < T::zero() {
            v.neg_mut();
        }
        modes.set_column(c, &v);
    }
    Ok(SvdBasis {
        mean,
        modes,
        singular_values,
    })
}

/// `c = Vᵣᵀ (x − mean)`
pub fn project<T: Real>(basis: &SvdBasis<T>, state: &[T]) -> Result<Vec<T>> {
    if state.len() != basis.dim() {
        return Err(Error::mismatch("projection state", basis.dim(), state.len()));
    }
    let centred = DVector::from_column_slice(state) - &basis.mean;
    Ok((basis.modes.transpose() * centred).as_slice().to_vec())
}

/// `x = mean + Vᵣ c`
pub fn reconstruct<T: Real>(basis: &SvdBasis<T>, coeffs: &[T]) -> Result<Vec<T>> {
    if coeffs.len() != basis.rank() {
        return Err(Error::mismatch("reconstruction coefficients", basis.rank(), coeffs.len()));
    }
    let x = &basis.mean + &basis.modes * DVector::from_column_slice(coeffs);
    Ok(x.as_slice().to_vec())
}

/// `Σ_{i≤k} σᵢ² / Σᵢ σᵢ²`
pub fn energy_fraction<T: Real>(basis: &SvdBasis<T>, k: usize) -> Result<T> {
    let s = &basis.singular_values;
    if k > s.len() {
        return Err(Error::InvalidRank {
            requested: k,
            dimension: s.len(),
        });
    }
    let total = s.iter().fold(T::zero(), |a, v| a + *v * *v);
    if total == T::zero() {
        return Ok(if k == s.len() { T::one() } else { T::zero() });
    }
    let head = s[..k].iter().fold(T::zero(), |a, v| a + *v * *v);
    Ok(head / total)
}

/// Basis fitted on the training split only.
pub fn fit_dataset<T: Real>(dataset: &TimeSeriesDataset<T>, rank: usize) -> Result<SvdBasis<T>> {
    fit_svd(dataset.train_values(), dataset.dim(), rank)
}

/// Projects every row; statistics of the result are recomputed on its training split.
pub fn reduce_dataset<T: Real>(
    dataset: &TimeSeriesDataset<T>,
    basis: &SvdBasis<T>,
) -> Result<TimeSeriesDataset<T>> {
    if dataset.dim() != basis.dim() {
        return Err(Error::mismatch("reduced dataset", basis.dim(), dataset.dim()));
    }
    dataset.map_rows(basis.rank(), |row| {
        project(basis, row).expect("row width checked above")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, rng};

    #[test]
    fn rank_one_data() {
        let values: Vec<f64> = (0..20)
            .flat_map(|t| [t as f64 - 3.0, 2.0, -1.0])
            .collect();
        let b = fit_svd(&values, 3, 2).unwrap();
        assert!((b.modes[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(b.singular_values[1].abs() < 1e-6);
        assert!(fit_svd(&values, 3, 4).is_err());
    }

    #[test]
    fn hand_matrix_matches_full_svd() {
        let x = [1.0, 2.0, 0.0, -1.0, 0.5, 3.0, 2.0, -2.0, 1.0, 0.0, 1.0, -1.5];
        let b = fit_svd(&x, 3, 3).unwrap();
        let mut m = DMatrix::from_row_slice(4, 3, &x);
        let mean = m.row_mean();
        for mut r in m.row_iter_mut() {
            r -= &mean;
        }
        let mut oracle: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for (a, e) in b.singular_values.iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }
    }

    #[test]
    fn projection_identities() {
        let mut r = rng(2);
        let data: DMatrix<f64> = gaussian_matrix(50, 5, &mut r);
        let values: Vec<f64> = data.transpose().as_slice().to_vec();
        let full = fit_svd(&values, 5, 5).unwrap();
        let part = fit_svd(&values, 5, 3).unwrap();
        assert!((full.modes.transpose() * &full.modes - DMatrix::identity(5, 5)).amax() < 1e-10);

        let mean: Vec<f64> = full.mean.as_slice().to_vec();
        assert!(project(&full, &mean).unwrap().iter().all(|c| c.abs() < 1e-14));

        let x: Vec<f64> = gaussian_matrix::<f64>(5, 1, &mut r).as_slice().to_vec();
        let c = project(&full, &x).unwrap();
        let dx = DVector::from_column_slice(&x) - &full.mean;
        assert!((DVector::from_vec(c.clone()).norm() - dx.norm()).abs() < 1e-10);

        let back = reconstruct(&part, &project(&part, &x).unwrap()).unwrap();
        let resid: f64 = x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum();
        let discarded: f64 = c[3..].iter().map(|v| v * v).sum();
        assert!((resid - discarded).abs() < 1e-10);

        let coeffs = vec![0.3, -1.0, 2.0];
        let again = project(&part, &reconstruct(&part, &coeffs).unwrap()).unwrap();
        for (a, b) in again.iter().zip(&coeffs) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(project(&part, &[0.0; 4]).is_err());
        assert!(reconstruct(&part, &[0.0; 5]).is_err());
    }

    #[test]
    fn energy_fraction_cases() {
        let b = SvdBasis {
            mean: DVector::zeros(3),
            modes: DMatrix::identity(3, 1),
            singular_values: vec![2.0, 1.0, 1.0],
        };
        assert!((energy_fraction::<f64>(&b, 1).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(energy_fraction(&b, 3).unwrap(), 1.0);
        assert!(energy_fraction(&b, 4).is_err());
    }

    #[test]
    fn modes_have_positive_pivot() {
        let mut r = rng(7);
        let data: DMatrix<f64> = gaussian_matrix(30, 4, &mut r);
        let b = fit_svd(data.transpose().as_slice(), 4, 4).unwrap();
        for c in b.modes.column_iter() {
            let pivot = c.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(pivot > 0.0);
        }
    }
}
