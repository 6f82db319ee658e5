use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::{Error, Real, Result};

const MAGIC: [u8; 4] = *b"CHF1";

/// Sampled trajectory of an observable with its train/test boundary and
/// per-component statistics computed on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset<T> {
    values: Vec<T>,
    dim: usize,
    dt: T,
    mean: Vec<T>,
    std: Vec<T>,
    split: usize,
}

impl<T: Real> TimeSeriesDataset<T> {
    /// `values` is row-major, one sample of length `dim` per row.
    pub fn new(values: Vec<T>, dim: usize, dt: T, split: usize) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(Error::InvalidDimension(format!(
                "{} values do not form rows of width {dim}",
                values.len()
            )));
        }
        let n = values.len() / dim;
        if split == 0 || split > n {
            return Err(Error::InvalidArgument(format!(
                "train split {split} outside 1..={n}"
            )));
        }
        let (mean, std) = column_stats(&values[..split * dim], dim);
        if let Some(i) = std.iter().position(|s| *s <= T::zero() || !s.is_finite()) {
            return Err(Error::InvalidNormalization(i));
        }
        Ok(Self {
            values,
            dim,
            dt,
            mean,
            std,
            split,
        })
    }

    /// Attaches externally supplied statistics (used by file readers and
    /// normalised views).
    pub fn with_stats(
        values: Vec<T>,
        dim: usize,
        dt: T,
        split: usize,
        mean: Vec<T>,
        std: Vec<T>,
    ) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(Error::InvalidDimension(format!(
                "{} values do not form rows of width {dim}",
                values.len()
            )));
        }
        if mean.len() != dim || std.len() != dim {
            return Err(Error::mismatch("dataset statistics", dim, mean.len().min(std.len())));
        }
        if split > values.len() / dim {
            return Err(Error::Inconsistent(format!("split {split} beyond data")));
        }
        if let Some(i) = std.iter().position(|s| *s <= T::zero()) {
            return Err(Error::InvalidNormalization(i));
        }
        Ok(Self {
            values,
            dim,
            dt,
            mean,
            std,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn std(&self) -> &[T] {
        &self.std
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Rows `range` as a contiguous row-major slice.
    pub fn rows(&self, range: std::ops::Range<usize>) -> &[T] {
        &self.values[range.start * self.dim..range.end * self.dim]
    }

    pub fn train_values(&self) -> &[T] {
        self.rows(0..self.split)
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        self.split..self.len()
    }

    /// `N × dim` matrix copy of the rows in `range`.
    pub fn matrix(&self, range: std::ops::Range<usize>) -> DMatrix<T> {
        DMatrix::from_row_slice(range.len(), self.dim, self.rows(range))
    }

    /// Largest absolute value seen in the training split.
    pub fn train_max_abs(&self) -> T {
        self.train_values()
            .iter()
            .fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Z-scored copy using the training statistics; the copy carries mean 0 and std 1.
    pub fn normalized(&self) -> Self {
        let values = self
            .values
            .chunks(self.dim)
            .flat_map(|row| {
                row.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(x, (m, s))| (*x - *m) / *s)
            })
            .collect();
        Self {
            values,
            dim: self.dim,
            dt: self.dt,
            mean: vec![T::zero(); self.dim],
            std: vec![T::one(); self.dim],
            split: self.split,
        }
    }

    /// Applies `f` to every row, producing a dataset of a new width whose
    /// statistics are recomputed on the training split.
    pub fn map_rows(&self, new_dim: usize, f: impl Fn(&[T]) -> Vec<T>) -> Result<Self> {
        let mut values = Vec::with_capacity(self.len() * new_dim);
        for row in self.values.chunks(self.dim) {
            let mapped = f(row);
            if mapped.len() != new_dim {
                return Err(Error::mismatch("mapped row", new_dim, mapped.len()));
            }
            values.extend(mapped);
        }
        Self::new(values, new_dim, self.dt, self.split)
    }

    pub fn cast<U: Real>(&self) -> TimeSeriesDataset<U> {
        let c = |xs: &[T]| xs.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        TimeSeriesDataset {
            values: c(&self.values),
            dim: self.dim,
            dt: U::lit(self.dt.as_f64()),
            mean: c(&self.mean),
            std: c(&self.std),
            split: self.split,
        }
    }

    /// Writes the `CHF1` container: magic, u32 dim, u64 N, f64 dt, u64 split,
    /// N·dim f64 samples row-major, then dim f64 means and dim f64 stds, all
    /// little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.dt.as_f64().to_le_bytes())?;
        w.write_all(&(self.split as u64).to_le_bytes())?;
        for x in self.values.iter().chain(&self.mean).chain(&self.std) {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        read_exact(r, &mut b4, "dimension")?;
        let dim = u32::from_le_bytes(b4) as usize;
        read_exact(r, &mut b8, "sample count")?;
        let n = u64::from_le_bytes(b8) as usize;
        read_exact(r, &mut b8, "dt")?;
        let dt = f64::from_le_bytes(b8);
        read_exact(r, &mut b8, "split")?;
        let split = u64::from_le_bytes(b8) as usize;
        if dim == 0 {
            return Err(Error::Inconsistent("dimension is zero".into()));
        }
        let total = n
            .checked_mul(dim)
            .and_then(|v| v.checked_add(2 * dim))
            .ok_or_else(|| Error::Inconsistent("sample count overflows".into()))?;
        let mut floats = Vec::with_capacity(total.min(1 << 28));
        for i in 0..total {
            read_exact(r, &mut b8, "samples").map_err(|_| {
                Error::Truncated(format!("expected {total} values, found {i}"))
            })?;
            floats.push(T::lit(f64::from_le_bytes(b8)));
        }
        let std = floats.split_off(n * dim + dim);
        let mean = floats.split_off(n * dim);
        Self::with_stats(floats, dim, T::lit(dt), split, mean, std)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("missing {what}")),
        _ => Error::Io(e),
    })
}

/// Per-column mean and (population) standard deviation of row-major data.
pub fn column_stats<T: Real>(values: &[T], dim: usize) -> (Vec<T>, Vec<T>) {
    let n = values.len() / dim;
    let mut mean = vec![0.0f64; dim];
    for row in values.chunks(dim) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; dim];
    for row in values.chunks(dim) {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x.as_f64() - m;
            *v += d * d;
        }
    }
    let std = var.iter().map(|v| T::lit((v / n as f64).sqrt())).collect();
    (mean.into_iter().map(T::lit).collect(), std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> TimeSeriesDataset<f64> {
        let values: Vec<f64> = (0..20).map(|i| (i as f64).sin() + i as f64 * 0.1).collect();
        TimeSeriesDataset::new(values, 2, 0.5, 6).unwrap()
    }

    #[test]
    fn container_round_trip_is_exact() {
        let ds = ramp();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CHF1");
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 8 + 8 * (20 + 4));
        let back = TimeSeriesDataset::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn container_rejects_bad_magic_and_truncation() {
        let ds = ramp();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            TimeSeriesDataset::<f64>::read_from(&mut bad.as_slice()),
            Err(Error::BadMagic { .. })
        ));
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            TimeSeriesDataset::<f64>::read_from(&mut buf.as_slice()),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn statistics_come_from_training_split() {
        let ds = TimeSeriesDataset::new(vec![1.0, 3.0, 100.0], 1, 1.0, 2).unwrap();
        assert_eq!(ds.mean(), &[2.0]);
        assert_eq!(ds.std(), &[1.0]);
        let z = ds.normalized();
        assert_eq!(z.values(), &[-1.0, 1.0, 98.0]);
    }

    #[test]
    fn constant_component_is_rejected() {
        let err = TimeSeriesDataset::new(vec![1.0, 2.0, 1.0, 3.0], 2, 1.0, 2).unwrap_err();
        assert!(matches!(err, Error::InvalidNormalization(0)));
    }
}
