//! Forecast scores: NRMSE, valid prediction time and power spectra.

use std::fmt::Write as _;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::forecasting::ForecastRun;
use crate::{Error, Real, Result};

/// Default NRMSE threshold for the valid prediction time.
pub const DEFAULT_EPSILON: f64 = 0.5;
/// Floor applied to spectra of vanishing amplitude.
pub const PSD_FLOOR_DB: f64 = -200.0;

/// `sqrt(mean_i ((pred_i − target_i) / σ_i)²)`
pub fn nrmse<T: Real>(pred: &[T], target: &[T], sigma: &[T]) -> Result<T> {
    if pred.len() != target.len() || pred.len() != sigma.len() {
        return Err(Error::mismatch("nrmse operands", sigma.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidDimension("nrmse of an empty vector".into()));
    }
    let mut acc = T::zero();
    for (i, ((p, t), s)) in pred.iter().zip(target).zip(sigma).enumerate() {
        if !(*s > T::zero()) {
            return Err(Error::InvalidNormalization(i));
        }
        let e = (*p - *t) / *s;
        acc += e * e;
    }
    Ok((acc / T::from_usize_lossy(pred.len())).sqrt())
}

/// Per-step NRMSE of a run, padded to the requested horizon by holding the
/// value at the divergent step.
pub fn nrmse_curve<T: Real>(run: &ForecastRun<T>, sigma: &[T]) -> Result<Vec<T>> {
    let d = run.dim;
    let mut curve = Vec::with_capacity(run.horizon);
    for (p, t) in run.predictions.chunks_exact(d).zip(run.targets.chunks_exact(d)) {
        curve.push(nrmse(p, t, sigma)?);
    }
    if let Some(&last) = curve.last() {
        curve.resize(run.horizon, last);
    }
    Ok(curve)
}

/// Valid prediction time in Lyapunov times: `Λ1 · dt · (steps before the
/// curve first reaches ε)`.
pub fn vpt<T: Real>(curve: &[T], dt: T, lambda1: T, epsilon: T) -> Result<T> {
    if !(lambda1 > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "valid prediction time needs a positive Λ1, got {}",
            lambda1.as_f64()
        )));
    }
    let valid = curve.iter().take_while(|v| **v < epsilon).count();
    Ok(T::from_usize_lossy(valid) * dt * lambda1)
}

/// Spectrum of a row-major `N × dim` series: one-sided bins `0..=N/2`,
/// `20·log10(2|U(f)|)` with `U = FFT(x)/N`, floored at −200 dB, averaged over components.
pub fn power_spectrum<T: Real>(series: &[T], dim: usize, dt: T) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim == 0 || !series.len().is_multiple_of(dim) {
        return Err(Error::InvalidDimension("ragged spectrum input".into()));
    }
    let n = series.len() / dim;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("spectrum needs >= 2 samples, got {n}")));
    }
    let bins = n / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::default(); n];
    let mut db = vec![0.0; bins];
    for c in 0..dim {
        for (t, z) in buf.iter_mut().enumerate() {
            *z = Complex64::new(series[t * dim + c].as_f64(), 0.0);
        }
        fft.process(&mut buf);
        for (k, acc) in db.iter_mut().enumerate() {
            let amp = 2.0 * buf[k].norm() / n as f64;
            *acc += if amp > 0.0 {
                (20.0 * amp.log10()).max(PSD_FLOOR_DB)
            } else {
                PSD_FLOOR_DB
            };
        }
    }
    db.iter_mut().for_each(|v| *v /= dim as f64);
    let df = 1.0 / (n as f64 * dt.as_f64());
    let freqs = (0..bins).map(|k| k as f64 * df).collect();
    Ok((freqs, db))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport<T> {
    /// Mean NRMSE per forecast step over all runs.
    pub nrmse_curve: Vec<T>,
    /// Per-run valid prediction time (Lyapunov times).
    pub vpt: Vec<T>,
    pub vpt_mean: T,
    pub vpt_min: T,
    pub vpt_max: T,
    pub divergent_count: usize,
    pub initial_indices: Vec<usize>,
    pub diverged_at: Vec<Option<usize>>,
    pub psd_frequencies: Vec<f64>,
    /// Mean over full-length runs of the prediction spectra.
    pub psd_predictions: Vec<f64>,
    pub psd_targets: Vec<f64>,
    pub dt: T,
    pub lambda1: T,
    pub epsilon: T,
}

/// Aggregates runs: pointwise mean NRMSE curve, per-run VPT and its
/// mean/min/max, divergence count, and run-averaged spectra.
pub fn summarize<T: Real>(
    runs: &[ForecastRun<T>],
    sigma: &[T],
    dt: T,
    lambda1: T,
    epsilon: T,
) -> Result<MetricsReport<T>> {
    let horizon = runs.first().map_or(0, |r| r.horizon);
    if runs.iter().any(|r| r.horizon != horizon) {
        return Err(Error::InvalidArgument("runs with different horizons".into()));
    }
    let mut mean_curve = vec![T::zero(); horizon];
    let mut vpts = Vec::with_capacity(runs.len());
    for r in runs {
        let curve = nrmse_curve(r, sigma)?;
        for (acc, v) in mean_curve.iter_mut().zip(&curve) {
            *acc += *v;
        }
        vpts.push(vpt(&curve, dt, lambda1, epsilon)?);
    }
    let count = T::from_usize_lossy(runs.len().max(1));
    mean_curve.iter_mut().for_each(|v| *v /= count);
    let vpt_mean = vpts.iter().fold(T::zero(), |a, v| a + *v) / count;
    let vpt_min = vpts.iter().copied().reduce(|a, b| a.min(b)).unwrap_or(T::zero());
    let vpt_max = vpts.iter().copied().reduce(|a, b| a.max(b)).unwrap_or(T::zero());

    let full: Vec<&ForecastRun<T>> = runs
        .iter()
        .filter(|r| r.diverged_at.is_none() && r.horizon >= 2)
        .collect();
    let (mut freqs, mut psd_p, mut psd_t) = (Vec::new(), Vec::new(), Vec::new());
    for r in &full {
        let (f, p) = power_spectrum(&r.predictions, r.dim, dt)?;
        let (_, t) = power_spectrum(&r.targets, r.dim, dt)?;
        if psd_p.is_empty() {
            freqs = f;
            psd_p = vec![0.0; p.len()];
            psd_t = vec![0.0; t.len()];
        }
        psd_p.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
        psd_t.iter_mut().zip(&t).for_each(|(a, v)| *a += v);
    }
    let nf = full.len().max(1) as f64;
    psd_p.iter_mut().chain(psd_t.iter_mut()).for_each(|v| *v /= nf);

    Ok(MetricsReport {
        nrmse_curve: mean_curve,
        vpt: vpts,
        vpt_mean,
        vpt_min,
        vpt_max,
        divergent_count: runs.iter().filter(|r| r.diverged_at.is_some()).count(),
        initial_indices: runs.iter().map(|r| r.initial_index).collect(),
        diverged_at: runs.iter().map(|r| r.diverged_at).collect(),
        psd_frequencies: freqs,
        psd_predictions: psd_p,
        psd_targets: psd_t,
        dt,
        lambda1,
        epsilon,
    })
}

impl<T: Real> MetricsReport<T> {
    /// `step,time,lyapunov_time,nrmse`
    pub fn nrmse_csv(&self) -> String {
        let mut s = String::from("step,time,lyapunov_time,nrmse\n");
        let (dt, l1) = (self.dt.as_f64(), self.lambda1.as_f64());
        for (k, v) in self.nrmse_curve.iter().enumerate() {
            let t = (k + 1) as f64 * dt;
            let _ = writeln!(s, "{},{:e},{:e},{:e}", k + 1, t, t * l1, v.as_f64());
        }
        s
    }

    /// `run,initial_index,vpt,diverged_at`
    pub fn vpt_csv(&self) -> String {
        let mut s = String::from("run,initial_index,vpt,diverged_at\n");
        for (i, v) in self.vpt.iter().enumerate() {
            let div = self.diverged_at[i].map(|k| k.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{:e},{}", i, self.initial_indices[i], v.as_f64(), div);
        }
        s
    }

    /// `frequency,psd_prediction_db,psd_target_db`
    pub fn psd_csv(&self) -> String {
        let mut s = String::from("frequency,psd_prediction_db,psd_target_db\n");
        for k in 0..self.psd_frequencies.len() {
            let _ = writeln!(
                s,
                "{:e},{:e},{:e}",
                self.psd_frequencies[k], self.psd_predictions[k], self.psd_targets[k]
            );
        }
        s
    }

    /// `key=value` lines.
    pub fn summary_text(&self) -> String {
        format!(
            "runs={}\nvpt_mean={:e}\nvpt_min={:e}\nvpt_max={:e}\ndivergent={}\nepsilon={:e}\nlambda1={:e}\ndt={:e}\n",
            self.vpt.len(),
            self.vpt_mean.as_f64(),
            self.vpt_min.as_f64(),
            self.vpt_max.as_f64(),
            self.divergent_count,
            self.epsilon.as_f64(),
            self.lambda1.as_f64(),
            self.dt.as_f64(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nrmse_examples() {
        assert_eq!(nrmse(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(nrmse(&[3.0], &[1.0], &[2.0]).unwrap(), 1.0);
        assert_eq!(nrmse(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(
            nrmse(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::InvalidNormalization(1))
        ));
    }

    #[test]
    fn vpt_examples() {
        let v: f64 = vpt(&[0.1, 0.2, 0.6, 0.3], 0.01, 2.0, 0.5).unwrap();
        assert!((v - 0.04).abs() < 1e-15);
        assert!((vpt::<f64>(&[0.0; 30], 0.01, 2.0, 0.5).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(vpt(&[0.7, 0.1], 0.01, 2.0, 0.5).unwrap(), 0.0);
        assert!(vpt(&[0.1], 0.01, 0.0, 0.5).is_err());
    }

    #[test]
    fn sinusoid_spectrum_peaks_at_its_bin() {
        let n = 256;
        let k = 10;
        let xs: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * k as f64 * t as f64 / n as f64).sin())
            .collect();
        let (f, db) = power_spectrum(&xs, 1, 0.1).unwrap();
        assert_eq!(f.len(), n / 2 + 1);
        let peak = db
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, k);
        assert!(db[k].abs() < 1e-10, "{}", db[k]);
        assert!((f[k] - k as f64 / (n as f64 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn zero_signal_hits_floor() {
        let (_, db) = power_spectrum(&[0.0; 16], 1, 1.0).unwrap();
        assert!(db.iter().all(|v| *v == PSD_FLOOR_DB));
        assert!(power_spectrum(&[1.0], 1, 1.0).is_err());
    }

    fn run(idx: usize, preds: Vec<f64>, targets: Vec<f64>) -> ForecastRun<f64> {
        ForecastRun {
            initial_index: idx,
            warmup_steps: 0,
            horizon: preds.len(),
            dim: 1,
            predictions: preds,
            targets,
            diverged_at: None,
        }
    }

    #[test]
    fn summary_of_one_and_duplicated_runs() {
        let r = run(3, vec![0.0, 0.2, 1.0, 2.0], vec![0.0; 4]);
        let one = summarize(std::slice::from_ref(&r), &[1.0], 0.1, 1.0, 0.5).unwrap();
        assert_eq!(one.nrmse_curve, vec![0.0, 0.2, 1.0, 2.0]);
        assert!((one.vpt_mean - 0.2).abs() < 1e-15);
        let two = summarize(&[r.clone(), r], &[1.0], 0.1, 1.0, 0.5).unwrap();
        assert_eq!(two.vpt_mean, one.vpt_mean);
        assert_eq!(two.vpt_min, two.vpt_max);
    }

    #[test]
    fn divergent_runs_hold_last_value() {
        let mut r = run(0, vec![0.1, 50.0], vec![0.0, 0.0]);
        r.horizon = 5;
        r.diverged_at = Some(1);
        let curve = nrmse_curve(&r, &[1.0]).unwrap();
        assert_eq!(curve, vec![0.1, 50.0, 50.0, 50.0, 50.0]);
        let rep = summarize(&[r], &[1.0], 1.0, 1.0, 0.5).unwrap();
        assert_eq!(rep.divergent_count, 1);
        assert!(rep.psd_frequencies.is_empty());
    }

    #[test]
    fn empty_horizon_gives_empty_curves() {
        let rep = summarize(&[run(0, vec![], vec![])], &[1.0], 0.1, 1.0, 0.5).unwrap();
        assert!(rep.nrmse_curve.is_empty());
        assert_eq!(rep.vpt, vec![0.0]);
    }
}
