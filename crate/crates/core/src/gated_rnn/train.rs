use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;

use super::adam::{adam_step_model, AdamState};
use super::bptt::{window_pass, WindowMasks};
use super::GatedRnnModel;
use crate::dynamics::{column_stats, TimeSeriesDataset};
use crate::linalg::{gaussian, rng, SeededRng};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BpttConfig {
    /// Steps whose predictions enter the loss.
    pub kappa1: usize,
    /// Truncation length.
    pub kappa2: usize,
    pub batch_size: usize,
    /// Probability of taking the new recurrent value (1 disables zoneout and dropout).
    pub zoneout_keep: f64,
    /// Input noise as a fraction of each component's std.
    pub noise_level: f64,
    pub lr0: f64,
    pub n_rounds: usize,
    pub patience: usize,
    /// Hard cap on epochs per round.
    pub max_epochs: usize,
    /// Trailing fraction of the training rows held out for validation.
    pub validation_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for BpttConfig {
    fn default() -> Self {
        Self {
            kappa1: 4,
            kappa2: 8,
            batch_size: 32,
            zoneout_keep: 1.0,
            noise_level: 0.0,
            lr0: 1e-3,
            n_rounds: 3,
            patience: 20,
            max_epochs: 100,
            validation_fraction: 0.1,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl BpttConfig {
    /// Teacher-forcing stride between weight updates, `κ2 + κ1 − 1`.
    pub fn kappa3(&self) -> usize {
        self.kappa2 + self.kappa1 - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa1 == 0 || self.kappa2 == 0 {
            return Err(Error::InvalidConfig("kappa1 and kappa2 must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.zoneout_keep > 0.0 && self.zoneout_keep <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "zoneout keep probability must lie in (0, 1], got {}",
                self.zoneout_keep
            )));
        }
        if !(self.lr0 > 0.0) || !(self.noise_level >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::InvalidConfig(
                "learning rate must be positive; noise and clip non-negative".into(),
            ));
        }
        if self.n_rounds == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("need at least one round and one epoch".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig("validation fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub round: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub best_val_loss: f64,
    /// Index into `epochs` of the selected weights.
    pub best_epoch: Option<usize>,
    pub diverged_rounds: Vec<usize>,
}

impl TrainingReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("round,epoch,lr,train_loss,val_loss,updates\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{}",
                e.round, e.epoch, e.lr, e.train_loss, e.val_loss, e.updates
            );
        }
        s
    }
}

/// Trains on the dataset's training split with next-step targets.
pub fn train_bptt<T: Real>(
    model: &GatedRnnModel<T>,
    dataset: &TimeSeriesDataset<T>,
    cfg: &BpttConfig,
) -> Result<(GatedRnnModel<T>, TrainingReport)> {
    let split = dataset.split();
    if split < 2 {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    train_bptt_supervised(model, dataset.rows(0..split - 1), dataset.rows(1..split), cfg)
}

struct Series<'a, T> {
    inputs: &'a [T],
    targets: &'a [T],
    d_in: usize,
    d_out: usize,
}

impl<T: Real> Series<'_, T> {
    fn input_block(&self, rows: &[usize], noise: Option<(&[f64], &mut SeededRng)>) -> DMatrix<T> {
        let mut m = DMatrix::from_fn(self.d_in, rows.len(), |i, b| {
            self.inputs[rows[b] * self.d_in + i]
        });
        if let Some((scale, r)) = noise {
            for b in 0..rows.len() {
                for i in 0..self.d_in {
                    if scale[i] > 0.0 {
                        m[(i, b)] += T::lit(scale[i]) * gaussian::<T>(r);
                    }
                }
            }
        }
        m
    }

    fn target_block(&self, rows: &[usize]) -> DMatrix<T> {
        DMatrix::from_fn(self.d_out, rows.len(), |i, b| self.targets[rows[b] * self.d_out + i])
    }
}

fn bernoulli_mask<T: Real>(rows: usize, cols: usize, keep: f64, scale: f64, r: &mut SeededRng) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |_, _| {
        if r.random::<f64>() < keep {
            T::lit(scale)
        } else {
            T::zero()
        }
    })
}

fn clip_gradients<T: Real>(grads: &mut GatedRnnModel<T>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .blocks()
        .iter()
        .map(|b| b.norm_squared().as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for b in grads.blocks_mut() {
            *b *= s;
        }
    }
}

/// Stateful truncated-BPTT training with epoch batching, Adam, zoneout,
/// input noise, validation early stopping and learning-rate rounds.
///
/// `inputs` (`N × d_in`) and `targets` (`N × d_out`) are row-major and aligned:
/// `targets[t]` is what the model should predict after consuming `inputs[t]`.
pub fn train_bptt_supervised<T: Real>(
    model: &GatedRnnModel<T>,
    inputs: &[T],
    targets: &[T],
    cfg: &BpttConfig,
) -> Result<(GatedRnnModel<T>, TrainingReport)> {
    cfg.validate()?;
    let (d_in, d_out) = (model.input_dim(), model.output_dim());
    if !inputs.len().is_multiple_of(d_in) || !targets.len().is_multiple_of(d_out) {
        return Err(Error::InvalidDimension("ragged training rows".into()));
    }
    let n = inputs.len() / d_in;
    if targets.len() / d_out != n {
        return Err(Error::mismatch("training targets", n, targets.len() / d_out));
    }
    let k3 = cfg.kappa3();
    let n_val = ((n as f64) * cfg.validation_fraction).round() as usize;
    let n_tr = n - n_val;
    if n_tr < k3 || n_val < k3 {
        return Err(Error::InvalidArgument(format!(
            "{n} rows are too few for windows of {k3} steps with a {:.0}% validation split",
            cfg.validation_fraction * 100.0
        )));
    }
    let train = Series {
        inputs: &inputs[..n_tr * d_in],
        targets: &targets[..n_tr * d_out],
        d_in,
        d_out,
    };
    let val = Series {
        inputs: &inputs[n_tr * d_in..],
        targets: &targets[n_tr * d_out..],
        d_in,
        d_out,
    };
    let noise: Vec<f64> = if cfg.noise_level > 0.0 {
        column_stats(train.inputs, d_in)
            .1
            .iter()
            .map(|s| s.as_f64() * cfg.noise_level)
            .collect()
    } else {
        Vec::new()
    };

    let mut r = rng(cfg.seed);
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut report = TrainingReport {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut lr = cfg.lr0;
    for round in 0..cfg.n_rounds {
        current.clone_from(&best);
        let mut adam = AdamState::for_model(&current);
        let mut stale = 0;
        for epoch in 0..cfg.max_epochs {
            let outcome = run_epoch(&mut current, &train, cfg, &noise, &mut adam, lr, &mut r);
            let (train_loss, updates) = match outcome {
                Ok(v) => v,
                Err(Error::TrainingDivergence(_)) => {
                    report.diverged_rounds.push(round);
                    current.clone_from(&best);
                    break;
                }
                Err(e) => return Err(e),
            };
            let val_loss = validation_loss(&current, &val, k3, cfg.kappa1).as_f64();
            report.epochs.push(EpochRecord {
                round,
                epoch,
                lr,
                train_loss,
                val_loss,
                updates,
            });
            if val_loss < best_val {
                best_val = val_loss;
                best.clone_from(&current);
                report.best_epoch = Some(report.epochs.len() - 1);
                stale = 0;
            } else {
                stale += 1;
            }
            if stale >= cfg.patience {
                break;
            }
        }
        lr /= 10.0;
    }
    report.best_val_loss = best_val;
    Ok((best, report))
}

fn run_epoch<T: Real>(
    model: &mut GatedRnnModel<T>,
    train: &Series<'_, T>,
    cfg: &BpttConfig,
    noise: &[f64],
    adam: &mut AdamState<T>,
    lr: f64,
    r: &mut SeededRng,
) -> Result<(f64, usize)> {
    let k3 = cfg.kappa3();
    let n_tr = train.inputs.len() / train.d_in;
    let n_starts = n_tr - k3 + 1;
    let mut open = vec![true; n_starts];
    let mut remaining: Vec<usize> = (0..n_starts).collect();
    let keep = cfg.zoneout_keep;
    let d_h = model.hidden_dim();
    let layers = model.layer_count();
    let mut loss_sum = 0.0;
    let mut updates = 0;

    while !remaining.is_empty() {
        let b = cfg.batch_size.min(remaining.len());
        let mut starts: Vec<usize> = sample(r, remaining.len(), b)
            .into_iter()
            .map(|i| remaining[i])
            .collect();
        starts.sort_unstable();
        let max_start = *starts.last().expect("non-empty batch");
        // Sweep until the latest chain passes the largest index still unvisited.
        let last_open = *remaining.last().expect("non-empty index set");
        let windows = ((n_tr - max_start) / k3).min((last_open - max_start) / k3 + 1);
        let mut state = model.zero_state(b);
        for w in 0..windows {
            let masks = if keep < 1.0 {
                WindowMasks {
                    zoneout: Some(
                        (0..layers)
                            .map(|_| bernoulli_mask(d_h, b, keep, 1.0, r))
                            .collect(),
                    ),
                    dropout: Some(bernoulli_mask(d_h, b, keep, 1.0 / keep, r)),
                }
            } else {
                WindowMasks::default()
            };
            let base = w * k3;
            let mut inputs = Vec::with_capacity(k3);
            for step in 0..k3 {
                let rows: Vec<usize> = starts.iter().map(|s| s + base + step).collect();
                let noise_arg = if noise.is_empty() { None } else { Some((noise, &mut *r)) };
                inputs.push(train.input_block(&rows, noise_arg));
            }
            let targets: Vec<DMatrix<T>> = (k3 - cfg.kappa1..k3)
                .map(|step| {
                    let rows: Vec<usize> = starts.iter().map(|s| s + base + step).collect();
                    train.target_block(&rows)
                })
                .collect();
            let mut grads = model.zeros_like();
            let loss = window_pass(model, &inputs, &targets, &mut state, &masks, Some(&mut grads));
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence(format!(
                    "non-finite window loss after {updates} updates"
                )));
            }
            clip_gradients(&mut grads, cfg.clip_norm);
            adam_step_model(model, &grads, adam, T::lit(lr))?;
            if !model.all_finite() {
                return Err(Error::TrainingDivergence("non-finite weights".into()));
            }
            loss_sum += loss.as_f64();
            updates += 1;
        }
        for &s in &starts {
            for i in s..(s + windows * k3).min(n_starts) {
                open[i] = false;
            }
        }
        remaining.retain(|&i| open[i]);
    }
    Ok((loss_sum / updates.max(1) as f64, updates))
}

/// Deterministic single-stream loss over the held-out rows: zero initial
/// state, windows of `κ3` steps, the first window only warms up the state.
fn validation_loss<T: Real>(
    model: &GatedRnnModel<T>,
    val: &Series<'_, T>,
    k3: usize,
    k1: usize,
) -> T {
    let n = val.inputs.len() / val.d_in;
    let windows = n / k3;
    let mut state = model.zero_state(1);
    let masks = WindowMasks::default();
    let mut total = T::zero();
    let mut scored = 0;
    for w in 0..windows {
        let inputs: Vec<DMatrix<T>> = (0..k3).map(|s| val.input_block(&[w * k3 + s], None)).collect();
        let targets: Vec<DMatrix<T>> = (k3 - k1..k3).map(|s| val.target_block(&[w * k3 + s])).collect();
        let loss = window_pass(model, &inputs, &targets, &mut state, &masks, None);
        if w > 0 || windows == 1 {
            total += loss;
            scored += 1;
        }
    }
    total / T::from_usize_lossy(scored.max(1))
}

#[cfg(test)]
mod tests {
    use super::super::CellKind;
    use super::*;
    use crate::linalg::gaussian_matrix;

    fn toy(n: usize, seed: u64) -> Vec<f64> {
        let m: DMatrix<f64> = gaussian_matrix(2, n, &mut rng(seed));
        m.as_slice().iter().map(|v| v * 0.5).collect()
    }

    fn quick() -> BpttConfig {
        BpttConfig {
            kappa1: 1,
            kappa2: 2,
            batch_size: 8,
            lr0: 1e-2,
            n_rounds: 2,
            patience: 5,
            max_epochs: 40,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn kappa3_is_derived() {
        let c = BpttConfig {
            kappa1: 8,
            kappa2: 16,
            ..Default::default()
        };
        assert_eq!(c.kappa3(), 23);
    }

    #[test]
    fn learns_identity_map() {
        let xs = toy(600, 1);
        let model: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Gru, 2, 8, 2, 1, 2).unwrap();
        let (trained, report) = train_bptt_supervised(&model, &xs, &xs, &quick()).unwrap();
        assert!(report.best_val_loss < 1e-3, "{}", report.best_val_loss);
        assert!(trained.all_finite());
        for e in &report.epochs {
            assert!(report.best_val_loss <= e.val_loss);
        }
    }

    #[test]
    fn zero_patience_gives_one_epoch_per_round() {
        let xs = toy(200, 2);
        let model: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Lstm, 2, 4, 2, 1, 2).unwrap();
        let cfg = BpttConfig {
            patience: 0,
            n_rounds: 3,
            ..quick()
        };
        let (_, report) = train_bptt_supervised(&model, &xs, &xs, &cfg).unwrap();
        assert_eq!(report.epochs.len(), 3);
        assert_eq!(
            report.epochs.iter().map(|e| e.round).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn same_seed_same_result() {
        let xs = toy(200, 3);
        let model: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Gru, 2, 4, 2, 2, 2).unwrap();
        let cfg = BpttConfig {
            zoneout_keep: 0.9,
            noise_level: 0.01,
            max_epochs: 3,
            ..quick()
        };
        let a = train_bptt_supervised(&model, &xs, &xs, &cfg).unwrap();
        let b = train_bptt_supervised(&model, &xs, &xs, &cfg).unwrap();
        assert_eq!(a.1.best_val_loss, b.1.best_val_loss);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn keep_probability_one_matches_disabled_masks() {
        // keep = 1 never draws masks, so it must coincide with a run that has no zoneout at all.
        let xs = toy(200, 4);
        let model: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Gru, 2, 4, 2, 1, 2).unwrap();
        let cfg = BpttConfig { max_epochs: 2, ..quick() };
        let a = train_bptt_supervised(&model, &xs, &xs, &cfg).unwrap();
        let b = train_bptt_supervised(&model, &xs, &xs, &BpttConfig { zoneout_keep: 1.0, ..cfg }).unwrap();
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn epoch_visits_cover_the_index_set() {
        let xs = toy(300, 5);
        let mut model: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Gru, 2, 3, 2, 1, 2).unwrap();
        let cfg = quick();
        let series = Series { inputs: &xs, targets: &xs, d_in: 2, d_out: 2 };
        let mut adam = AdamState::for_model(&model);
        let (_, updates) =
            run_epoch(&mut model, &series, &cfg, &[], &mut adam, 1e-3, &mut rng(1)).unwrap();
        // Each update consumes at most batch_size windows of κ3 steps.
        let k3 = cfg.kappa3();
        assert!(updates * cfg.batch_size * k3 >= 300 - k3);
    }

    #[test]
    fn too_short_series_is_rejected() {
        let xs = toy(10, 6);
        let model: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Gru, 2, 3, 2, 1, 2).unwrap();
        assert!(train_bptt_supervised(&model, &xs, &xs, &BpttConfig::default()).is_err());
    }
}
