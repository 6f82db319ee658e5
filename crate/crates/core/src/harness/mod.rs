//! Experiment orchestration: configuration, persistence, end-to-end runs and
//! grid search.

mod bundle;
mod config;

pub use bundle::{
    load_bundle, read_model, save_bundle, write_model, Bundle, BUNDLE_MAGIC, BUNDLE_VERSION,
};
pub use config::{
    ConfigMap, EvalSpec, ExperimentConfig, Lambda1Source, Observable, ParallelSpec, SystemSpec,
};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;

use crate::dynamics::{true_lyapunov_spectrum, TimeSeriesDataset};
use crate::forecasting::{evaluate_many, train_on_dataset, ForecastRun, ModelSpec};
use crate::gated_rnn::TrainingReport;
use crate::linalg::mix_seed;
use crate::lyapunov::{surrogate_spectrum_any, LyapunovSpectrum};
use crate::metrics::{summarize, MetricsReport};
use crate::parallel::{decompose, train_parallel};
use crate::reduction::{fit_dataset, reduce_dataset, SvdBasis};
use crate::{Error, Result};

const F64: usize = std::mem::size_of::<f64>();

/// Wall time per phase plus an analytic memory estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceStats {
    pub phases: Vec<(&'static str, f64)>,
    pub data_bytes: usize,
    pub model_bytes: usize,
    /// Bytes of all matrices live at the most demanding phase; computed from
    /// dimensions, not measured.
    pub peak_bytes_estimate: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_text: String,
    pub lambda1: f64,
    pub metrics: MetricsReport<f64>,
    pub training: Option<TrainingReport>,
    pub resources: ResourceStats,
    pub bundle_path: PathBuf,
    /// Every file written by the run.
    pub files: Vec<PathBuf>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lambda1 = {:e}", self.lambda1);
        s.push_str(&self.metrics.summary_text());
        for (phase, secs) in &self.resources.phases {
            let _ = writeln!(s, "time.{phase} = {secs:.3} s");
        }
        let _ = writeln!(s, "memory.data = {} bytes", self.resources.data_bytes);
        let _ = writeln!(s, "memory.model = {} bytes", self.resources.model_bytes);
        let _ = writeln!(s, "memory.peak_estimate = {} bytes", self.resources.peak_bytes_estimate);
        let _ = writeln!(s, "bundle = {}", self.bundle_path.display());
        s
    }
}

/// Data fed to the models: the chosen observable, z-scored with training statistics.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: TimeSeriesDataset<f64>,
    pub basis: Option<SvdBasis<f64>>,
    pub raw_dim: usize,
}

pub fn load_system(spec: &SystemSpec) -> Result<TimeSeriesDataset<f64>> {
    match spec {
        SystemSpec::Simulated(s) => s.simulate(),
        SystemSpec::Dataset(p) => TimeSeriesDataset::load(p),
    }
}

pub fn prepare(raw: &TimeSeriesDataset<f64>, observable: Observable) -> Result<Prepared> {
    let (obs, basis) = match observable {
        Observable::Full => (raw.clone(), None),
        Observable::Svd(r) => {
            let basis = fit_dataset(raw, r)?;
            (reduce_dataset(raw, &basis)?, Some(basis))
        }
    };
    if let Some(k) = obs.std().iter().position(|s| *s == 0.0) {
        return Err(Error::InvalidNormalization(k));
    }
    Ok(Prepared {
        dataset: obs.normalized(),
        basis,
        raw_dim: raw.dim(),
    })
}

fn lambda1_cache() -> &'static Mutex<HashMap<String, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Leading exponent of the true system, or the configured value.
pub fn resolve_lambda1(cfg: &ExperimentConfig) -> Result<f64> {
    match (&cfg.eval.lambda1, &cfg.system) {
        (Lambda1Source::Given(v), _) => Ok(*v),
        (Lambda1Source::Computed(params), SystemSpec::Simulated(system)) => {
            let key = format!("{system:?}{params:?}");
            if let Some(v) = lambda1_cache().lock().expect("cache lock").get(&key) {
                return Ok(*v);
            }
            let v = true_lyapunov_spectrum(system, params)?.exponents[0];
            lambda1_cache().lock().expect("cache lock").insert(key, v);
            Ok(v)
        }
        (Lambda1Source::Computed(_), SystemSpec::Dataset(_)) => Err(Error::InvalidConfig(
            "a dataset file needs an explicit eval.lambda1".into(),
        )),
    }
}

pub fn train_stage(
    cfg: &ExperimentConfig,
    dataset: &TimeSeriesDataset<f64>,
) -> Result<(Bundle<f64>, Option<TrainingReport>)> {
    let seed = mix_seed(cfg.seed, 2);
    match &cfg.parallel {
        None => {
            let (m, report) = train_on_dataset(&cfg.model, dataset, seed)?;
            Ok((Bundle::Single(m), report))
        }
        Some(p) => {
            let decomp = decompose(dataset.dim(), p.group_size, p.interaction)?;
            let pm = train_parallel(&decomp, dataset, &cfg.model, seed, p.shared)?;
            Ok((Bundle::Parallel(pm), None))
        }
    }
}

pub fn evaluate_bundle(
    bundle: &Bundle<f64>,
    dataset: &TimeSeriesDataset<f64>,
    eval: &EvalSpec,
    seed: u64,
) -> Result<Vec<ForecastRun<f64>>> {
    match bundle {
        Bundle::Single(m) => evaluate_many(m, dataset, eval.n_ic, eval.n_w, eval.horizon, seed),
        Bundle::Parallel(p) => evaluate_many(p, dataset, eval.n_ic, eval.n_w, eval.horizon, seed),
    }
}

/// Surrogate spectrum warmed on the tail of the training split.
pub fn surrogate_lyapunov(
    cfg: &ExperimentConfig,
    bundle: &Bundle<f64>,
    dataset: &TimeSeriesDataset<f64>,
) -> Result<LyapunovSpectrum<f64>> {
    let Bundle::Single(model) = bundle else {
        return Err(Error::UnsupportedModel(
            "surrogate spectra of parallel ensembles".into(),
        ));
    };
    let params = crate::lyapunov::LyapunovRunParams {
        dt: dataset.dt(),
        ..cfg.lyapunov.clone()
    };
    let split = dataset.split();
    if params.warmup + 1 > split {
        return Err(Error::InvalidArgument(format!(
            "warm-up {} does not fit in {split} training rows",
            params.warmup
        )));
    }
    surrogate_spectrum_any(model, dataset.rows(split - params.warmup - 1..split), &params)
}

fn training_workspace(cfg: &ExperimentConfig, d_in: usize, d_out: usize) -> usize {
    match &cfg.model {
        ModelSpec::Reservoir(p) => {
            let h = p.hidden;
            F64 * (2 * h * h + d_out * h + p.batch_size * (h + d_out) + h * d_in)
        }
        ModelSpec::Rnn(r) => {
            let cols = r.hidden + d_in.max(r.hidden);
            let gates = if r.kind == crate::gated_rnn::CellKind::Gru { 3 } else { 4 };
            let params = r.layers * gates * r.hidden * (cols + 1) + d_out * r.hidden;
            let caches = r.bptt.batch_size * r.bptt.kappa3() * r.layers * r.hidden * 10;
            F64 * (4 * params + caches)
        }
    }
}

fn peak_estimate(cfg: &ExperimentConfig, data_bytes: usize, model_bytes: usize, dim: usize) -> usize {
    let train = match &cfg.parallel {
        None => training_workspace(cfg, dim, dim),
        Some(p) => {
            let width = 2 * p.interaction + p.group_size;
            let concurrent = rayon::current_num_threads().min(dim / p.group_size.max(1)).max(1);
            concurrent * training_workspace(cfg, width, p.group_size)
        }
    };
    let eval = F64 * 2 * cfg.eval.n_ic * cfg.eval.horizon * dim;
    data_bytes + model_bytes + train.max(eval)
}

/// Table of every forecast: `run,step,series,x0..` with `series` either
/// `pred` or `true`.
pub fn forecasts_csv(runs: &[ForecastRun<f64>]) -> String {
    let dim = runs.first().map_or(0, |r| r.dim);
    let mut s = String::from("run,initial_index,step,series");
    for k in 0..dim {
        let _ = write!(s, ",x{k}");
    }
    s.push('\n');
    for (i, r) in runs.iter().enumerate() {
        for (label, data) in [("pred", &r.predictions), ("true", &r.targets)] {
            for (t, row) in data.chunks(r.dim).enumerate() {
                let _ = write!(s, "{i},{},{t},{label}", r.initial_index);
                for v in row {
                    let _ = write!(s, ",{v:e}");
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Parses [`forecasts_csv`] output back into `(predictions, targets)` per run.
pub fn parse_forecasts_csv(text: &str) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut runs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for line in text.lines().skip(1) {
        let mut f = line.split(',');
        let bad = || Error::Inconsistent(format!("bad forecast row {line:?}"));
        let run: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let _ = f.next();
        let _ = f.next();
        let series = f.next().ok_or_else(bad)?;
        let values = f.map(|v| v.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        if run >= runs.len() {
            runs.resize(run + 1, Default::default());
        }
        match series {
            "pred" => runs[run].0.extend(values),
            "true" => runs[run].1.extend(values),
            _ => return Err(bad()),
        }
    }
    Ok(runs)
}

struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        std::fs::write(&p, contents)?;
        self.files.push(p.clone());
        Ok(p)
    }

    fn discard(self) {
        if self.created_dir {
            let _ = std::fs::remove_dir_all(&self.dir);
        } else {
            for f in &self.files {
                let _ = std::fs::remove_file(f);
            }
        }
    }
}

/// simulate-or-load, reduce, train, evaluate, summarise, persist.
///
/// Writes `config.txt`, `nrmse.csv`, `vpt.csv`, `psd.csv`, `forecasts.csv`,
/// `summary.txt`, `report.txt`, the model bundle and, for gated networks,
/// `training.txt` into the output directory. On failure everything written
/// is removed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut out = Outputs::open(&cfg.output).map_err(|e| e.in_stage("persist"))?;
    match run_inner(cfg, &mut out) {
        Ok(r) => Ok(r),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

fn run_inner(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<RunReport> {
    let mut phases = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, phases: &mut Vec<(&'static str, f64)>| {
        phases.push((name, clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let raw = load_system(&cfg.system).map_err(|e| e.in_stage("simulate"))?;
    lap("simulate", &mut phases);
    let prepared = prepare(&raw, cfg.observable).map_err(|e| e.in_stage("reduce"))?;
    let data = &prepared.dataset;
    lap("reduce", &mut phases);
    let (bundle, training) = train_stage(cfg, data).map_err(|e| e.in_stage("train"))?;
    lap("train", &mut phases);
    let lambda1 = resolve_lambda1(cfg).map_err(|e| e.in_stage("lyapunov"))?;
    lap("lyapunov", &mut phases);
    let runs = evaluate_bundle(&bundle, data, &cfg.eval, mix_seed(cfg.seed, 3))
        .map_err(|e| e.in_stage("evaluate"))?;
    lap("evaluate", &mut phases);
    let metrics = summarize(&runs, data.std(), data.dt(), lambda1, cfg.eval.epsilon)
        .map_err(|e| e.in_stage("summarize"))?;
    lap("summarize", &mut phases);

    let persist = |out: &mut Outputs| -> Result<PathBuf> {
        out.write("config.txt", &cfg.to_text())?;
        out.write("nrmse.csv", &metrics.nrmse_csv())?;
        out.write("vpt.csv", &metrics.vpt_csv())?;
        out.write("psd.csv", &metrics.psd_csv())?;
        out.write("forecasts.csv", &forecasts_csv(&runs))?;
        out.write("summary.txt", &format!("lambda1 = {lambda1:e}\n{}", metrics.summary_text()))?;
        if let Some(t) = &training {
            out.write("training.txt", &t.to_text())?;
        }
        let name = match bundle {
            Bundle::Single(_) => "model.chmb",
            Bundle::Parallel(_) => "model.manifest",
        };
        let path = out.dir.join(name);
        let written = save_bundle(&bundle, &path)?;
        out.files.extend(written);
        Ok(path)
    };
    let bundle_path = persist(out).map_err(|e| e.in_stage("persist"))?;
    lap("persist", &mut phases);

    let data_bytes = F64 * (raw.values().len() + data.values().len());
    let model_bytes = bundle.memory_bytes();
    let mut report = RunReport {
        config_text: cfg.to_text(),
        lambda1,
        metrics,
        training,
        resources: ResourceStats {
            phases,
            data_bytes,
            model_bytes,
            peak_bytes_estimate: peak_estimate(cfg, data_bytes, model_bytes, data.dim()),
        },
        bundle_path,
        files: Vec::new(),
    };
    out.write("report.txt", &report.to_text())
        .map_err(|e| e.in_stage("persist"))?;
    report.files = out.files.clone();
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct GridPoint {
    pub index: usize,
    pub assignments: Vec<(String, String)>,
    pub report: RunReport,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub keys: Vec<String>,
    /// In Cartesian-product order (last axis fastest).
    pub points: Vec<GridPoint>,
}

impl GridReport {
    /// Points sorted by mean VPT, best first; ties keep grid order.
    pub fn ranked(&self) -> Vec<&GridPoint> {
        let mut v: Vec<&GridPoint> = self.points.iter().collect();
        v.sort_by(|a, b| b.report.metrics.vpt_mean.total_cmp(&a.report.metrics.vpt_mean));
        v
    }

    pub fn best_mean(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.report.metrics.vpt_mean)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn best_max(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.report.metrics.vpt_max)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("rank,run");
        for k in &self.keys {
            let _ = write!(s, ",{k}");
        }
        s.push_str(",vpt_mean,vpt_max,vpt_min,divergent\n");
        for (rank, p) in self.ranked().into_iter().enumerate() {
            let _ = write!(s, "{},{}", rank + 1, p.index);
            for (_, v) in &p.assignments {
                let _ = write!(s, ",{v}");
            }
            let m = &p.report.metrics;
            let _ = writeln!(
                s,
                ",{:e},{:e},{:e},{}",
                m.vpt_mean, m.vpt_max, m.vpt_min, m.divergent_count
            );
        }
        s
    }
}

/// Every assignment in the Cartesian product of `axes`, last axis fastest.
pub fn grid_points(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, (key, values)| {
        acc.into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((key.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

/// Runs every grid point into `<output>/run_<index>` and writes
/// `<output>/grid_summary.csv`.
pub fn grid_search(base: &ConfigMap, axes: &[(String, Vec<String>)]) -> Result<GridReport> {
    if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::InvalidConfig("grid needs at least one axis with values".into()));
    }
    let root = PathBuf::from(base.get("output").unwrap_or("run"));
    let points = grid_points(axes);
    let configs = points
        .iter()
        .enumerate()
        .map(|(i, assignment)| {
            let mut map = base.clone();
            for (k, v) in assignment {
                map.set(k, v);
            }
            map.set("output", root.join(format!("run_{i:03}")).display());
            ExperimentConfig::from_map(&map)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = configs
        .par_iter()
        .map(run_experiment)
        .collect::<Result<Vec<_>>>()?;
    let grid = GridReport {
        keys: axes.iter().map(|(k, _)| k.clone()).collect(),
        points: points
            .into_iter()
            .zip(reports)
            .enumerate()
            .map(|(index, (assignments, report))| GridPoint {
                index,
                assignments,
                report,
            })
            .collect(),
    };
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("grid_summary.csv"), grid.summary_csv())?;
    Ok(grid)
}
