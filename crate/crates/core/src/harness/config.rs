//! Flat `key = value` experiment configuration with dotted section names.
//!
//! ```text
//! # comment
//! seed = 3
//! system.kind = lorenz96
//! system.grid_size = 40
//! model.family = rc
//! model.hidden = 1000
//! eval.lambda1 = auto
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dynamics::ks::KsConfig;
use crate::dynamics::lorenz96::Lorenz96Config;
use crate::dynamics::TangentParams;
use crate::dynamics::SystemConfig;
use crate::forecasting::{ModelSpec, RnnSpec};
use crate::gated_rnn::{BpttConfig, CellKind};
use crate::lyapunov::LyapunovRunParams;
use crate::metrics::DEFAULT_EPSILON;
use crate::reservoir::ReservoirParams;
use crate::{Error, Result};

/// Parsed but untyped configuration; later assignments win.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            map.set_line(line)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", n + 1)))?;
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` assignment.
    pub fn set_line(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {assignment:?}")))?;
        let key = k.trim();
        if key.is_empty() || key.split('.').count() > 2 || key.split('.').any(str::is_empty) {
            return Err(Error::InvalidConfig(format!(
                "key {key:?} must be a name or section.name"
            )));
        }
        self.entries.insert(key.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Typed reads that remember which keys were used.
struct Reader<'a> {
    map: &'a ConfigMap,
    used: std::cell::RefCell<Vec<String>>,
}

impl<'a> Reader<'a> {
    fn new(map: &'a ConfigMap) -> Self {
        Self {
            map,
            used: Default::default(),
        }
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.used.borrow_mut().push(key.to_string());
        self.map.get(key)
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("cannot parse {key} = {s:?}"))),
        }
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::InvalidConfig(format!("cannot parse {key} = {s:?}")))
            })
            .transpose()
    }

    /// Marks keys as known without reading them.
    fn allow(&self, keys: &[&str]) {
        self.used.borrow_mut().extend(keys.iter().map(|k| k.to_string()));
    }

    fn finish(self) -> Result<()> {
        let used = self.used.into_inner();
        let unknown: Vec<&str> = self
            .map
            .iter()
            .map(|(k, _)| k)
            .filter(|k| !used.iter().any(|u| u == k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

const RC_KEYS: &[&str] = &[
    "model.degree",
    "model.radius",
    "model.input_scaling",
    "model.regularization",
    "model.noise_level",
    "model.warmup",
    "model.batch_size",
];

const RNN_KEYS: &[&str] = &[
    "model.layers",
    "bptt.kappa1",
    "bptt.kappa2",
    "bptt.batch_size",
    "bptt.zoneout_keep",
    "bptt.noise_level",
    "bptt.lr0",
    "bptt.n_rounds",
    "bptt.patience",
    "bptt.max_epochs",
    "bptt.validation_fraction",
    "bptt.clip_norm",
];

#[derive(Debug, Clone, PartialEq)]
pub enum SystemSpec {
    Simulated(SystemConfig),
    /// A `CHF1` dataset file.
    Dataset(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observable {
    Full,
    /// Leading `r` SVD coefficients.
    Svd(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParallelSpec {
    pub group_size: usize,
    pub interaction: usize,
    /// Train group 0 and copy it to every group.
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lambda1Source {
    Given(f64),
    /// From the true equations' tangent dynamics.
    Computed(TangentParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub n_ic: usize,
    pub n_w: usize,
    pub horizon: usize,
    pub epsilon: f64,
    pub lambda1: Lambda1Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub system: SystemSpec,
    pub observable: Observable,
    pub model: ModelSpec,
    pub parallel: Option<ParallelSpec>,
    pub eval: EvalSpec,
    /// Settings for surrogate spectra; `dt` is taken from the data.
    pub lyapunov: LyapunovRunParams,
}

impl ExperimentConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let r = Reader::new(map);
        let seed = r.or("seed", 1u64)?;
        let output = PathBuf::from(r.or("output", "run".to_string())?);

        let kind: String = r.or("system.kind", "lorenz96".to_string())?;
        let system = match kind.as_str() {
            "lorenz96" => {
                let d = Lorenz96Config::default();
                let c = Lorenz96Config {
                    grid_size: r.or("system.grid_size", d.grid_size)?,
                    forcing: r.or("system.forcing", d.forcing)?,
                    dt: r.or("system.dt", d.dt)?,
                    t_transient: r.or("system.t_transient", d.t_transient)?,
                    t_total: r.or("system.t_total", d.t_total)?,
                    train_fraction: r.or("system.train_fraction", d.train_fraction)?,
                    seed: r.or("system.seed", seed)?,
                };
                c.validate()?;
                SystemSpec::Simulated(SystemConfig::Lorenz96(c))
            }
            "ks" => {
                let d = KsConfig::default();
                let c = KsConfig {
                    domain_length: r.or("system.domain_length", d.domain_length)?,
                    viscosity: r.or("system.viscosity", d.viscosity)?,
                    nodes: r.or("system.nodes", d.nodes)?,
                    dt: r.or("system.dt", d.dt)?,
                    t_transient: r.or("system.t_transient", d.t_transient)?,
                    t_total: r.or("system.t_total", d.t_total)?,
                    train_fraction: r.or("system.train_fraction", d.train_fraction)?,
                    seed: r.or("system.seed", seed)?,
                };
                c.validate()?;
                SystemSpec::Simulated(SystemConfig::KuramotoSivashinsky(c))
            }
            "dataset" => {
                let path: String = r
                    .opt("system.path")?
                    .ok_or_else(|| Error::InvalidConfig("system.kind = dataset needs system.path".into()))?;
                SystemSpec::Dataset(PathBuf::from(path))
            }
            other => return Err(Error::InvalidConfig(format!("unknown system.kind {other:?}"))),
        };

        let obs: String = r.or("observable.kind", "full".to_string())?;
        let observable = match obs.as_str() {
            "full" => Observable::Full,
            "svd" => Observable::Svd(
                r.opt("observable.rank")?
                    .ok_or_else(|| Error::InvalidConfig("observable.kind = svd needs observable.rank".into()))?,
            ),
            other => return Err(Error::InvalidConfig(format!("unknown observable.kind {other:?}"))),
        };

        let family: String = r.or("model.family", "rc".to_string())?;
        let model = match family.as_str() {
            "rc" => {
                r.allow(RNN_KEYS);
                let d = ReservoirParams::default();
                let p = ReservoirParams {
                    hidden: r.or("model.hidden", d.hidden)?,
                    degree: r.or("model.degree", d.degree)?,
                    radius: r.or("model.radius", d.radius)?,
                    input_scaling: r.or("model.input_scaling", d.input_scaling)?,
                    regularization: r.or("model.regularization", d.regularization)?,
                    noise_level: r.or("model.noise_level", d.noise_level)?,
                    warmup: r.or("model.warmup", d.warmup)?,
                    batch_size: r.or("model.batch_size", d.batch_size)?,
                    ..d
                };
                p.validate()?;
                ModelSpec::Reservoir(p)
            }
            "gru" | "lstm" => {
                r.allow(RC_KEYS);
                let d = BpttConfig::default();
                let bptt = BpttConfig {
                    kappa1: r.or("bptt.kappa1", d.kappa1)?,
                    kappa2: r.or("bptt.kappa2", d.kappa2)?,
                    batch_size: r.or("bptt.batch_size", d.batch_size)?,
                    zoneout_keep: r.or("bptt.zoneout_keep", d.zoneout_keep)?,
                    noise_level: r.or("bptt.noise_level", d.noise_level)?,
                    lr0: r.or("bptt.lr0", d.lr0)?,
                    n_rounds: r.or("bptt.n_rounds", d.n_rounds)?,
                    patience: r.or("bptt.patience", d.patience)?,
                    max_epochs: r.or("bptt.max_epochs", d.max_epochs)?,
                    validation_fraction: r.or("bptt.validation_fraction", d.validation_fraction)?,
                    clip_norm: r.or("bptt.clip_norm", d.clip_norm)?,
                    seed: d.seed,
                };
                bptt.validate()?;
                let layers = r.or("model.layers", 1usize)?;
                let hidden = r.or("model.hidden", 100usize)?;
                if hidden == 0 || layers == 0 {
                    return Err(Error::InvalidConfig("model.hidden and model.layers must be >= 1".into()));
                }
                ModelSpec::Rnn(RnnSpec {
                    kind: CellKind::parse(&family)?,
                    hidden,
                    layers,
                    bptt,
                })
            }
            other => return Err(Error::InvalidConfig(format!("unknown model.family {other:?}"))),
        };

        let g: Option<usize> = r.opt("parallel.group_size")?;
        let interaction: usize = r.or("parallel.interaction", 0)?;
        let shared: bool = r.or("parallel.shared", false)?;
        let parallel = g.map(|group_size| ParallelSpec {
            group_size,
            interaction,
            shared,
        });

        let lam: String = r.or("eval.lambda1", "auto".to_string())?;
        let dt = TangentParams::default();
        let tangent = TangentParams {
            exponents: 1,
            reortho_every: r.or("eval.lambda1_reortho", dt.reortho_every)?,
            horizon: r.or("eval.lambda1_horizon", dt.horizon)?,
            spinup: r.or("eval.lambda1_spinup", dt.spinup)?,
            seed: mix_key(seed, 4),
            ..dt
        };
        let lambda1 = if lam == "auto" {
            if matches!(system, SystemSpec::Dataset(_)) {
                return Err(Error::InvalidConfig(
                    "eval.lambda1 must be given for a dataset file".into(),
                ));
            }
            Lambda1Source::Computed(tangent)
        } else {
            let v: f64 = lam
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("cannot parse eval.lambda1 = {lam:?}")))?;
            if !(v > 0.0) {
                return Err(Error::InvalidConfig("eval.lambda1 must be positive".into()));
            }
            Lambda1Source::Given(v)
        };
        let eval = EvalSpec {
            n_ic: r.or("eval.n_ic", 10)?,
            n_w: r.or("eval.n_w", 2000)?,
            horizon: r.or("eval.horizon", 1000)?,
            epsilon: r.or("eval.epsilon", DEFAULT_EPSILON)?,
            lambda1,
        };
        if !(eval.epsilon > 0.0) {
            return Err(Error::InvalidConfig("eval.epsilon must be positive".into()));
        }

        let dl = LyapunovRunParams::default();
        let lyapunov = LyapunovRunParams {
            warmup: r.or("lyapunov.warmup", dl.warmup)?,
            exponents: r.or("lyapunov.exponents", dl.exponents)?,
            max_steps: r.or("lyapunov.max_steps", dl.max_steps)?,
            reortho_every: r.or("lyapunov.reortho_every", dl.reortho_every)?,
            check_every: r.or("lyapunov.check_every", dl.check_every)?,
            tolerance: r.or("lyapunov.tolerance", dl.tolerance)?,
            spinup: r.or("lyapunov.spinup", dl.spinup)?,
            seed: r.or("lyapunov.seed", dl.seed)?,
            dt: dl.dt,
        };

        r.finish()?;
        Ok(Self {
            seed,
            output,
            system,
            observable,
            model,
            parallel,
            eval,
            lyapunov,
        })
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let mut map = ConfigMap::load(path)?;
        for o in overrides {
            map.set_line(o)?;
        }
        Self::from_map(&map)
    }

    /// Canonical `key = value` listing; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", &self.seed);
        kv("output", &self.output.display());
        match &self.system {
            SystemSpec::Simulated(SystemConfig::Lorenz96(c)) => {
                kv("system.kind", &"lorenz96");
                kv("system.grid_size", &c.grid_size);
                kv("system.forcing", &c.forcing);
                kv("system.dt", &c.dt);
                kv("system.t_transient", &c.t_transient);
                kv("system.t_total", &c.t_total);
                kv("system.train_fraction", &c.train_fraction);
                kv("system.seed", &c.seed);
            }
            SystemSpec::Simulated(SystemConfig::KuramotoSivashinsky(c)) => {
                kv("system.kind", &"ks");
                kv("system.domain_length", &c.domain_length);
                kv("system.viscosity", &c.viscosity);
                kv("system.nodes", &c.nodes);
                kv("system.dt", &c.dt);
                kv("system.t_transient", &c.t_transient);
                kv("system.t_total", &c.t_total);
                kv("system.train_fraction", &c.train_fraction);
                kv("system.seed", &c.seed);
            }
            SystemSpec::Dataset(p) => {
                kv("system.kind", &"dataset");
                kv("system.path", &p.display());
            }
        }
        match self.observable {
            Observable::Full => kv("observable.kind", &"full"),
            Observable::Svd(r) => {
                kv("observable.kind", &"svd");
                kv("observable.rank", &r);
            }
        }
        match &self.model {
            ModelSpec::Reservoir(p) => {
                kv("model.family", &"rc");
                kv("model.hidden", &p.hidden);
                kv("model.degree", &p.degree);
                kv("model.radius", &p.radius);
                kv("model.input_scaling", &p.input_scaling);
                kv("model.regularization", &p.regularization);
                kv("model.noise_level", &p.noise_level);
                kv("model.warmup", &p.warmup);
                kv("model.batch_size", &p.batch_size);
            }
            ModelSpec::Rnn(m) => {
                let b = &m.bptt;
                kv("model.family", &m.kind.name());
                kv("model.hidden", &m.hidden);
                kv("model.layers", &m.layers);
                kv("bptt.kappa1", &b.kappa1);
                kv("bptt.kappa2", &b.kappa2);
                kv("bptt.batch_size", &b.batch_size);
                kv("bptt.zoneout_keep", &b.zoneout_keep);
                kv("bptt.noise_level", &b.noise_level);
                kv("bptt.lr0", &b.lr0);
                kv("bptt.n_rounds", &b.n_rounds);
                kv("bptt.patience", &b.patience);
                kv("bptt.max_epochs", &b.max_epochs);
                kv("bptt.validation_fraction", &b.validation_fraction);
                kv("bptt.clip_norm", &b.clip_norm);
            }
        }
        if let Some(p) = &self.parallel {
            kv("parallel.group_size", &p.group_size);
            kv("parallel.interaction", &p.interaction);
            kv("parallel.shared", &p.shared);
        }
        let e = &self.eval;
        kv("eval.n_ic", &e.n_ic);
        kv("eval.n_w", &e.n_w);
        kv("eval.horizon", &e.horizon);
        kv("eval.epsilon", &e.epsilon);
        match &e.lambda1 {
            Lambda1Source::Given(v) => kv("eval.lambda1", v),
            Lambda1Source::Computed(t) => {
                kv("eval.lambda1", &"auto");
                kv("eval.lambda1_reortho", &t.reortho_every);
                kv("eval.lambda1_horizon", &t.horizon);
                kv("eval.lambda1_spinup", &t.spinup);
            }
        }
        let l = &self.lyapunov;
        kv("lyapunov.warmup", &l.warmup);
        kv("lyapunov.exponents", &l.exponents);
        kv("lyapunov.max_steps", &l.max_steps);
        kv("lyapunov.reortho_every", &l.reortho_every);
        kv("lyapunov.check_every", &l.check_every);
        kv("lyapunov.tolerance", &l.tolerance);
        kv("lyapunov.spinup", &l.spinup);
        kv("lyapunov.seed", &l.seed);
        s
    }
}

fn mix_key(seed: u64, stream: u64) -> u64 {
    crate::linalg::mix_seed(seed, stream)
}
