//! `chaoscast` command-line harness.
//!
//! Exit codes: 0 on success, 1 for configuration errors, 2 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chaoscast::forecasting::{forecast_from, sample_starts, DIVERGENCE_FACTOR};
use chaoscast::harness::{
    self, evaluate_bundle, load_bundle, load_system, prepare, resolve_lambda1, save_bundle,
    surrogate_lyapunov, train_stage, Bundle, ConfigMap, ExperimentConfig, Lambda1Source,
    SystemSpec,
};
use chaoscast::dynamics::{true_lyapunov_spectrum, TangentParams};
use chaoscast::metrics::{nrmse_curve, summarize};
use chaoscast::reduction::energy_fraction;
use chaoscast::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chaoscast", version, about = "Recurrent surrogates of chaotic dynamics")]
struct Cli {
    /// Worker threads.
    #[arg(long, global = true, env = "CHAOSCAST_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (flat key = value text).
    #[arg(long)]
    config: PathBuf,

    /// Override a configuration entry, e.g. `--set model.hidden=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured trajectory and save it as `dataset.chf`.
    Simulate(Common),
    /// Fit the SVD basis and save the reduced observable as `reduced.chf`.
    Reduce(Common),
    /// Train the configured model and save its bundle.
    Train(Common),
    /// One closed-loop forecast from a saved bundle.
    Forecast {
        #[command(flatten)]
        common: Common,
        /// Bundle to load; defaults to the one `train` writes.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Start row; defaults to the first of the configured evaluation starts.
        #[arg(long)]
        start: Option<usize>,
    },
    /// Full run (train + evaluate), or evaluation of a saved bundle with `--model`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Lyapunov spectrum of the true system (`--true`) or of a saved surrogate.
    Lyapunov {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long = "true")]
        true_system: bool,
        /// Number of exponents for `--true`.
        #[arg(long, default_value_t = 1)]
        exponents: usize,
    },
    /// Cartesian grid over configuration entries, e.g. `--axis model.radius=0.4,0.9`.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long = "axis", value_name = "KEY=V1,V2,...", required = true)]
        axes: Vec<String>,
    },
}

fn config(c: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&c.config, &c.overrides)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(name);
    std::fs::write(&p, contents)?;
    Ok(p)
}

fn default_bundle(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.join(if cfg.parallel.is_some() { "model.manifest" } else { "model.chmb" })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = config(&c)?;
            let SystemSpec::Simulated(system) = &cfg.system else {
                return Err(Error::InvalidConfig("simulate needs a lorenz96 or ks system".into()));
            };
            let data = system.simulate()?;
            std::fs::create_dir_all(&cfg.output)?;
            let p = cfg.output.join("dataset.chf");
            data.save(&p)?;
            println!("{} samples x {} components -> {}", data.len(), data.dim(), p.display());
        }
        Command::Reduce(c) => {
            let cfg = config(&c)?;
            let harness::Observable::Svd(rank) = cfg.observable else {
                return Err(Error::InvalidConfig("reduce needs observable.kind = svd".into()));
            };
            let raw = load_system(&cfg.system)?;
            let prepared = prepare(&raw, cfg.observable)?;
            let basis = prepared.basis.as_ref().expect("svd observable has a basis");
            let p = cfg.output.join("reduced.chf");
            std::fs::create_dir_all(&cfg.output)?;
            prepared.dataset.save(&p)?;
            let mut table = String::from("index,singular_value,cumulative_energy\n");
            for (i, s) in basis.singular_values.iter().enumerate() {
                table.push_str(&format!("{i},{s:e},{:e}\n", energy_fraction(basis, i + 1)?));
            }
            write(&cfg.output, "singular_values.csv", &table)?;
            println!(
                "rank {rank} keeps {:.4} of the energy -> {}",
                energy_fraction(basis, rank)?,
                p.display()
            );
        }
        Command::Train(c) => {
            let cfg = config(&c)?;
            let raw = load_system(&cfg.system)?;
            let data = prepare(&raw, cfg.observable)?.dataset;
            let (bundle, report) = train_stage(&cfg, &data)?;
            std::fs::create_dir_all(&cfg.output)?;
            let files = save_bundle(&bundle, default_bundle(&cfg))?;
            if let Some(r) = report {
                write(&cfg.output, "training.txt", &r.to_text())?;
                println!("best validation loss {:e}", r.best_val_loss);
            }
            println!("{} model saved to {}", bundle.family(), files[0].display());
        }
        Command::Forecast {
            common,
            model,
            start,
        } => {
            let cfg = config(&common)?;
            let bundle: Bundle<f64> = load_bundle(model.unwrap_or_else(|| default_bundle(&cfg)))?;
            let raw = load_system(&cfg.system)?;
            let data = prepare(&raw, cfg.observable)?.dataset;
            let e = &cfg.eval;
            let start = match start {
                Some(s) => s,
                None => sample_starts(&data, 1, e.n_w, e.horizon, cfg.seed)?[0],
            };
            let bound = data.train_max_abs() * DIVERGENCE_FACTOR;
            let run = match &bundle {
                Bundle::Single(m) => forecast_from(m, &data, start, e.n_w, e.horizon, bound)?,
                Bundle::Parallel(p) => forecast_from(p, &data, start, e.n_w, e.horizon, bound)?,
            };
            let curve = nrmse_curve(&run, data.std())?;
            let mut table = String::from("step,nrmse\n");
            for (k, v) in curve.iter().enumerate() {
                table.push_str(&format!("{k},{v:e}\n"));
            }
            write(&cfg.output, "forecast_nrmse.csv", &table)?;
            let p = write(&cfg.output, "forecast.csv", &harness::forecasts_csv(std::slice::from_ref(&run)))?;
            match run.diverged_at {
                Some(k) => println!("forecast from row {start} diverged at step {k}; {}", p.display()),
                None => println!("forecast from row {start}: {} steps -> {}", run.steps(), p.display()),
            }
        }
        Command::Evaluate {
            common,
            model: None,
        } => {
            let cfg = config(&common)?;
            let report = harness::run_experiment(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::Evaluate {
            common,
            model: Some(path),
        } => {
            let cfg = config(&common)?;
            let bundle: Bundle<f64> = load_bundle(&path)?;
            let raw = load_system(&cfg.system)?;
            let data = prepare(&raw, cfg.observable)?.dataset;
            let lambda1 = resolve_lambda1(&cfg)?;
            let runs = evaluate_bundle(&bundle, &data, &cfg.eval, chaoscast::linalg::mix_seed(cfg.seed, 3))?;
            let m = summarize(&runs, data.std(), data.dt(), lambda1, cfg.eval.epsilon)?;
            write(&cfg.output, "nrmse.csv", &m.nrmse_csv())?;
            write(&cfg.output, "vpt.csv", &m.vpt_csv())?;
            write(&cfg.output, "psd.csv", &m.psd_csv())?;
            write(&cfg.output, "forecasts.csv", &harness::forecasts_csv(&runs))?;
            print!("{}", m.summary_text());
        }
        Command::Lyapunov {
            common,
            model,
            true_system,
            exponents,
        } => {
            let cfg = config(&common)?;
            let spectrum = if true_system {
                let SystemSpec::Simulated(system) = &cfg.system else {
                    return Err(Error::InvalidConfig("--true needs a lorenz96 or ks system".into()));
                };
                let base = match &cfg.eval.lambda1 {
                    Lambda1Source::Computed(t) => t.clone(),
                    Lambda1Source::Given(_) => TangentParams::default(),
                };
                true_lyapunov_spectrum(system, &TangentParams { exponents, ..base })?
            } else {
                let bundle: Bundle<f64> = load_bundle(model.unwrap_or_else(|| default_bundle(&cfg)))?;
                let raw = load_system(&cfg.system)?;
                let data = prepare(&raw, cfg.observable)?.dataset;
                surrogate_lyapunov(&cfg, &bundle, &data)?
            };
            write(&cfg.output, "lyapunov.csv", &spectrum.to_csv(0))?;
            write(&cfg.output, "lyapunov_history.csv", &spectrum.history_csv())?;
            let shown: Vec<String> = spectrum.exponents.iter().map(|v| format!("{v:.5}")).collect();
            println!("exponents: {}", shown.join(" "));
            println!(
                "Kaplan-Yorke dimension: {:.3}{}",
                spectrum.ky_dimension,
                if spectrum.ky_saturated { " (saturated)" } else { "" }
            );
            if !spectrum.converged {
                println!("warning: estimates did not meet the convergence tolerance");
            }
        }
        Command::Grid { common, axes } => {
            let mut map = ConfigMap::load(&common.config)?;
            for o in &common.overrides {
                map.set_line(o)?;
            }
            let axes = axes
                .iter()
                .map(|a| {
                    let (k, v) = a
                        .split_once('=')
                        .ok_or_else(|| Error::InvalidConfig(format!("axis {a:?} is not key=v1,v2")))?;
                    Ok((k.trim().to_string(), v.split(',').map(|s| s.trim().to_string()).collect()))
                })
                .collect::<Result<Vec<_>>>()?;
            let grid = harness::grid_search(&map, &axes)?;
            print!("{}", grid.summary_csv());
            println!("best mean VPT {:.4}, best max VPT {:.4}", grid.best_mean(), grid.best_max());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start {jobs} workers: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
