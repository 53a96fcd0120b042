//! `odyn`: run, compare and sweep SGD and overlap-ODE experiments.

mod args;
mod histogram;
mod svg;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use odyn_core::config::{RegimeTag, SweepSpec};
use odyn_core::error::Error;
use odyn_core::ode::compare;
use odyn_core::trajectory::Trajectory;

use args::ConfigArgs;

/// Invalid invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Some sweep points failed; exits with status 4.
#[derive(Debug)]
struct PartialSweep(usize, usize);

impl std::fmt::Display for PartialSweep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} of {} sweep points failed", self.0, self.1)
    }
}

impl std::error::Error for PartialSweep {}

#[derive(Parser)]
#[command(name = "odyn", version, about = "Teacher-student SGD simulations and their overlap ODEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one-pass SGD in weight space or directly on the overlaps.
    Simulate(ConfigArgs),
    /// Integrate an overlap ODE (ss, gf, gf-noise, mf, hdmf).
    Integrate {
        #[arg(long, value_parser = args::parse_regime)]
        regime: Option<RegimeTag>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Gap statistics between two trajectory files (CSV or JSON).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Write the full report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of experiments from a TOML sweep spec.
    Sweep {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Histograms of student-teacher cosine similarities at given times.
    Histogram {
        /// Comma-separated times.
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Read snapshots from this trajectory instead of simulating.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if e.downcast_ref::<PartialSweep>().is_some() {
        return 4;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. } | Error::PsdViolation { .. } | Error::NotPsd { .. } | Error::Singular(_)) => 3,
        Some(
            Error::Config(_)
            | Error::InvalidInput(_)
            | Error::Shape(_)
            | Error::NullOrthogonalSpace { .. }
            | Error::RegimeMismatch { .. }
            | Error::Unsupported(_)
            | Error::RankDeficientTeacher { .. },
        ) => 2,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate(a) => {
            let cfg = a.build(Some(RegimeTag::Simulate))?;
            let traj = odyn_core::sgd::run_sgd(&cfg, None)?;
            emit(&traj, &cfg, a.out.as_ref())
        }
        Command::Integrate { regime, cfg: a } => {
            let cfg = a.build(regime)?;
            if cfg.regime == RegimeTag::Simulate {
                return Err(UsageError("integrate needs --regime ss, gf, gf-noise, mf or hdmf".into()).into());
            }
            let traj = odyn_core::ode::run_ode(&cfg)?;
            emit(&traj, &cfg, a.out.as_ref())
        }
        Command::Compare { a, b, out } => {
            let ta = Trajectory::read_path(&a).with_context(|| format!("reading {}", a.display()))?;
            let tb = Trajectory::read_path(&b).with_context(|| format!("reading {}", b.display()))?;
            let report = compare(&ta, &tb)?;
            println!("sup_risk_gap {:.6e} at t = {}", report.sup_risk_gap, report.t_sup);
            println!("terminal_gap {:.6e} at t = {}", report.terminal_gap, report.terminal_time);
            if let Some(g) = report.sup_overlap_gap {
                println!("sup_overlap_gap {g:.6e}");
            }
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Sweep { spec, out, workers } => {
            let s = SweepSpec::load(&spec).map_err(|e| UsageError(e.to_string()))?;
            let dir = args::out_dir(out.as_ref(), s.base.output.dir.as_ref());
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
            let outcome = sweep::run(&s, &dir, workers)?;
            println!(
                "{} points ({} resumed, {} failed); tables in {}",
                outcome.results.len(),
                outcome.resumed,
                outcome.failures(),
                dir.display()
            );
            match outcome.failures() {
                0 => Ok(()),
                n => Err(PartialSweep(n, outcome.results.len()).into()),
            }
        }
        Command::Histogram { times, bins, trajectory, cfg: a } => {
            if bins == 0 || times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(UsageError("bins must be positive and times nonnegative".into()).into());
            }
            let (hists, dir, stem) = match &trajectory {
                Some(path) => {
                    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trajectory".into());
                    (histogram::from_trajectory(path, &times, bins)?, args::out_dir(a.out.as_ref(), None), stem)
                }
                None => {
                    let mut a = a;
                    // The horizon is implied by the requested times.
                    a.horizon.get_or_insert(times.iter().copied().fold(0.0, f64::max));
                    let cfg = a.build(Some(RegimeTag::Simulate))?;
                    let dir = args::out_dir(a.out.as_ref(), cfg.output.dir.as_ref());
                    (histogram::from_simulation(&cfg, &times, bins)?, dir, format!("{}_seed{}", cfg.tag, cfg.seed))
                }
            };
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{stem}_histogram.csv"));
            histogram::write_csv(&path, &hists)?;
            for h in &hists {
                println!("t = {}: {} cosines in {bins} bins", h.t, h.total());
            }
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn emit(traj: &Trajectory, cfg: &odyn_core::config::ExperimentConfig, flag_out: Option<&PathBuf>) -> anyhow::Result<()> {
    let dir = args::out_dir(flag_out, cfg.output.dir.as_ref());
    let mut written = traj.write_files(&dir, cfg.output.csv, cfg.output.json)?;
    let stem = traj.file_stem();
    let toml_path = dir.join(format!("{stem}.toml"));
    std::fs::write(&toml_path, cfg.to_toml_string()?)?;
    written.push(toml_path);
    if cfg.output.svg {
        let chart = svg::line_chart(&stem, &[svg::Series { label: &traj.meta.regime, times: &traj.times, values: &traj.risks }]);
        let path = dir.join(format!("{stem}.svg"));
        std::fs::write(&path, chart)?;
        written.push(path);
    }
    summarize(traj);
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn summarize(traj: &Trajectory) {
    let (t, r) = (traj.times.last().copied().unwrap_or(0.0), traj.final_risk().unwrap_or(f64::NAN));
    println!("{}: {} records, terminal risk {r:.6e} at t = {t}", traj.meta.regime, traj.len());
    let max_q = traj.max_q_diag.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if max_q.is_finite() {
        println!("max Q_jj over the run {max_q:.6e}");
    }
    if let Some(b) = &traj.meta.bound_violation {
        println!("bound violated: Q_jj = {:.6e} > {} at t = {}; run stopped", b.max_q_diag, b.bound, b.t);
    }
    if traj.meta.truncated {
        println!("run truncated at max_steps");
    }
    for e in &traj.meta.events {
        println!("event: {e}");
    }
}
