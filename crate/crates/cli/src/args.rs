use std::path::PathBuf;

use anyhow::Context as _;
use clap::Args;
use odyn_core::activation::ActivationKind;
use odyn_core::config::{ExperimentConfig, RegimeTag};
use odyn_core::ode::Method;
use odyn_core::overlap::{TeacherMode, XiStrategy};
use odyn_core::sgd::SimMode;

use crate::UsageError;

/// Experiment flags. Each one overrides the matching field of `--config`.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// TOML experiment config; flags given alongside override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Label-noise variance Δ.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Horizon in rescaled time t = νγ/(pd).
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Student activation: square or erf.
    #[arg(long = "act", value_parser = parse_kind)]
    pub activation: Option<ActivationKind>,
    /// Teacher activation; defaults to the student's.
    #[arg(long = "teacher-act", value_parser = parse_kind)]
    pub teacher_activation: Option<ActivationKind>,
    /// Clip level K for the square activation, σ(x) = min(x², K).
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, value_parser = parse_teacher_mode)]
    pub teacher_mode: Option<TeacherMode>,
    #[arg(long)]
    pub teacher_scale: Option<f64>,
    /// Standard deviation of the i.i.d. Gaussian student initialization.
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// JSON overlap state used as the initial condition.
    #[arg(long)]
    pub state_file: Option<PathBuf>,
    /// Simulation mode: weight or overlap.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SimMode>,
    /// Steps between recorded points of a simulation, or integrator steps
    /// between recorded points of an ODE run.
    #[arg(long)]
    pub record_every: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Stop a simulation once some Q_jj exceeds this value.
    #[arg(long)]
    pub bound: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Integrator: rk4 or euler.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Gauss–Jacobi order for the ξ average of the mf regime.
    #[arg(long)]
    pub xi_order: Option<usize>,
    /// Add the (γ/p) noise term to the q drift of mf and hdmf.
    #[arg(long)]
    pub mf_noise: bool,
    /// Output directory (else the config's, else $ODYN_OUT_DIR, else ./out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    /// Record full overlap snapshots alongside the risk.
    #[arg(long)]
    pub snapshots: bool,
    /// Also emit an SVG line chart of the risk.
    #[arg(long)]
    pub svg: bool,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown {what} {s:?}"))
}

fn parse_kind(s: &str) -> Result<ActivationKind, String> {
    match parse_enum::<ActivationKind>(s, "activation")? {
        ActivationKind::Custom => Err("custom activations are not available from the command line".into()),
        k => Ok(k),
    }
}

fn parse_teacher_mode(s: &str) -> Result<TeacherMode, String> {
    parse_enum(s, "teacher mode")
}

fn parse_mode(s: &str) -> Result<SimMode, String> {
    parse_enum(s, "simulation mode")
}

fn parse_method(s: &str) -> Result<Method, String> {
    parse_enum(s, "integration method")
}

pub fn parse_regime(s: &str) -> Result<RegimeTag, String> {
    RegimeTag::parse(s).map_err(|e| e.to_string())
}

impl ConfigArgs {
    /// The file config (if any) with flag overrides applied, validated.
    /// `regime` is forced when given.
    pub fn build(&self, regime: Option<RegimeTag>) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str::<ExperimentConfig>(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
            }
            None => {
                let need = |v: Option<f64>, name: &str| v.ok_or_else(|| UsageError(format!("--{name} is required without --config")));
                let needu = |v: Option<usize>, name: &str| v.ok_or_else(|| UsageError(format!("--{name} is required without --config")));
                ExperimentConfig::new(
                    needu(self.d, "d")?,
                    needu(self.p, "p")?,
                    needu(self.k, "k")?,
                    need(self.gamma, "gamma")?,
                    regime.unwrap_or(RegimeTag::Simulate),
                    need(self.horizon, "T")?,
                )
            }
        };
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.tag, self.tag);
        set!(cfg.d, self.d);
        set!(cfg.p, self.p);
        set!(cfg.k, self.k);
        set!(cfg.gamma, self.gamma);
        set!(cfg.delta, self.delta);
        set!(cfg.horizon, self.horizon);
        set!(cfg.seed, self.seed);
        set!(cfg.activation, self.activation);
        set!(cfg.teacher.mode, self.teacher_mode);
        set!(cfg.teacher.scale, self.teacher_scale);
        set!(cfg.init.sigma0, self.sigma0);
        set!(cfg.simulation.mode, self.mode);
        set!(cfg.simulation.max_steps, self.max_steps);
        set!(cfg.integrator.dt, self.dt);
        set!(cfg.integrator.method, self.method);
        if self.teacher_activation.is_some() {
            cfg.teacher_activation = self.teacher_activation;
        }
        if self.clip.is_some() {
            cfg.activation_clip = self.clip;
        }
        if self.state_file.is_some() {
            cfg.init.state_file = self.state_file.clone();
        }
        if self.bound.is_some() {
            cfg.simulation.bound = self.bound;
        }
        if let Some(r) = regime {
            cfg.regime = r;
        }
        if let Some(n) = self.record_every {
            if cfg.regime == RegimeTag::Simulate {
                cfg.simulation.record_every = Some(n);
            } else {
                cfg.integrator.record_every = Some(n);
            }
        }
        if let Some(order) = self.xi_order {
            cfg.xi = XiStrategy::Quadrature { order };
        }
        cfg.mf_noise_correction |= self.mf_noise;
        cfg.output.json |= self.json;
        cfg.output.snapshots |= self.snapshots;
        cfg.output.svg |= self.svg;
        if self.out.is_some() {
            cfg.output.dir = self.out.clone();
        }
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

/// Flag, then config, then `$ODYN_OUT_DIR`, then `./out`.
pub fn out_dir(flag: Option<&PathBuf>, cfg: Option<&PathBuf>) -> PathBuf {
    flag.or(cfg)
        .cloned()
        .or_else(|| std::env::var_os("ODYN_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}
