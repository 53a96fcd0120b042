//! Experiment and sweep descriptions (TOML).

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::activation::{Activation, ActivationKind};
use crate::error::{Error, Result};
use crate::expect::EvalStrategy;
use crate::ode::{IntegratorConfig, Regime};
use crate::overlap::{
    init_student, make_teacher, overlaps_of, weights_with_overlaps, OverlapState, TeacherMode, TeacherSpec, WeightState,
    XiStrategy,
};
use crate::sgd::{Problem, SimMode};

pub const SCHEMA_VERSION: u32 = 1;

/// Default cap on SGD steps (samples) in one run.
pub const DEFAULT_MAX_STEPS: u64 = 200_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeTag {
    Simulate,
    Ss,
    Gf,
    GfNoise,
    Mf,
    Hdmf,
}

impl RegimeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Ss => "ss",
            Self::Gf => "gf",
            Self::GfNoise => "gf-noise",
            Self::Mf => "mf",
            Self::Hdmf => "hdmf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown regime {s:?} (expected simulate, ss, gf, gf-noise, mf, hdmf)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    pub scale: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { mode: TeacherMode::OrthonormalRows, scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Per-entry standard deviation of the student weights.
    pub sigma0: f64,
    /// JSON file holding an initial `OverlapState`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_file: Option<PathBuf>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { sigma0: 1.0, state_file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub mode: SimMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_every: Option<u64>,
    pub max_steps: u64,
    /// Bound `K` on `max_i Q_ii`; exceeding it stops the run with a flag.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { mode: SimMode::Weight, record_every: None, max_steps: DEFAULT_MAX_STEPS, bound: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub csv: bool,
    pub json: bool,
    pub snapshots: bool,
    pub svg: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, csv: true, json: false, snapshots: true, svg: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default = "default_tag")]
    pub tag: String,
    pub d: usize,
    pub p: usize,
    pub k: usize,
    pub gamma: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_clip: Option<f64>,
    /// Defaults to the student activation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_activation: Option<ActivationKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_activation_clip: Option<f64>,
    pub regime: RegimeTag,
    #[serde(rename = "T", alias = "horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub init: InitConfig,
    /// Expectation strategy; closed form when available, quadrature otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<EvalStrategy>,
    #[serde(default)]
    pub xi: XiStrategy,
    /// Adds `(γ/p) Ψ^noise_ii` to the `q` drift of the mf and hdmf regimes.
    #[serde(default)]
    pub mf_noise_correction: bool,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_tag() -> String {
    "run".into()
}

fn default_activation() -> ActivationKind {
    ActivationKind::ErfNormalized
}

fn build_activation(kind: ActivationKind, clip: Option<f64>, which: &str) -> Result<Activation> {
    if let Some(c) = clip {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("{which} clip level must be positive, got {c}")));
        }
        if kind != ActivationKind::Square {
            return Err(Error::Config(format!("{which} clip applies only to the square activation")));
        }
    }
    Activation::from_kind(kind, clip).ok_or_else(|| Error::Config(format!("{which} activation {kind:?} cannot be built from a config")))
}

impl ExperimentConfig {
    /// A config with every optional field at its default.
    pub fn new(d: usize, p: usize, k: usize, gamma: f64, regime: RegimeTag, horizon: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tag: default_tag(),
            d,
            p,
            k,
            gamma,
            delta: 0.0,
            activation: default_activation(),
            activation_clip: None,
            teacher_activation: None,
            teacher_activation_clip: None,
            regime,
            horizon,
            seed: 0,
            teacher: TeacherConfig::default(),
            init: InitConfig::default(),
            strategy: None,
            xi: XiStrategy::default(),
            mf_noise_correction: false,
            integrator: IntegratorConfig::default(),
            simulation: SimulationConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Canonical TOML form.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.p == 0 || self.k == 0 || self.d == 0 {
            return fail(format!("d, p, k must be positive (d = {}, p = {}, k = {})", self.d, self.p, self.k));
        }
        if self.k > self.p {
            return fail(format!("k <= p is required (k = {}, p = {})", self.k, self.p));
        }
        if self.k > self.d {
            return fail(format!("k <= d is required (k = {}, d = {})", self.k, self.d));
        }
        if self.regime == RegimeTag::Mf && self.d <= self.k {
            return fail(format!("the mf regime requires d > k (d = {}, k = {})", self.d, self.k));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return fail(format!("delta must be nonnegative, got {}", self.delta));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return fail(format!("T must be nonnegative, got {}", self.horizon));
        }
        if !(self.init.sigma0 >= 0.0 && self.init.sigma0.is_finite()) {
            return fail(format!("init.sigma0 must be nonnegative, got {}", self.init.sigma0));
        }
        if !(self.teacher.scale > 0.0 && self.teacher.scale.is_finite()) {
            return fail(format!("teacher.scale must be positive, got {}", self.teacher.scale));
        }
        if let Some(b) = self.simulation.bound {
            if !(b > 0.0) {
                return fail(format!("simulation.bound must be positive, got {b}"));
            }
        }
        if self.simulation.max_steps == 0 || self.simulation.record_every == Some(0) || self.integrator.record_every == Some(0) {
            return fail("max_steps and record_every must be positive".into());
        }
        if let XiStrategy::Quadrature { order: 0 } | XiStrategy::MonteCarlo { n_samples: 0, .. } = self.xi {
            return fail("xi needs at least one node".into());
        }
        self.integrator.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.activations()?;
        self.eval_strategy()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn activations(&self) -> Result<(Activation, Activation)> {
        let student = build_activation(self.activation, self.activation_clip, "student")?;
        let teacher = build_activation(
            self.teacher_activation.unwrap_or(self.activation),
            self.teacher_activation_clip.or(if self.teacher_activation.is_none() { self.activation_clip } else { None }),
            "teacher",
        )?;
        Ok((student, teacher))
    }

    pub fn eval_strategy(&self) -> Result<EvalStrategy> {
        if let Some(s) = self.strategy {
            return Ok(s);
        }
        let (s, t) = self.activations()?;
        Ok(EvalStrategy::auto(crate::expect::ActivationPair::new(&s, &t)))
    }

    pub fn problem(&self) -> Result<Problem> {
        let (student, teacher) = self.activations()?;
        Ok(Problem { p: self.p, k: self.k, d: self.d, gamma: self.gamma, delta: self.delta, student, teacher })
    }

    /// The ODE regime; `None` for `simulate`.
    pub fn ode_regime(&self) -> Option<Regime> {
        let noise = self.mf_noise_correction.then_some(self.gamma);
        match self.regime {
            RegimeTag::Simulate => None,
            RegimeTag::Ss => Some(Regime::Ss { gamma: self.gamma }),
            RegimeTag::Gf => Some(Regime::Gf),
            RegimeTag::GfNoise => Some(Regime::GfNoise { gamma: self.gamma }),
            RegimeTag::Mf => Some(Regime::Mf { d: self.d, xi: self.xi, noise_gamma: noise }),
            RegimeTag::Hdmf => Some(Regime::Hdmf { noise_gamma: noise }),
        }
    }

    fn state_file(&self) -> Result<Option<OverlapState>> {
        let Some(path) = &self.init.state_file else { return Ok(None) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let raw: OverlapState = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let st = OverlapState::new(raw.q, raw.m, raw.p)?;
        if st.students() != self.p || st.teachers() != self.k {
            return Err(Error::Config(format!(
                "state file has p = {}, k = {} but the config has p = {}, k = {}",
                st.students(),
                st.teachers(),
                self.p,
                self.k
            )));
        }
        Ok(Some(st))
    }

    /// Teacher weights and Gram matrix. With a state file the teacher is built
    /// to reproduce the file's `P` exactly.
    pub fn teacher(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        match self.state_file()? {
            Some(st) => {
                let spec = TeacherSpec { k: self.k, d: self.d, mode: TeacherMode::OrthonormalRows, scale: 1.0 };
                let (frame, _) = make_teacher(&spec, self.seed)?;
                let l = st.p.clone().cholesky().ok_or_else(|| Error::Singular("teacher Gram in state file".into()))?.l();
                Ok((l * frame, st.p))
            }
            None => {
                let spec = TeacherSpec { k: self.k, d: self.d, mode: self.teacher.mode, scale: self.teacher.scale };
                make_teacher(&spec, self.seed)
            }
        }
    }

    /// Initial student weights against the given teacher.
    pub fn initial_weights(&self, w_star: &DMatrix<f64>) -> Result<WeightState> {
        match self.state_file()? {
            Some(st) => weights_with_overlaps(&st, w_star, self.seed),
            None => init_student(self.p, self.d, self.init.sigma0, self.seed),
        }
    }

    /// Initial overlaps: the state file, or the overlaps of the seeded draw.
    pub fn initial_overlaps(&self) -> Result<OverlapState> {
        if let Some(st) = self.state_file()? {
            return Ok(st);
        }
        let (w_star, gram) = self.teacher()?;
        let w = self.initial_weights(&w_star)?;
        let st = overlaps_of(&w, &w_star, &gram)?;
        st.validate(None)?;
        Ok(st)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    /// Sup-norm risk gap between the run and the reference regime.
    SupRiskGap,
    TerminalRisk,
    /// Mean risk over the final `plateau_fraction` of the horizon.
    PlateauLevel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub d: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub p: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub gamma: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub delta: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub seed: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub base: ExperimentConfig,
    #[serde(default)]
    pub axes: SweepAxes,
    pub metric: SweepMetric,
    /// Regime compared against for `sup_risk_gap`.
    #[serde(default = "default_reference")]
    pub reference: RegimeTag,
    #[serde(default = "default_plateau_fraction")]
    pub plateau_fraction: f64,
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
}

fn default_reference() -> RegimeTag {
    RegimeTag::Ss
}

fn default_plateau_fraction() -> f64 {
    0.2
}

fn default_max_runs() -> usize {
    10_000
}

/// One grid point: the axis values that were set, and the resulting config.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub labels: Vec<(String, String)>,
    pub config: ExperimentConfig,
}

impl SweepSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if !(self.plateau_fraction > 0.0 && self.plateau_fraction <= 1.0) {
            return Err(Error::Config("plateau_fraction must lie in (0, 1]".into()));
        }
        if self.reference == RegimeTag::Simulate && self.metric == SweepMetric::SupRiskGap && self.base.regime == RegimeTag::Simulate {
            return Err(Error::Config("sup_risk_gap needs run and reference to differ".into()));
        }
        let n = self.len();
        if n > self.max_runs {
            return Err(Error::Config(format!("sweep has {n} points, above max_runs = {}", self.max_runs)));
        }
        self.base.validate()
    }

    pub fn len(&self) -> usize {
        let a = &self.axes;
        [a.d.len(), a.p.len(), a.gamma.len(), a.delta.len(), a.seed.len()].iter().map(|&n| n.max(1)).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cartesian product of the axes in the order d, p, gamma, delta, seed
    /// (seed varying fastest). Each config is validated.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        fn axis<T: Clone + ToString>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().cloned().map(Some).collect()
            }
        }
        let a = &self.axes;
        let mut out = Vec::new();
        for d in axis(&a.d) {
            for p in axis(&a.p) {
                for gamma in axis(&a.gamma) {
                    for delta in axis(&a.delta) {
                        for seed in axis(&a.seed) {
                            let mut cfg = self.base.clone();
                            let mut labels = Vec::new();
                            if let Some(v) = d {
                                cfg.d = v;
                                labels.push(("d".to_string(), v.to_string()));
                            }
                            if let Some(v) = p {
                                cfg.p = v;
                                labels.push(("p".to_string(), v.to_string()));
                            }
                            if let Some(v) = gamma {
                                cfg.gamma = v;
                                labels.push(("gamma".to_string(), v.to_string()));
                            }
                            if let Some(v) = delta {
                                cfg.delta = v;
                                labels.push(("delta".to_string(), v.to_string()));
                            }
                            if let Some(v) = seed {
                                cfg.seed = v;
                                labels.push(("seed".to_string(), v.to_string()));
                            }
                            let index = out.len();
                            cfg.tag = format!("{}_pt{index}", self.base.tag);
                            cfg.validate()?;
                            out.push(SweepPoint { index, labels, config: cfg });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
d = 100
p = 10
k = 2
gamma = 0.05
regime = "simulate"
T = 5.0
"#;

    #[test]
    fn parse_defaults_and_round_trip() {
        let c = ExperimentConfig::from_toml_str(BASIC).unwrap();
        assert_eq!(c.activation, ActivationKind::ErfNormalized);
        assert_eq!(c.delta, 0.0);
        assert_eq!(c.horizon, 5.0);
        let canon = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&canon).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string().unwrap(), canon);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{BASIC}\nlearning_rate = 3\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = format!("{BASIC}\n[init]\nsigma = 1\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn realisability_constraints() {
        let mut c = ExperimentConfig::new(10, 2, 3, 0.1, RegimeTag::Gf, 1.0);
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("k <= p"), "{err}");
        c.p = 3;
        c.d = 2;
        assert!(c.validate().unwrap_err().to_string().contains("k <= d"));
        c.d = 3;
        c.regime = RegimeTag::Mf;
        assert!(c.validate().unwrap_err().to_string().contains("d > k"));
        c.d = 4;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn closed_form_strategy_for_custom_is_never_default() {
        let mut c = ExperimentConfig::new(10, 2, 2, 0.1, RegimeTag::Gf, 1.0);
        c.activation = ActivationKind::Square;
        c.activation_clip = Some(4.0);
        assert!(matches!(c.eval_strategy().unwrap(), EvalStrategy::Quadrature { .. }));
        c.activation_clip = None;
        assert_eq!(c.eval_strategy().unwrap(), EvalStrategy::ClosedForm);
        c.activation = ActivationKind::Custom;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sweep_grid() {
        let text = r#"
metric = "terminal_risk"
[base]
d = 100
p = 4
k = 2
gamma = 0.05
regime = "gf"
T = 1.0
[axes]
d = [100, 400]
seed = [1, 2, 3]
"#;
        let s = SweepSpec::from_toml_str(text).unwrap();
        let pts = s.points().unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[4].config.d, 400);
        assert_eq!(pts[4].config.seed, 2);
        assert_eq!(pts[4].labels, vec![("d".into(), "400".into()), ("seed".into(), "2".into())]);
    }

    #[test]
    fn state_file_teacher_reproduces_gram() {
        let dir = std::env::temp_dir().join(format!("odyn-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let st = crate::overlap::random_state(3, 2, 9, 1.0, 5).unwrap();
        let path = dir.join("state.json");
        std::fs::write(&path, serde_json::to_string(&st).unwrap()).unwrap();
        let mut c = ExperimentConfig::new(40, 3, 2, 0.1, RegimeTag::Simulate, 1.0);
        c.init.state_file = Some(path);
        let (w_star, gram) = c.teacher().unwrap();
        let w = c.initial_weights(&w_star).unwrap();
        let back = overlaps_of(&w, &w_star, &gram).unwrap();
        assert!(crate::linalg::max_abs_diff(&back.q, &st.q) < 1e-12);
        assert!(crate::linalg::max_abs_diff(&back.m, &st.m) < 1e-12);
        assert!(crate::linalg::max_abs_diff(&back.p, &st.p) < 1e-12);
    }
}
