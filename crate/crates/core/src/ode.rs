//! Deterministic overlap ODEs and their fixed-step integration.
//!
//! | regime     | state      | right-hand side |
//! |------------|------------|-----------------|
//! | `ss`       | `(Q, M)`   | `dM = Ψ^M`, `dQ = Ψ^GF + (γ/p) Ψ^Var` |
//! | `gf`       | `(Q, M)`   | `dM = Ψ^M`, `dQ = Ψ^GF` |
//! | `gf-noise` | `(Q, M)`   | `dM = Ψ^M`, `dQ = Ψ^GF + (γ/p) Ψ^noise` |
//! | `mf`       | `(M, q)`   | `dM = E_Ξ[Ψ^M(Ω̃)]`, `dq_i = E_Ξ[Ψ⊥_ii(Ω̃)]` |
//! | `hdmf`     | `(M, q)`   | `dM = Ψ^M(Ω̄)`, `dq_i = Ψ⊥_ii(Ω̄)` |

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::expect::{self, hdmf_psi, hdmf_risk, mf_expected_psi, mf_expected_risk, ActivationPair, EvalStrategy};
use crate::error::{Error, Result};
use crate::linalg::{self, max_abs_diff, PSD_TOLERANCE};
use crate::overlap::{bar_omega, OverlapState, ReducedMFState, XiModel, XiStrategy};
use crate::trajectory::{Snapshot, Trajectory, TrajectoryMeta};

pub const MAX_DT: f64 = 0.1;
pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_MAX_ODE_STEPS: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "kebab-case")]
pub enum Regime {
    Ss { gamma: f64 },
    Gf,
    GfNoise { gamma: f64 },
    /// `noise_gamma`: adds `(γ/p) Ψ^noise_ii(Ω̄)` to `dq_i` when set.
    Mf { d: usize, xi: XiStrategy, noise_gamma: Option<f64> },
    Hdmf { noise_gamma: Option<f64> },
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Ss { .. } => "ss",
            Regime::Gf => "gf",
            Regime::GfNoise { .. } => "gf-noise",
            Regime::Mf { .. } => "mf",
            Regime::Hdmf { .. } => "hdmf",
        }
    }

    pub fn is_reduced(&self) -> bool {
        matches!(self, Regime::Mf { .. } | Regime::Hdmf { .. })
    }

    fn mismatch(&self, detail: &str) -> Error {
        Error::RegimeMismatch { regime: self.as_str().into(), detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OdeState {
    Overlap(OverlapState),
    Reduced { mf: ReducedMFState, gram: DMatrix<f64> },
}

impl OdeState {
    /// Reduced state with `q = diag(Q⊥)` from a full overlap state.
    pub fn reduced_from(state: &OverlapState) -> Result<Self> {
        Ok(OdeState::Reduced { mf: crate::overlap::reduce_to_mf(state)?, gram: state.p.clone() })
    }

    /// Converts to the state kind `regime` acts on; full states are reduced
    /// for `mf`/`hdmf`.
    pub fn for_regime(state: &OverlapState, regime: &Regime) -> Result<Self> {
        if regime.is_reduced() {
            Self::reduced_from(state)
        } else {
            Ok(OdeState::Overlap(state.clone()))
        }
    }

    pub fn students(&self) -> usize {
        match self {
            OdeState::Overlap(s) => s.students(),
            OdeState::Reduced { mf, .. } => mf.students(),
        }
    }

    fn snapshot(&self) -> Snapshot {
        match self {
            OdeState::Overlap(s) => Snapshot::Overlap(s.clone()),
            OdeState::Reduced { mf, gram } => Snapshot::Reduced { state: mf.clone(), p: gram.clone() },
        }
    }

    fn max_q_diag(&self) -> Result<f64> {
        Ok(match self {
            OdeState::Overlap(s) => s.max_q_diag(),
            OdeState::Reduced { mf, gram } => bar_omega(mf, gram)?.max_q_diag(),
        })
    }

    fn advanced(&self, h: f64, inc: &Increment) -> Result<Self> {
        match (self, inc) {
            (OdeState::Overlap(s), Increment::Overlap { dq, dm }) => {
                let mut q = &s.q + dq * h;
                linalg::symmetrize(&mut q);
                Ok(OdeState::Overlap(OverlapState::new_unchecked(q, &s.m + dm * h, s.p.clone())?))
            }
            (OdeState::Reduced { mf, gram }, Increment::Reduced { dm, dq }) => Ok(OdeState::Reduced {
                mf: ReducedMFState { m: &mf.m + dm * h, q: &mf.q + dq * h },
                gram: gram.clone(),
            }),
            _ => Err(Error::Shape("increment kind does not match state".into())),
        }
    }

    /// Stage copy with `q` clipped at zero so that `√q` stays defined.
    fn stage_clipped(mut self) -> Self {
        if let OdeState::Reduced { mf, .. } = &mut self {
            mf.q.apply(|v| *v = v.max(0.0));
        }
        self
    }
}

/// Right-hand side of matching shape.
#[derive(Debug, Clone, PartialEq)]
pub enum Increment {
    Overlap { dq: DMatrix<f64>, dm: DMatrix<f64> },
    Reduced { dm: DMatrix<f64>, dq: DVector<f64> },
}

impl Increment {
    fn combine(parts: [(&Increment, f64); 4]) -> Result<Increment> {
        let mut acc = parts[0].0.clone();
        acc.scale(parts[0].1);
        for (inc, w) in &parts[1..] {
            match (&mut acc, *inc) {
                (Increment::Overlap { dq, dm }, Increment::Overlap { dq: bq, dm: bm }) => {
                    *dq += bq * *w;
                    *dm += bm * *w;
                }
                (Increment::Reduced { dm, dq }, Increment::Reduced { dm: bm, dq: bq }) => {
                    *dm += bm * *w;
                    *dq += bq * *w;
                }
                _ => return Err(Error::Shape("mixed increment kinds".into())),
            }
        }
        Ok(acc)
    }

    fn scale(&mut self, w: f64) {
        match self {
            Increment::Overlap { dq, dm } => {
                *dq *= w;
                *dm *= w;
            }
            Increment::Reduced { dm, dq } => {
                *dm *= w;
                *dq *= w;
            }
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        match self {
            Increment::Overlap { dq, dm } => dq.amax().max(dm.amax()),
            Increment::Reduced { dm, dq } => dm.amax().max(dq.amax()),
        }
    }
}

/// Exact right-hand side of `regime` at `state`.
pub fn drift(state: &OdeState, regime: &Regime, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<Increment> {
    match (regime, state) {
        (Regime::Ss { .. } | Regime::Gf | Regime::GfNoise { .. }, OdeState::Overlap(s)) => {
            let dm = expect::psi_m(s, acts, strat)?;
            let mut dq = expect::psi_gf(s, acts, strat)?;
            let pf = s.students() as f64;
            match regime {
                Regime::Ss { gamma } => dq += expect::psi_var(s, acts, delta, strat)? * (gamma / pf),
                Regime::GfNoise { gamma } => dq += expect::psi_noise(s, acts, delta, strat)? * (gamma / pf),
                _ => {}
            }
            linalg::symmetrize(&mut dq);
            Ok(Increment::Overlap { dq, dm })
        }
        (Regime::Mf { d, xi, noise_gamma }, OdeState::Reduced { mf, gram }) => {
            let model = XiModel::new(*d, gram.nrows(), *xi)?;
            let (dm, mut dq) = mf_expected_psi(mf, gram, acts, &model, strat)?;
            add_noise(&mut dq, *noise_gamma, mf, gram, acts, delta, strat)?;
            Ok(Increment::Reduced { dm, dq })
        }
        (Regime::Hdmf { noise_gamma }, OdeState::Reduced { mf, gram }) => {
            let (dm, mut dq) = hdmf_psi(mf, gram, acts, strat)?;
            add_noise(&mut dq, *noise_gamma, mf, gram, acts, delta, strat)?;
            Ok(Increment::Reduced { dm, dq })
        }
        (r, OdeState::Overlap(_)) => Err(r.mismatch("needs a reduced (M, q) state")),
        (r, OdeState::Reduced { .. }) => Err(r.mismatch("needs a full overlap state")),
    }
}

fn add_noise(
    dq: &mut DVector<f64>,
    noise_gamma: Option<f64>,
    mf: &ReducedMFState,
    gram: &DMatrix<f64>,
    acts: ActivationPair<'_>,
    delta: f64,
    strat: &EvalStrategy,
) -> Result<()> {
    if let Some(gamma) = noise_gamma {
        let noise = expect::psi_noise(&bar_omega(mf, gram)?, acts, delta, strat)?;
        let pf = mf.students() as f64;
        for i in 0..dq.len() {
            dq[i] += gamma / pf * noise[(i, i)];
        }
    }
    Ok(())
}

/// Population risk appropriate to the regime.
pub fn regime_risk(state: &OdeState, regime: &Regime, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<f64> {
    match (regime, state) {
        (Regime::Mf { d, xi, .. }, OdeState::Reduced { mf, gram }) => {
            mf_expected_risk(mf, gram, acts, delta, &XiModel::new(*d, gram.nrows(), *xi)?, strat)
        }
        (Regime::Hdmf { .. }, OdeState::Reduced { mf, gram }) => hdmf_risk(mf, gram, acts, delta, strat),
        (_, OdeState::Overlap(s)) if !regime.is_reduced() => expect::risk(s, acts, delta, strat),
        (r, _) => Err(r.mismatch("state kind does not match")),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    pub dt: f64,
    /// Steps between records; every step when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_every: Option<u64>,
    pub max_steps: u64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { method: Method::Rk4, dt: DEFAULT_DT, record_every: None, max_steps: DEFAULT_MAX_ODE_STEPS }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(Error::InvalidInput(format!("dt must lie in (0, {MAX_DT}], got {}", self.dt)));
        }
        if self.record_every == Some(0) {
            return Err(Error::InvalidInput("record_every must be positive".into()));
        }
        Ok(())
    }

    /// Number of uniform steps covering `[0, horizon]` with `h ≤ dt`.
    pub fn steps_for(&self, horizon: f64) -> u64 {
        let n = horizon / self.dt;
        (n - 1e-9 * n.max(1.0)).ceil().max(0.0) as u64
    }
}

fn rk_step(state: &OdeState, h: f64, method: Method, rhs: &dyn Fn(&OdeState) -> Result<Increment>) -> Result<OdeState> {
    match method {
        Method::Euler => state.advanced(h, &rhs(state)?),
        Method::Rk4 => {
            let k1 = rhs(state)?;
            let k2 = rhs(&state.advanced(0.5 * h, &k1)?.stage_clipped())?;
            let k3 = rhs(&state.advanced(0.5 * h, &k2)?.stage_clipped())?;
            let k4 = rhs(&state.advanced(h, &k3)?.stage_clipped())?;
            let slope = Increment::combine([(&k1, 1.0 / 6.0), (&k2, 1.0 / 3.0), (&k3, 1.0 / 3.0), (&k4, 1.0 / 6.0)])?;
            state.advanced(h, &slope)
        }
    }
}

fn check_state(state: &mut OdeState, t: f64, events: &mut Vec<String>) -> Result<()> {
    match state {
        OdeState::Overlap(s) => {
            if s.q.iter().chain(s.m.iter()).any(|v| !v.is_finite()) {
                return Err(Error::PsdViolation { t, min_eig: f64::NAN });
            }
        }
        OdeState::Reduced { mf, .. } => {
            if mf.m.iter().any(|v| !v.is_finite()) {
                return Err(Error::PsdViolation { t, min_eig: f64::NAN });
            }
            let clipped = mf.clip_q().map_err(|e| match e {
                Error::NotPsd { min_eig } => Error::PsdViolation { t, min_eig },
                other => other,
            })?;
            if clipped > 0 {
                events.push(format!("t = {t}: clipped {clipped} q entries to 0"));
            }
        }
    }
    Ok(())
}

fn check_psd(state: &OdeState, t: f64) -> Result<()> {
    if let OdeState::Overlap(s) = state {
        let omega = s.omega();
        let min_eig = linalg::min_eigenvalue(&omega);
        if min_eig < -PSD_TOLERANCE * (1.0 + omega.amax()) * 100.0 {
            return Err(Error::PsdViolation { t, min_eig });
        }
    }
    Ok(())
}

/// Integrates from `state0` over `[0, horizon]` with uniform steps
/// `h = T / ⌈T / dt⌉`, recording risk (and snapshots if requested).
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    state0: &OdeState,
    regime: &Regime,
    integ: &IntegratorConfig,
    horizon: f64,
    acts: ActivationPair<'_>,
    delta: f64,
    strat: &EvalStrategy,
    meta: TrajectoryMeta,
    snapshots: bool,
) -> Result<Trajectory> {
    integ.validate()?;
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidInput(format!("horizon must be finite and nonnegative, got {horizon}")));
    }
    strat.validate()?;
    let mut meta = meta;
    if meta.regime.is_empty() {
        meta.regime = regime.as_str().into();
    }
    let wanted = integ.steps_for(horizon);
    let n = wanted.min(integ.max_steps);
    let h = if wanted > 0 { horizon / wanted as f64 } else { 0.0 };
    let every = integ.record_every.unwrap_or(1);
    let mut traj = Trajectory::new(meta, snapshots);
    if n < wanted {
        traj.meta.truncated = true;
        traj.meta.events.push(format!("step budget {} reached before T = {horizon}", integ.max_steps));
    }
    let rhs = |s: &OdeState| drift(s, regime, acts, delta, strat);
    let mut state = state0.clone();
    check_state(&mut state, 0.0, &mut traj.meta.events)?;
    // Surfaces a kind mismatch before any work.
    let r0 = regime_risk(&state, regime, acts, delta, strat)?;
    check_psd(&state, 0.0)?;
    traj.push(0.0, r0, state.max_q_diag()?, || state.snapshot());
    for step in 1..=n {
        state = rk_step(&state, h, integ.method, &rhs)?;
        let t = step as f64 * h;
        check_state(&mut state, t, &mut traj.meta.events)?;
        if step % every == 0 || step == n {
            check_psd(&state, t)?;
            let r = regime_risk(&state, regime, acts, delta, strat)?;
            traj.push(t, r, state.max_q_diag()?, || state.snapshot());
        }
    }
    Ok(traj)
}

/// Integrates the regime named in `config` from its initial overlaps.
pub fn run_ode(config: &crate::config::ExperimentConfig) -> Result<Trajectory> {
    config.validate()?;
    let regime = config
        .ode_regime()
        .ok_or_else(|| Error::Config("regime `simulate` is not an ODE regime".into()))?;
    let problem = config.problem()?;
    let state0 = OdeState::for_regime(&config.initial_overlaps()?, &regime)?;
    let meta = TrajectoryMeta {
        tag: config.tag.clone(),
        regime: regime.as_str().into(),
        seed: config.seed,
        config: Some(serde_json::to_value(config)?),
        provenance: crate::trajectory::provenance(),
        ..Default::default()
    };
    integrate(
        &state0,
        &regime,
        &config.integrator,
        config.horizon,
        problem.acts(),
        config.delta,
        &config.eval_strategy()?,
        meta,
        config.output.snapshots,
    )
}

/// Gap statistics between two trajectories on the coarser grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub sup_risk_gap: f64,
    pub t_sup: f64,
    pub terminal_gap: f64,
    pub terminal_time: f64,
    pub times: Vec<f64>,
    pub risk_gaps: Vec<f64>,
    /// Sup-norm `‖Ω_a − Ω_b‖∞` per time, when both carry snapshots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_gaps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sup_overlap_gap: Option<f64>,
}

fn interpolate<T>(times: &[f64], values: &[T], t: f64, lerp: impl Fn(&T, &T, f64) -> T) -> T
where
    T: Clone,
{
    let i = times.partition_point(|&s| s <= t);
    if i == 0 {
        return values[0].clone();
    }
    if i == times.len() {
        return values[i - 1].clone();
    }
    let (t0, t1) = (times[i - 1], times[i]);
    if t == t0 {
        return values[i - 1].clone();
    }
    lerp(&values[i - 1], &values[i], (t - t0) / (t1 - t0))
}

fn student_overlaps(s: &Snapshot) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok(match s {
        Snapshot::Overlap(o) => (o.q.clone(), o.m.clone()),
        Snapshot::Reduced { state, p } => {
            let bar = bar_omega(state, p)?;
            (bar.q, bar.m)
        }
    })
}

/// Compares two trajectories after linear interpolation of the finer one
/// onto the coarser grid, restricted to the common time range.
pub fn compare(a: &Trajectory, b: &Trajectory) -> Result<CompareReport> {
    a.validate()?;
    b.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::DisjointTimes);
    }
    let lo = a.times[0].max(b.times[0]);
    let hi = a.times[a.len() - 1].min(b.times[b.len() - 1]);
    if lo > hi {
        return Err(Error::DisjointTimes);
    }
    let in_range = |tr: &Trajectory| tr.times.iter().filter(|&&t| t >= lo && t <= hi).count();
    let (coarse, fine) = if in_range(a) <= in_range(b) { (a, b) } else { (b, a) };
    let idx: Vec<usize> = (0..coarse.len()).filter(|&i| coarse.times[i] >= lo && coarse.times[i] <= hi).collect();
    if idx.is_empty() {
        return Err(Error::DisjointTimes);
    }
    let lerp = |x: &f64, y: &f64, w: f64| x + (y - x) * w;
    let times: Vec<f64> = idx.iter().map(|&i| coarse.times[i]).collect();
    let risk_gaps: Vec<f64> =
        idx.iter().map(|&i| (coarse.risks[i] - interpolate(&fine.times, &fine.risks, coarse.times[i], lerp)).abs()).collect();
    let (mut sup, mut t_sup) = (0.0, times[0]);
    for (t, g) in times.iter().zip(&risk_gaps) {
        if *g > sup {
            sup = *g;
            t_sup = *t;
        }
    }
    let overlap_gaps = match (&coarse.snapshots, &fine.snapshots) {
        (Some(cs), Some(fs)) => {
            let fine_ov = fs.iter().map(student_overlaps).collect::<Result<Vec<_>>>()?;
            let mut gaps = Vec::with_capacity(idx.len());
            for &i in &idx {
                let (cq, cm) = student_overlaps(&cs[i])?;
                if fine_ov[0].0.shape() != cq.shape() || fine_ov[0].1.shape() != cm.shape() {
                    gaps.clear();
                    break;
                }
                let (fq, fm) = interpolate(&fine.times, &fine_ov, coarse.times[i], |x, y, w| {
                    (&x.0 + (&y.0 - &x.0) * w, &x.1 + (&y.1 - &x.1) * w)
                });
                gaps.push(max_abs_diff(&cq, &fq).max(max_abs_diff(&cm, &fm)));
            }
            (!gaps.is_empty()).then_some(gaps)
        }
        _ => None,
    };
    Ok(CompareReport {
        sup_risk_gap: sup,
        t_sup,
        terminal_gap: *risk_gaps.last().expect("nonempty"),
        terminal_time: *times.last().expect("nonempty"),
        sup_overlap_gap: overlap_gaps.as_ref().map(|g| g.iter().copied().fold(0.0, f64::max)),
        overlap_gaps,
        times,
        risk_gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::overlap::random_state;

    fn meta() -> TrajectoryMeta {
        TrajectoryMeta { tag: "t".into(), ..Default::default() }
    }

    fn run(state: &OdeState, regime: Regime, act: &Activation, delta: f64, dt: f64, t: f64) -> Trajectory {
        let integ = IntegratorConfig { dt, ..Default::default() };
        let acts = ActivationPair::new(act, act);
        integrate(state, &regime, &integ, t, acts, delta, &EvalStrategy::auto(acts), meta(), true).unwrap()
    }

    #[test]
    fn gf_fixed_point_has_zero_drift() {
        let st = random_state(3, 3, 10, 1.0, 2).unwrap();
        let perfect = OdeState::Overlap(OverlapState::perfect_learning(&st.p));
        for act in [Activation::square(), Activation::erf()] {
            let acts = ActivationPair::new(&act, &act);
            let inc = drift(&perfect, &Regime::Gf, acts, 0.0, &EvalStrategy::auto(acts)).unwrap();
            assert!(inc.max_abs() < 1e-12, "{}", inc.max_abs());
        }
    }

    #[test]
    fn mf_at_zero_q_keeps_q() {
        let st = random_state(4, 2, 10, 1.0, 5).unwrap();
        let OdeState::Reduced { mut mf, gram } = OdeState::reduced_from(&st).unwrap() else { unreachable!() };
        mf.q.fill(0.0);
        let s = OdeState::Reduced { mf, gram };
        for act in [Activation::square(), Activation::erf()] {
            let acts = ActivationPair::new(&act, &act);
            for regime in [Regime::Mf { d: 20, xi: XiStrategy::default(), noise_gamma: None }, Regime::Hdmf { noise_gamma: None }] {
                let Increment::Reduced { dq, .. } = drift(&s, &regime, acts, 0.0, &EvalStrategy::auto(acts)).unwrap() else {
                    unreachable!()
                };
                assert!(dq.amax() < 1e-14);
            }
        }
    }

    #[test]
    fn ss_minus_gf_is_scaled_var() {
        let st = random_state(3, 2, 10, 0.8, 7).unwrap();
        let s = OdeState::Overlap(st.clone());
        let act = Activation::erf();
        let acts = ActivationPair::new(&act, &act);
        let strat = EvalStrategy::auto(acts);
        let Increment::Overlap { dq: a, .. } = drift(&s, &Regime::Ss { gamma: 0.3 }, acts, 0.1, &strat).unwrap() else { unreachable!() };
        let Increment::Overlap { dq: b, .. } = drift(&s, &Regime::Gf, acts, 0.1, &strat).unwrap() else { unreachable!() };
        let var = expect::psi_var(&st, acts, 0.1, &strat).unwrap() * (0.3 / 3.0);
        assert!(max_abs_diff(&(a - b), &var) < 1e-14);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let st = random_state(2, 1, 10, 1.0, 1).unwrap();
        let act = Activation::square();
        let acts = ActivationPair::new(&act, &act);
        let e = drift(&OdeState::Overlap(st), &Regime::Hdmf { noise_gamma: None }, acts, 0.0, &EvalStrategy::ClosedForm);
        assert!(matches!(e, Err(Error::RegimeMismatch { .. })));
    }

    #[test]
    fn square_single_student_converges() {
        let p = DMatrix::from_element(1, 1, 1.0);
        let st = OverlapState::new(DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 0.5), p).unwrap();
        let tr = run(&OdeState::Overlap(st), Regime::Gf, &Activation::square(), 0.0, 0.01, 30.0);
        let Some(Snapshot::Overlap(last)) = tr.final_snapshot() else { panic!() };
        assert!((last.q[(0, 0)] - 1.0).abs() < 1e-6 && (last.m[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(tr.final_risk().unwrap() < 1e-10);
    }

    #[test]
    fn halving_dt_barely_moves_final_risk() {
        let st = OdeState::Overlap(random_state(3, 2, 20, 0.7, 3).unwrap());
        let a = run(&st, Regime::Gf, &Activation::square(), 0.0, 0.02, 3.0).final_risk().unwrap();
        let b = run(&st, Regime::Gf, &Activation::square(), 0.0, 0.01, 3.0).final_risk().unwrap();
        assert!((a - b).abs() < 1e-6, "{}", (a - b).abs());
    }

    #[test]
    fn compare_self_is_zero_and_disjoint_fails() {
        let st = OdeState::Overlap(random_state(2, 1, 10, 1.0, 4).unwrap());
        let tr = run(&st, Regime::Gf, &Activation::erf(), 0.0, 0.05, 1.0);
        let r = compare(&tr, &tr).unwrap();
        assert_eq!(r.sup_risk_gap, 0.0);
        assert_eq!(r.terminal_gap, 0.0);
        assert_eq!(r.sup_overlap_gap, Some(0.0));
        let mut shifted = tr.clone();
        shifted.times.iter_mut().for_each(|t| *t += 10.0);
        assert!(matches!(compare(&tr, &shifted), Err(Error::DisjointTimes)));
    }

    #[test]
    fn compare_interpolates_onto_coarse_grid() {
        let mut a = Trajectory::new(meta(), false);
        let mut b = Trajectory::new(meta(), false);
        for i in 0..=2 {
            a.push(i as f64, i as f64, 0.0, || unreachable!());
        }
        for i in 0..=4 {
            b.push(i as f64 * 0.5, i as f64 * 0.5 + 0.25, 0.0, || unreachable!());
        }
        let r = compare(&a, &b).unwrap();
        assert_eq!(r.times, vec![0.0, 1.0, 2.0]);
        assert!(r.risk_gaps.iter().all(|g| (g - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_horizon_single_record() {
        let st = OdeState::Overlap(random_state(2, 1, 10, 1.0, 4).unwrap());
        let tr = run(&st, Regime::Gf, &Activation::erf(), 0.0, 0.05, 0.0);
        assert_eq!(tr.len(), 1);
    }
}
