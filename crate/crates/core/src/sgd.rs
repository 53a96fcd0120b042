//! One-pass SGD, in weight space and as the exact overlap-space process.
//!
//! Weight space: `x ~ N(0, I_d/d)`, `z ~ N(0, 1)`,
//! `w_i ← w_i + (γ/p) σ'(λ_i) E x` with displacement
//! `E = (1/k) Σ_r σ★(λ★_r) − (1/p) Σ_i σ(λ_i) + √Δ z`.
//!
//! Overlap space: `(λ, λ★) ~ N(0, Ω)` is drawn directly and
//! `ΔM_ir = (γ/pd) σ'_i λ★_r E`,
//! `ΔQ_ij = (γ/pd)(σ'_i λ_j + σ'_j λ_i) E + (γ²/p²d) ‖x‖² σ'_i σ'_j E²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::expect::{risk, ActivationPair, EvalStrategy};
use crate::linalg::{self, pivoted_cholesky};
use crate::overlap::{overlaps_of, OverlapState, WeightState};
use crate::rng::{self, Rng};
use crate::trajectory::{provenance, BoundViolation, Snapshot, Trajectory, TrajectoryMeta};

/// Records kept by default in a trajectory.
pub const DEFAULT_MAX_RECORDS: u64 = 10_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    #[default]
    Weight,
    Overlap,
}

/// Sizes, step size, noise and activations of one teacher–student problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub p: usize,
    pub k: usize,
    pub d: usize,
    pub gamma: f64,
    pub delta: f64,
    pub student: Activation,
    pub teacher: Activation,
}

impl Problem {
    pub fn acts(&self) -> ActivationPair<'_> {
        ActivationPair::new(&self.student, &self.teacher)
    }

    /// Scaled time per step, `γ / (p d)`.
    pub fn time_step(&self) -> f64 {
        self.gamma / (self.p as f64 * self.d as f64)
    }

    /// `⌈T p d / γ⌉`.
    pub fn steps_for(&self, horizon: f64) -> u64 {
        let steps = horizon / self.time_step();
        // Guard against 1e-15-level overshoot turning an exact count into n + 1.
        (steps - 1e-9 * steps.max(1.0)).ceil().max(0.0) as u64
    }
}

/// Everything one SGD step consumes: the fields, `‖x‖²` and the label noise.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub lambda: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub x_norm_sq: f64,
    pub z: f64,
}

/// `E` for one sample.
pub fn displacement(problem: &Problem, s: &StepSample) -> f64 {
    let teacher: f64 = s.lambda_star.iter().map(|&v| problem.teacher.sigma(v)).sum();
    let student: f64 = s.lambda.iter().map(|&v| problem.student.sigma(v)).sum();
    teacher / problem.k as f64 - student / problem.p as f64 + problem.delta.sqrt() * s.z
}

/// Applies the overlap-space update for one sample in place.
pub fn apply_overlap_update(state: &mut OverlapState, problem: &Problem, s: &StepSample) {
    let (p, k) = (problem.p, problem.k);
    let e = displacement(problem, s);
    let ds: Vec<f64> = s.lambda.iter().map(|&v| problem.student.dsigma(v)).collect();
    let lin = problem.gamma / (p as f64 * problem.d as f64);
    let quad = problem.gamma * problem.gamma / ((p * p) as f64 * problem.d as f64) * s.x_norm_sq * e * e;
    for i in 0..p {
        let gi = lin * ds[i] * e;
        for r in 0..k {
            state.m[(i, r)] += gi * s.lambda_star[r];
        }
        for j in i..p {
            let v = lin * (ds[i] * s.lambda[j] + ds[j] * s.lambda[i]) * e + quad * ds[i] * ds[j];
            state.q[(i, j)] += v;
            if j != i {
                state.q[(j, i)] += v;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum SimState {
    Weights { w: WeightState, w_star: DMatrix<f64>, gram: DMatrix<f64> },
    Overlaps(OverlapState),
}

/// A Markov chain of SGD iterates with its own sample stream.
#[derive(Debug, Clone)]
pub struct SgdRun {
    pub problem: Problem,
    pub state: SimState,
    pub step_index: u64,
    rng: Rng,
    work: Vec<f64>,
}

impl SgdRun {
    pub fn weight_space(problem: Problem, w: WeightState, w_star: DMatrix<f64>, gram: DMatrix<f64>, seed: u64) -> Result<Self> {
        if w.p() != problem.p || w.d() != problem.d || w_star.nrows() != problem.k || w_star.ncols() != problem.d {
            return Err(Error::Shape(format!(
                "weights {}x{} and teacher {}x{} do not match p = {}, k = {}, d = {}",
                w.p(),
                w.d(),
                w_star.nrows(),
                w_star.ncols(),
                problem.p,
                problem.k,
                problem.d
            )));
        }
        Ok(Self { problem, state: SimState::Weights { w, w_star, gram }, step_index: 0, rng: rng::stream(seed, rng::STREAM_SAMPLES), work: Vec::new() })
    }

    pub fn overlap_space(problem: Problem, state: OverlapState, seed: u64) -> Result<Self> {
        if state.students() != problem.p || state.teachers() != problem.k {
            return Err(Error::Shape(format!("state is p = {}, k = {}", state.students(), state.teachers())));
        }
        Ok(Self { problem, state: SimState::Overlaps(state), step_index: 0, rng: rng::stream(seed, rng::STREAM_SAMPLES), work: Vec::new() })
    }

    pub fn mode(&self) -> SimMode {
        match self.state {
            SimState::Weights { .. } => SimMode::Weight,
            SimState::Overlaps(_) => SimMode::Overlap,
        }
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.problem.time_step()
    }

    pub fn overlaps(&self) -> Result<OverlapState> {
        match &self.state {
            SimState::Weights { w, w_star, gram } => overlaps_of(w, w_star, gram),
            SimState::Overlaps(s) => Ok(s.clone()),
        }
    }

    /// Cosine similarities `M_jr / √(Q_jj P_rr)` without forming all of `Q`.
    /// Students with zero norm get zero rows.
    pub fn cosines(&self) -> DMatrix<f64> {
        let (p, k) = (self.problem.p, self.problem.k);
        let (m, q_diag, p_diag): (DMatrix<f64>, Vec<f64>, Vec<f64>) = match &self.state {
            SimState::Weights { w, w_star, gram } => {
                let d = self.problem.d as f64;
                let m = &w.w * w_star.transpose() / d;
                let q = (0..p).map(|j| w.w.row(j).norm_squared() / d).collect();
                (m, q, (0..k).map(|r| gram[(r, r)]).collect())
            }
            SimState::Overlaps(s) => (s.m.clone(), (0..p).map(|j| s.q[(j, j)]).collect(), (0..k).map(|r| s.p[(r, r)]).collect()),
        };
        DMatrix::from_fn(p, k, |j, r| {
            let norm = (q_diag[j] * p_diag[r]).sqrt();
            if norm > 0.0 { m[(j, r)] / norm } else { 0.0 }
        })
    }
}

fn divergence(step: u64, detail: impl Into<String>) -> Error {
    Error::Divergence { step, detail: detail.into() }
}

/// One weight-space step; also returns the sample it consumed.
pub fn sgd_step_with_sample(mut run: SgdRun) -> Result<(SgdRun, StepSample)> {
    let SimState::Weights { w, w_star, .. } = &mut run.state else {
        return Err(Error::InvalidInput("sgd_step needs a weight-space run".into()));
    };
    let d = run.problem.d;
    let scale = 1.0 / (d as f64).sqrt();
    let x = DVector::from_fn(d, |_, _| run.rng.sample::<f64, _>(StandardNormal) * scale);
    let z: f64 = run.rng.sample(StandardNormal);
    let sample = StepSample { lambda: &w.w * &x, lambda_star: &*w_star * &x, x_norm_sq: x.norm_squared(), z };
    let e = displacement(&run.problem, &sample);
    if !e.is_finite() {
        return Err(divergence(run.step_index, "non-finite displacement"));
    }
    let coef = run.problem.gamma / run.problem.p as f64 * e;
    for i in 0..run.problem.p {
        let g = coef * run.problem.student.dsigma(sample.lambda[i]);
        if g != 0.0 {
            w.w.row_mut(i).zip_apply(&x.transpose(), |a, b| *a += g * b);
        }
    }
    if w.w.iter().any(|v| !v.is_finite()) {
        return Err(divergence(run.step_index, "non-finite weights"));
    }
    run.step_index += 1;
    Ok((run, sample))
}

/// One weight-space SGD step.
pub fn sgd_step(run: SgdRun) -> Result<SgdRun> {
    sgd_step_with_sample(run).map(|(r, _)| r)
}

/// One step of the exact overlap-space process. The fields are
/// `L u` with `Ω = L Lᵀ`, `u ~ N(0, I_r)`, and
/// `‖x‖² = (‖u‖² + χ²_{d−r}) / d`, which is their joint law with the input.
pub fn overlap_step(mut run: SgdRun) -> Result<SgdRun> {
    let SimState::Overlaps(state) = &mut run.state else {
        return Err(Error::InvalidInput("overlap_step needs an overlap-space run".into()));
    };
    let (p, k, d) = (run.problem.p, run.problem.k, run.problem.d);
    let n = p + k;
    let mut fields = vec![0.0; n];
    let u_norm_sq;
    let rank = if dense_cholesky(state, &mut run.work) {
        let l = &run.work;
        let u: Vec<f64> = (0..n).map(|_| run.rng.sample::<f64, _>(StandardNormal)).collect();
        for (a, f) in fields.iter_mut().enumerate() {
            *f = l[a * n..a * n + a + 1].iter().zip(&u).map(|(x, y)| x * y).sum();
        }
        u_norm_sq = u.iter().map(|v| v * v).sum();
        n
    } else {
        let chol = pivoted_cholesky(&state.omega()).map_err(|e| match e {
            Error::NotPsd { min_eig } => divergence(run.step_index, format!("Ω not PSD (pivot {min_eig:.3e})")),
            other => other,
        })?;
        let u = DVector::from_fn(chol.rank, |_, _| run.rng.sample::<f64, _>(StandardNormal));
        fields.copy_from_slice((&chol.factor * &u).as_slice());
        u_norm_sq = u.norm_squared();
        chol.rank
    };
    let rest = if d > rank { ChiSquared::new((d - rank) as f64).expect("positive dof").sample(&mut run.rng) } else { 0.0 };
    let z: f64 = run.rng.sample(StandardNormal);
    let sample = StepSample {
        lambda: DVector::from_column_slice(&fields[..p]),
        lambda_star: DVector::from_column_slice(&fields[p..]),
        x_norm_sq: (u_norm_sq + rest) / d as f64,
        z,
    };
    apply_overlap_update(state, &run.problem, &sample);
    linalg::symmetrize(&mut state.q);
    if state.q.iter().chain(state.m.iter()).any(|v| !v.is_finite()) {
        return Err(divergence(run.step_index, "non-finite overlaps"));
    }
    run.step_index += 1;
    Ok(run)
}

/// Unpivoted in-place Cholesky of Ω into a row-major lower factor.
/// Returns false when Ω is not numerically positive definite, in which case
/// the caller falls back to the pivoted factorization.
fn dense_cholesky(state: &OverlapState, l: &mut Vec<f64>) -> bool {
    let p = state.q.nrows();
    let n = p + state.p.nrows();
    l.clear();
    l.resize(n * n, 0.0);
    let entry = |a: usize, b: usize| match (a < p, b < p) {
        (true, true) => state.q[(a, b)],
        (true, false) => state.m[(a, b - p)],
        (false, true) => state.m[(b, a - p)],
        (false, false) => state.p[(a - p, b - p)],
    };
    let scale = (0..n).map(|a| entry(a, a)).fold(0.0, f64::max);
    for a in 0..n {
        for b in 0..=a {
            let (ra, rb) = (&l[a * n..a * n + b], &l[b * n..b * n + b]);
            let s = entry(a, b) - ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>();
            if a == b {
                if !(s > 1e-12 * scale) {
                    return false;
                }
                l[a * n + a] = s.sqrt();
            } else {
                l[a * n + b] = s / l[b * n + b];
            }
        }
    }
    true
}

/// Dispatches on the run's mode.
pub fn step(run: SgdRun) -> Result<SgdRun> {
    match run.mode() {
        SimMode::Weight => sgd_step(run),
        SimMode::Overlap => overlap_step(run),
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub horizon: f64,
    /// Steps between records; default keeps at most [`DEFAULT_MAX_RECORDS`].
    pub record_every: Option<u64>,
    pub max_steps: u64,
    pub bound: Option<f64>,
    pub snapshots: bool,
    pub strategy: EvalStrategy,
    pub meta: TrajectoryMeta,
}

/// Default spacing so that a run of `steps` steps yields at most
/// [`DEFAULT_MAX_RECORDS`] records after the initial one.
pub fn default_record_every(steps: u64) -> u64 {
    steps.div_ceil(DEFAULT_MAX_RECORDS).max(1)
}

/// Runs the chain to the horizon, recording the population risk of the
/// current overlaps.
pub fn run(mut run: SgdRun, opts: &RunOptions) -> Result<Trajectory> {
    let wanted = run.problem.steps_for(opts.horizon);
    let total = wanted.min(opts.max_steps);
    let every = opts.record_every.unwrap_or_else(|| default_record_every(total)).max(1);
    let mut traj = Trajectory::new(opts.meta.clone(), opts.snapshots);
    if total < wanted {
        traj.meta.truncated = true;
        traj.meta.events.push(format!("step budget {} reached before T = {} ({} steps needed)", opts.max_steps, opts.horizon, wanted));
    }
    let record = |run: &SgdRun, traj: &mut Trajectory| -> Result<bool> {
        let st = run.overlaps()?;
        let r = risk(&st, run.problem.acts(), run.problem.delta, &opts.strategy)?;
        let maxq = st.max_q_diag();
        let t = run.time();
        traj.push(t, r, maxq, || Snapshot::Overlap(st));
        if let Some(bound) = opts.bound {
            if maxq > bound {
                traj.meta.bound_violation = Some(BoundViolation { t, max_q_diag: maxq, bound });
                traj.meta.events.push(format!("max Q_ii = {maxq} exceeded the bound {bound} at t = {t}; run stopped"));
                return Ok(false);
            }
        }
        Ok(true)
    };
    if !record(&run, &mut traj)? {
        return Ok(traj);
    }
    while run.step_index < total {
        run = step(run)?;
        if run.step_index % every == 0 || run.step_index == total {
            if !record(&run, &mut traj)? {
                break;
            }
        }
    }
    Ok(traj)
}

/// Builds the run described by `config` (teacher, initialization, mode) and
/// simulates it to the horizon.
pub fn run_sgd(config: &ExperimentConfig, record_every: Option<u64>) -> Result<Trajectory> {
    config.validate()?;
    let problem = config.problem()?;
    let (w_star, gram) = config.teacher()?;
    let w = config.initial_weights(&w_star)?;
    let mode = config.simulation.mode;
    let sim = match mode {
        SimMode::Weight => SgdRun::weight_space(problem, w, w_star, gram, config.seed)?,
        SimMode::Overlap => {
            let st = overlaps_of(&w, &w_star, &gram)?;
            SgdRun::overlap_space(problem, st, config.seed)?
        }
    };
    let meta = TrajectoryMeta {
        tag: config.tag.clone(),
        regime: match mode {
            SimMode::Weight => "simulate-weight".into(),
            SimMode::Overlap => "simulate-overlap".into(),
        },
        seed: config.seed,
        config: Some(serde_json::to_value(config)?),
        provenance: provenance(),
        ..Default::default()
    };
    let opts = RunOptions {
        horizon: config.horizon,
        record_every: record_every.or(config.simulation.record_every),
        max_steps: config.simulation.max_steps,
        bound: config.simulation.bound,
        snapshots: config.output.snapshots,
        strategy: config.eval_strategy()?,
        meta,
    };
    run(sim, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RegimeTag;
    use crate::expect::{psi_gf, psi_m, psi_var};
    use crate::linalg::max_abs_diff;
    use crate::overlap::{init_student, make_teacher, random_state, TeacherMode, TeacherSpec};

    fn problem(p: usize, k: usize, d: usize, gamma: f64, delta: f64, act: Activation) -> Problem {
        Problem { p, k, d, gamma, delta, student: act.clone(), teacher: act }
    }

    fn weight_run(pr: Problem, seed: u64) -> SgdRun {
        let spec = TeacherSpec { k: pr.k, d: pr.d, mode: TeacherMode::OrthonormalRows, scale: 1.0 };
        let (w_star, gram) = make_teacher(&spec, seed).unwrap();
        let w = init_student(pr.p, pr.d, 1.0, seed).unwrap();
        SgdRun::weight_space(pr, w, w_star, gram, seed).unwrap()
    }

    #[test]
    fn dense_factor_reproduces_omega_and_rejects_singular() {
        let st = random_state(5, 2, 40, 0.9, 8).unwrap();
        let mut l = Vec::new();
        assert!(dense_cholesky(&st, &mut l));
        let n = 7;
        let lm = DMatrix::from_row_slice(n, n, &l);
        assert!(max_abs_diff(&(&lm * lm.transpose()), &st.omega()) < 1e-12);
        let singular = random_state(5, 2, 4, 0.9, 8).unwrap();
        assert!(!dense_cholesky(&singular, &mut l));
    }

    #[test]
    fn zero_step_size_leaves_weights() {
        let r0 = weight_run(problem(2, 1, 8, 0.0, 0.1, Activation::erf()), 1);
        let w0 = r0.overlaps().unwrap();
        let r1 = (0..10).try_fold(r0, |r, _| sgd_step(r)).unwrap();
        assert_eq!(r1.overlaps().unwrap(), w0);
        assert_eq!(r1.step_index, 10);
        let st = random_state(2, 1, 8, 1.0, 3).unwrap();
        let o0 = SgdRun::overlap_space(problem(2, 1, 8, 0.0, 0.1, Activation::erf()), st.clone(), 2).unwrap();
        let o1 = (0..10).try_fold(o0, |r, _| overlap_step(r)).unwrap();
        assert_eq!(o1.overlaps().unwrap(), st);
    }

    #[test]
    fn perfect_student_does_not_move() {
        let pr = problem(1, 1, 6, 0.5, 0.0, Activation::square());
        let spec = TeacherSpec { k: 1, d: 6, mode: TeacherMode::OrthonormalRows, scale: 1.0 };
        let (w_star, gram) = make_teacher(&spec, 4).unwrap();
        let run0 = SgdRun::weight_space(pr.clone(), WeightState { w: w_star.clone() }, w_star.clone(), gram.clone(), 1).unwrap();
        let run1 = (0..20).try_fold(run0, |r, _| sgd_step(r)).unwrap();
        let SimState::Weights { w, .. } = &run1.state else { unreachable!() };
        assert_eq!(w.w, w_star);
        let st = OverlapState::perfect_learning(&gram);
        // The sampled fields agree only up to rounding in the factorization.
        let o = (0..20).try_fold(SgdRun::overlap_space(pr, st.clone(), 1).unwrap(), |r, _| overlap_step(r)).unwrap();
        let now = o.overlaps().unwrap();
        assert!(max_abs_diff(&now.q, &st.q) < 1e-14 && max_abs_diff(&now.m, &st.m) < 1e-14);
    }

    #[test]
    fn single_step_matches_overlap_update() {
        let pr = problem(2, 1, 8, 0.7, 0.2, Activation::erf());
        let r0 = weight_run(pr.clone(), 9);
        let mut st = r0.overlaps().unwrap();
        let (r1, sample) = sgd_step_with_sample(r0).unwrap();
        apply_overlap_update(&mut st, &pr, &sample);
        let direct = r1.overlaps().unwrap();
        assert!(max_abs_diff(&direct.q, &st.q) < 1e-12);
        assert!(max_abs_diff(&direct.m, &st.m) < 1e-12);
    }

    #[test]
    fn mode_equivalence_over_many_steps() {
        let pr = problem(3, 2, 10, 0.5, 0.05, Activation::erf());
        let mut r = weight_run(pr.clone(), 17);
        let mut st = r.overlaps().unwrap();
        for _ in 0..1000 {
            let (next, sample) = sgd_step_with_sample(r).unwrap();
            apply_overlap_update(&mut st, &pr, &sample);
            r = next;
        }
        let direct = r.overlaps().unwrap();
        assert!(max_abs_diff(&direct.q, &st.q) < 1e-10, "{}", max_abs_diff(&direct.q, &st.q));
        assert!(max_abs_diff(&direct.m, &st.m) < 1e-10);
    }

    #[test]
    fn one_step_increment_matches_drift() {
        // E[ΔM]/δt = Ψ^M and E[ΔQ]/δt = Ψ^GF + (γ/p) Ψ^Var at fixed Ω.
        let pr = problem(2, 1, 50, 0.5, 0.1, Activation::erf());
        let st = random_state(2, 1, 6, 1.0, 3).unwrap();
        let dt = pr.time_step();
        let n = 200_000;
        let mut run = SgdRun::overlap_space(pr.clone(), st.clone(), 8).unwrap();
        let (mut sm, mut smm) = (DMatrix::zeros(2, 1), DMatrix::zeros(2, 1));
        let (mut sq, mut sqq) = (DMatrix::zeros(2, 2), DMatrix::zeros(2, 2));
        for _ in 0..n {
            run.state = SimState::Overlaps(st.clone());
            run = overlap_step(run).unwrap();
            let now = run.overlaps().unwrap();
            let dm = (&now.m - &st.m) / dt;
            let dq = (&now.q - &st.q) / dt;
            smm += dm.component_mul(&dm);
            sm += dm;
            sqq += dq.component_mul(&dq);
            sq += dq;
        }
        let nf = n as f64;
        let acts = pr.acts();
        let cf = EvalStrategy::ClosedForm;
        let want_m = psi_m(&st, acts, &cf).unwrap();
        let want_q = psi_gf(&st, acts, &cf).unwrap() + psi_var(&st, acts, pr.delta, &cf).unwrap() * (pr.gamma / pr.p as f64);
        for (s, ss, want) in [(&sm, &smm, &want_m), (&sq, &sqq, &want_q)] {
            for i in 0..s.len() {
                let mean = s[i] / nf;
                let se = ((ss[i] / nf - mean * mean) / nf).sqrt();
                assert!((mean - want[i]).abs() < 4.0 * se, "{mean} vs {} (se {se})", want[i]);
            }
        }
    }

    #[test]
    fn zero_horizon_single_record_and_budget() {
        let mut c = ExperimentConfig::new(20, 3, 2, 0.1, RegimeTag::Simulate, 0.0);
        c.seed = 4;
        let t = run_sgd(&c, None).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.times, vec![0.0]);
        c.horizon = 1.0;
        c.simulation.max_steps = 50;
        let t = run_sgd(&c, Some(10)).unwrap();
        assert!(t.meta.truncated);
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn run_is_reproducible_and_learns() {
        let mut c = ExperimentConfig::new(100, 10, 2, 0.05, RegimeTag::Simulate, 5.0);
        c.seed = 1;
        let a = run_sgd(&c, None).unwrap();
        let b = run_sgd(&c, None).unwrap();
        assert_eq!(a.risks, b.risks);
        assert!(a.final_risk().unwrap() < a.risks[0]);
        assert!(a.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bound_violation_stops_run() {
        let mut c = ExperimentConfig::new(30, 2, 1, 0.1, RegimeTag::Simulate, 1.0);
        c.init.sigma0 = 2.0;
        c.simulation.bound = Some(1.0);
        let t = run_sgd(&c, Some(5)).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t.meta.bound_violation.is_some());
    }
}
