//! Overlap (sufficient-statistics) data model.
//!
//! For student weights `W` (p×d) and teacher weights `W★` (k×d) the pre-activations
//! on Gaussian input `x ~ N(0, I_d/d)` are jointly Gaussian with covariance
//! `Ω = [[Q, M], [Mᵀ, P]]` where `Q = WWᵀ/d`, `M = WW★ᵀ/d`, `P = W★W★ᵀ/d`.
//! Everything downstream is a function of `Ω` alone.
//!
//! The mean-field reduction keeps `M` and the diagonal `q` of
//! `Q⊥ = Q − M P⁻¹ Mᵀ`, the overlap of the student components orthogonal to the
//! teacher span.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOLERANCE};
use crate::quadrature::{sphere_coordinate_rule, GaussRule};
use crate::rng::{self, Rng};

/// Maximum number of teacher draws before a rank-deficient draw is an error.
pub const TEACHER_MAX_ATTEMPTS: usize = 100;

/// Symmetry slack accepted from callers before `Q` is re-symmetrized.
const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    OrthonormalRows,
    GaussianRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub k: usize,
    pub d: usize,
    pub mode: TeacherMode,
    pub scale: f64,
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 {
            return Err(Error::InvalidInput("teacher needs k >= 1 and d >= 1".into()));
        }
        if self.k > self.d {
            return Err(Error::InvalidInput(format!("teacher needs k <= d (k = {}, d = {})", self.k, self.d)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidInput(format!("teacher scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Draws the teacher weights `W★` (k×d) and returns them with `P = W★W★ᵀ/d`.
///
/// Orthonormal rows are scaled so that `W★W★ᵀ = s² d I_k`; Gaussian rows have
/// i.i.d. `N(0, s²)` entries. Draws whose Gram matrix is numerically singular
/// are discarded and redrawn.
pub fn make_teacher(spec: &TeacherSpec, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    spec.validate()?;
    let (k, d, s) = (spec.k, spec.d, spec.scale);
    let mut rng = rng::stream(seed, rng::STREAM_TEACHER);
    for _ in 0..TEACHER_MAX_ATTEMPTS {
        let g = gaussian_matrix(k, d, &mut rng);
        let w_star = match spec.mode {
            TeacherMode::GaussianRows => g * s,
            TeacherMode::OrthonormalRows => {
                let qr = g.transpose().qr();
                let r = qr.r();
                if (0..k).any(|i| r[(i, i)].abs() < 1e-8 * (d as f64).sqrt()) {
                    continue;
                }
                qr.q().transpose() * (s * (d as f64).sqrt())
            }
        };
        let mut gram = &w_star * w_star.transpose() / d as f64;
        linalg::symmetrize(&mut gram);
        if linalg::min_eigenvalue(&gram) > 1e-10 * s * s {
            return Ok((w_star, gram));
        }
    }
    Err(Error::RankDeficientTeacher { attempts: TEACHER_MAX_ATTEMPTS })
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Student first-layer weights, one row per hidden unit.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub w: DMatrix<f64>,
}

impl WeightState {
    pub fn p(&self) -> usize {
        self.w.nrows()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }
}

/// Gaussian initialization with i.i.d. `N(0, σ0²)` entries, so `E[Q_ii] = σ0²`
/// under the `1/d` overlap normalization and `M_ir = O(σ0/√d)`.
pub fn init_student(p: usize, d: usize, sigma0: f64, seed: u64) -> Result<WeightState> {
    if p == 0 || d == 0 {
        return Err(Error::InvalidInput("student needs p >= 1 and d >= 1".into()));
    }
    if !(sigma0 >= 0.0 && sigma0.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma0 must be nonnegative, got {sigma0}")));
    }
    let mut rng = rng::stream(seed, rng::STREAM_STUDENT);
    Ok(WeightState { w: gaussian_matrix(p, d, &mut rng) * sigma0 })
}

/// The sufficient statistics `(Q, M, P)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapState {
    #[serde(with = "linalg::serde_matrix")]
    pub q: DMatrix<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub m: DMatrix<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub p: DMatrix<f64>,
}

impl OverlapState {
    /// Validated constructor: shapes, symmetry of `Q` and `P`, and PSD `Ω`.
    pub fn new(q: DMatrix<f64>, m: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        let mut s = Self::new_unchecked(q, m, p)?;
        s.check_symmetric()?;
        linalg::symmetrize(&mut s.q);
        linalg::symmetrize(&mut s.p);
        s.check_psd()?;
        Ok(s)
    }

    /// Shape-checked constructor without the PSD test. Used for intermediate
    /// values such as RK stages and Ξ-sampled overlaps whose pairwise marginals
    /// are valid while the full matrix need not be.
    pub fn new_unchecked(q: DMatrix<f64>, m: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        let (ns, nt) = (q.nrows(), p.nrows());
        if q.ncols() != ns || p.ncols() != nt || m.nrows() != ns || m.ncols() != nt {
            return Err(Error::Shape(format!(
                "Q {}x{}, M {}x{}, P {}x{}",
                q.nrows(),
                q.ncols(),
                m.nrows(),
                m.ncols(),
                p.nrows(),
                p.ncols()
            )));
        }
        Ok(Self { q, m, p })
    }

    /// `p = k`, `Q = M = P`: the student reproduces the teacher.
    pub fn perfect_learning(p: &DMatrix<f64>) -> Self {
        Self { q: p.clone(), m: p.clone(), p: p.clone() }
    }

    pub fn students(&self) -> usize {
        self.q.nrows()
    }

    pub fn teachers(&self) -> usize {
        self.p.nrows()
    }

    pub fn omega(&self) -> DMatrix<f64> {
        linalg::block_omega(&self.q, &self.m, &self.p)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.omega())
    }

    pub fn max_q_diag(&self) -> f64 {
        self.q.diagonal().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn check_symmetric(&self) -> Result<()> {
        let asym = linalg::max_abs_diff(&self.q, &self.q.transpose()).max(linalg::max_abs_diff(&self.p, &self.p.transpose()));
        if asym > SYMMETRY_TOLERANCE * (1.0 + self.q.amax()) {
            return Err(Error::InvalidInput(format!("Q or P is not symmetric (max asymmetry {asym:.3e})")));
        }
        Ok(())
    }

    fn check_psd(&self) -> Result<()> {
        let min_eig = self.min_eigenvalue();
        if min_eig < -PSD_TOLERANCE {
            return Err(Error::NotPsd { min_eig });
        }
        Ok(())
    }

    /// Full invariant check, including the optional `diag(Q) ≤ K` bound.
    pub fn validate(&self, bound: Option<f64>) -> Result<()> {
        self.check_symmetric()?;
        self.check_psd()?;
        if let Some(k) = bound {
            let worst = self.max_q_diag();
            if worst > k {
                return Err(Error::InvalidInput(format!("max Q_ii = {worst} exceeds the bound K = {k}")));
            }
        }
        Ok(())
    }

    /// Cosine similarities `M_jr / √(Q_jj P_rr)`; zero for a null student.
    pub fn cosines(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.students(), self.teachers(), |j, r| {
            let norm = (self.q[(j, j)] * self.p[(r, r)]).sqrt();
            if norm > 0.0 {
                self.m[(j, r)] / norm
            } else {
                0.0
            }
        })
    }

    /// Applies a simultaneous permutation of student indices.
    pub fn permute_students(&self, perm: &[usize]) -> Self {
        let n = self.students();
        assert_eq!(perm.len(), n);
        Self {
            q: DMatrix::from_fn(n, n, |i, j| self.q[(perm[i], perm[j])]),
            m: DMatrix::from_fn(n, self.teachers(), |i, r| self.m[(perm[i], r)]),
            p: self.p.clone(),
        }
    }
}

/// `Q = WWᵀ/d`, `M = WW★ᵀ/d`, paired with the given teacher Gram `P`.
pub fn overlaps_of(w: &WeightState, w_star: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<OverlapState> {
    let d = w.d();
    if w_star.ncols() != d || p.nrows() != w_star.nrows() {
        return Err(Error::Shape(format!("W is {}x{}, W★ is {}x{}", w.p(), d, w_star.nrows(), w_star.ncols())));
    }
    let inv_d = 1.0 / d as f64;
    let mut q = &w.w * w.w.transpose() * inv_d;
    linalg::symmetrize(&mut q);
    let m = &w.w * w_star.transpose() * inv_d;
    OverlapState::new_unchecked(q, m, p.clone())
}

/// `M P⁻¹ Mᵀ`, the student overlap carried by the teacher span.
pub fn projected_overlap(m: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p_inv = linalg::spd_inverse(p)?;
    let mut a = m * p_inv * m.transpose();
    linalg::symmetrize(&mut a);
    Ok(a)
}

/// `Q⊥ = Q − M P⁻¹ Mᵀ`.
pub fn q_perp(state: &OverlapState) -> Result<DMatrix<f64>> {
    let mut out = &state.q - projected_overlap(&state.m, &state.p)?;
    linalg::symmetrize(&mut out);
    Ok(out)
}

/// Mean-field reduced parameters `(M, q)` with `q = diag(Q⊥)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedMFState {
    #[serde(with = "linalg::serde_matrix")]
    pub m: DMatrix<f64>,
    #[serde(with = "linalg::serde_vector")]
    pub q: DVector<f64>,
}

impl ReducedMFState {
    pub fn new(m: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        if m.nrows() != q.len() {
            return Err(Error::Shape(format!("M has {} rows but q has {} entries", m.nrows(), q.len())));
        }
        if let Some(bad) = q.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidInput(format!("q must be nonnegative, found {bad}")));
        }
        Ok(Self { m, q })
    }

    pub fn students(&self) -> usize {
        self.q.len()
    }

    /// Clips rounding-level negatives (above `-PSD_TOLERANCE`) to zero; returns
    /// how many entries were clipped, or an error for a genuine violation.
    pub fn clip_q(&mut self) -> Result<usize> {
        let mut clipped = 0;
        for v in self.q.iter_mut() {
            if *v < -PSD_TOLERANCE || v.is_nan() {
                return Err(Error::NotPsd { min_eig: *v });
            }
            if *v < 0.0 {
                *v = 0.0;
                clipped += 1;
            }
        }
        Ok(clipped)
    }
}

pub fn reduce_to_mf(state: &OverlapState) -> Result<ReducedMFState> {
    let perp = q_perp(state)?;
    let mut reduced = ReducedMFState { m: state.m.clone(), q: perp.diagonal() };
    let clipped = reduced.clip_q()?;
    if clipped > 0 {
        log::warn!("reduce_to_mf: clipped {clipped} rounding-level negative q entries to zero");
    }
    Ok(reduced)
}

/// `Ω̄` with `Q̄ = M P⁻¹ Mᵀ + diag(q)`.
pub fn bar_omega(mf: &ReducedMFState, p: &DMatrix<f64>) -> Result<OverlapState> {
    if mf.m.ncols() != p.nrows() {
        return Err(Error::Shape(format!("M has {} columns, P is {}x{}", mf.m.ncols(), p.nrows(), p.ncols())));
    }
    if let Some(bad) = mf.q.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidInput(format!("q must be nonnegative, found {bad}")));
    }
    let mut q = projected_overlap(&mf.m, p)?;
    for i in 0..mf.students() {
        q[(i, i)] += mf.q[i];
    }
    OverlapState::new_unchecked(q, mf.m.clone(), p.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum XiStrategy {
    Quadrature { order: usize },
    MonteCarlo { n_samples: usize, seed: u64 },
}

impl Default for XiStrategy {
    fn default() -> Self {
        XiStrategy::Quadrature { order: 64 }
    }
}

/// Law of the off-diagonal entries of Ξ: the inner product of two independent
/// uniform unit vectors in the `d − k` dimensional orthogonal complement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XiModel {
    pub d: usize,
    pub k: usize,
    pub strategy: XiStrategy,
}

impl XiModel {
    pub fn new(d: usize, k: usize, strategy: XiStrategy) -> Result<Self> {
        if d <= k {
            return Err(Error::NullOrthogonalSpace { d, k });
        }
        Ok(Self { d, k, strategy })
    }

    pub fn n_orth(&self) -> usize {
        self.d.saturating_sub(self.k)
    }

    fn ensure_nonnull(&self) -> Result<usize> {
        match self.n_orth() {
            0 => Err(Error::NullOrthogonalSpace { d: self.d, k: self.k }),
            n => Ok(n),
        }
    }

    /// One draw of ξ as `z₁/‖z‖` with `z ~ N(0, I_{d−k})`; the squared norm of
    /// the remaining coordinates is drawn as a single χ² variate.
    pub fn sample(&self, rng: &mut Rng) -> Result<f64> {
        let n = self.ensure_nonnull()?;
        let z1: f64 = rng.sample(StandardNormal);
        let rest = if n > 1 { ChiSquared::new((n - 1) as f64).expect("dof > 0").sample(rng) } else { 0.0 };
        let norm = (z1 * z1 + rest).sqrt();
        Ok(if norm > 0.0 { z1 / norm } else { 0.0 })
    }

    /// Node set used to average a function of a single ξ. Quadrature nodes
    /// follow the exact density; the Monte Carlo variant freezes one
    /// equally-weighted sample.
    pub fn rule(&self) -> Result<Arc<GaussRule>> {
        let n = self.ensure_nonnull()?;
        match self.strategy {
            XiStrategy::Quadrature { order } => Ok(sphere_coordinate_rule(n, order.max(1))),
            XiStrategy::MonteCarlo { n_samples, seed } => {
                let mut rng = rng::stream(seed, rng::STREAM_XI);
                let nodes = (0..n_samples).map(|_| self.sample(&mut rng)).collect::<Result<Vec<_>>>()?;
                Ok(Arc::new(GaussRule { weights: vec![1.0 / n_samples as f64; n_samples], nodes }))
            }
        }
    }
}

/// One draw of `Ω̃` with `Q̃ = M P⁻¹ Mᵀ + D_√q Ξ D_√q`, Ξ symmetric with unit
/// diagonal and independent sphere-law entries above the diagonal.
///
/// The result is generally not PSD as a whole; only its 2×2 and 3×3 student
/// marginals are meaningful.
pub fn sample_tilde_omega(mf: &ReducedMFState, p: &DMatrix<f64>, xi: &XiModel, rng: &mut Rng) -> Result<OverlapState> {
    xi.ensure_nonnull()?;
    let mut st = bar_omega(mf, p)?;
    let n = mf.students();
    for i in 0..n {
        for j in (i + 1)..n {
            let amp = (mf.q[i] * mf.q[j]).sqrt();
            if amp == 0.0 {
                continue;
            }
            let v = amp * xi.sample(rng)?;
            st.q[(i, j)] += v;
            st.q[(j, i)] += v;
        }
    }
    Ok(st)
}

/// Builds student weights in `R^d` whose overlaps with `w_star` equal `state`.
///
/// The teacher-span component is `M P⁻¹ W★`; the orthogonal component is a
/// factor of `d·Q⊥` laid on a random orthonormal frame of the complement.
pub fn weights_with_overlaps(state: &OverlapState, w_star: &DMatrix<f64>, seed: u64) -> Result<WeightState> {
    let (p, k, d) = (state.students(), state.teachers(), w_star.ncols());
    if w_star.nrows() != k {
        return Err(Error::Shape(format!("W★ has {} rows, state has k = {k}", w_star.nrows())));
    }
    let p_inv = linalg::spd_inverse(&state.p)?;
    let parallel = &state.m * &p_inv * w_star;
    let perp = q_perp(state)?;
    let chol = linalg::pivoted_cholesky(&perp)?;
    let r = chol.rank;
    if r > d - k {
        return Err(Error::InvalidInput(format!("Q_perp has rank {r} but the orthogonal complement has dimension {}", d - k)));
    }
    let mut w = parallel;
    if r > 0 {
        let mut rng = rng::stream(seed, rng::STREAM_EMBED);
        // Random vectors projected off the teacher span, then orthonormalized.
        let g = gaussian_matrix(d, r, &mut rng);
        let star_q = w_star.transpose().qr().q();
        let g_perp = &g - &star_q * (star_q.transpose() * &g);
        let frame = g_perp.qr().q();
        w += (&chol.factor * (d as f64).sqrt()) * frame.transpose();
    }
    debug_assert_eq!(w.nrows(), p);
    Ok(WeightState { w })
}

/// Overlaps of a Gaussian student against a Gaussian teacher in dimension `d`.
/// A convenient generic valid state; `d ≥ p + k` makes `Ω` nonsingular almost
/// surely.
pub fn random_state(p: usize, k: usize, d: usize, sigma0: f64, seed: u64) -> Result<OverlapState> {
    let spec = TeacherSpec { k, d, mode: TeacherMode::GaussianRows, scale: 1.0 };
    let (w_star, gram) = make_teacher(&spec, seed)?;
    let w = init_student(p, d, sigma0, seed)?;
    overlaps_of(&w, &w_star, &gram)
}
