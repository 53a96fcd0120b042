//! Low-order Gaussian correlation functions.
//!
//! Every drift and the risk expand into expectations of at most four factors
//! over a zero-mean Gaussian with a small marginal covariance. Those are the
//! only integrals this crate ever evaluates.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::closed;
use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg::pivoted_cholesky_small;
use crate::quadrature::gauss_hermite;
use crate::rng;

/// Which network an activation slot belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

/// A factor of the integrand applied to one Gaussian coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// The coordinate itself.
    Linear,
    /// `σ` of the student or `σ★` of the teacher.
    Sigma(Role),
    /// Student derivative `σ'`.
    DSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationKind {
    /// `E[σ(a) σ(b)]`
    SigmaSigma,
    /// `E[σ'(a) · b · σ(c)]`
    DSigmaLinearSigma,
    /// `E[σ'(a) σ'(b)]`
    DSigmaDSigma,
    /// `E[σ'(a) σ'(b) σ(c) σ(e)]`
    DSigmaDSigmaSigmaSigma,
}

impl CorrelationKind {
    pub fn arity(self) -> usize {
        match self {
            Self::SigmaSigma | Self::DSigmaDSigma => 2,
            Self::DSigmaLinearSigma => 3,
            Self::DSigmaDSigmaSigmaSigma => 4,
        }
    }
}

/// A correlation function together with the marginal covariance of its
/// arguments (upper-left `arity × arity` block of `cov`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationQuery {
    pub kind: CorrelationKind,
    pub slots: [Slot; 4],
    pub cov: [[f64; 4]; 4],
}

impl CorrelationQuery {
    pub fn sigma_sigma(roles: (Role, Role), cov: [[f64; 2]; 2]) -> Self {
        Self {
            kind: CorrelationKind::SigmaSigma,
            slots: [Slot::Sigma(roles.0), Slot::Sigma(roles.1), Slot::Linear, Slot::Linear],
            cov: embed(&cov),
        }
    }

    pub fn dsigma_linear_sigma(role_c: Role, cov: [[f64; 3]; 3]) -> Self {
        Self {
            kind: CorrelationKind::DSigmaLinearSigma,
            slots: [Slot::DSigma, Slot::Linear, Slot::Sigma(role_c), Slot::Linear],
            cov: embed(&cov),
        }
    }

    pub fn dsigma_dsigma(cov: [[f64; 2]; 2]) -> Self {
        Self {
            kind: CorrelationKind::DSigmaDSigma,
            slots: [Slot::DSigma, Slot::DSigma, Slot::Linear, Slot::Linear],
            cov: embed(&cov),
        }
    }

    pub fn dsigma_dsigma_sigma_sigma(roles: (Role, Role), cov: [[f64; 4]; 4]) -> Self {
        Self {
            kind: CorrelationKind::DSigmaDSigmaSigmaSigma,
            slots: [Slot::DSigma, Slot::DSigma, Slot::Sigma(roles.0), Slot::Sigma(roles.1)],
            cov,
        }
    }

    pub fn arity(&self) -> usize {
        self.kind.arity()
    }

    pub fn active_slots(&self) -> &[Slot] {
        &self.slots[..self.arity()]
    }

    fn validate(&self) -> Result<()> {
        let n = self.arity();
        for i in 0..n {
            if !self.cov[i][i].is_finite() || self.cov[i][i] < -crate::linalg::PSD_TOLERANCE {
                return Err(Error::InvalidInput(format!("correlation covariance has variance {} at {i}", self.cov[i][i])));
            }
            for j in 0..i {
                if (self.cov[i][j] - self.cov[j][i]).abs() > 1e-12 * (1.0 + self.cov[i][j].abs()) {
                    return Err(Error::InvalidInput("correlation covariance is not symmetric".into()));
                }
            }
        }
        Ok(())
    }
}

fn embed<const N: usize>(c: &[[f64; N]; N]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..N {
        out[i][..N].copy_from_slice(&c[i]);
    }
    out
}

/// Student and teacher activations of one problem.
#[derive(Debug, Clone, Copy)]
pub struct ActivationPair<'a> {
    pub student: &'a Activation,
    pub teacher: &'a Activation,
}

impl<'a> ActivationPair<'a> {
    pub fn new(student: &'a Activation, teacher: &'a Activation) -> Self {
        Self { student, teacher }
    }

    pub fn role(&self, role: Role) -> &'a Activation {
        match role {
            Role::Student => self.student,
            Role::Teacher => self.teacher,
        }
    }

    pub fn both_pure_square(&self) -> bool {
        self.student.is_pure_square() && self.teacher.is_pure_square()
    }

    pub fn both_erf(&self) -> bool {
        self.student.is_erf() && self.teacher.is_erf()
    }

    pub fn has_closed_form(&self) -> bool {
        self.both_pure_square() || self.both_erf()
    }

    #[inline]
    fn apply(&self, slot: Slot, x: f64) -> f64 {
        match slot {
            Slot::Linear => x,
            Slot::Sigma(role) => self.role(role).sigma(x),
            Slot::DSigma => self.student.dsigma(x),
        }
    }
}

pub const DEFAULT_QUADRATURE_ORDER: usize = 40;
pub const DEFAULT_QUADRATURE_ORDER_4PT: usize = 32;
pub const MIN_QUADRATURE_ORDER: usize = 8;
pub const MIN_MC_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EvalStrategy {
    /// Isserlis moments for the unclipped square; arcsine integrals for erf.
    ClosedForm,
    /// Tensorized Gauss–Hermite; `order` per dimension for ≤3-point kinds and
    /// `order_4pt` for the four-point kind.
    Quadrature { order: usize, order_4pt: usize },
    MonteCarlo { n: usize, seed: u64 },
}

impl EvalStrategy {
    pub fn quadrature() -> Self {
        Self::Quadrature { order: DEFAULT_QUADRATURE_ORDER, order_4pt: DEFAULT_QUADRATURE_ORDER_4PT }
    }

    /// Closed form when both activations admit one, default quadrature otherwise.
    pub fn auto(acts: ActivationPair<'_>) -> Self {
        if acts.has_closed_form() {
            Self::ClosedForm
        } else {
            Self::quadrature()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::ClosedForm => Ok(()),
            Self::Quadrature { order, order_4pt } if order < MIN_QUADRATURE_ORDER || order_4pt < MIN_QUADRATURE_ORDER => {
                Err(Error::InvalidInput(format!("quadrature order must be >= {MIN_QUADRATURE_ORDER}")))
            }
            Self::MonteCarlo { n, .. } if n < MIN_MC_SAMPLES => {
                Err(Error::InvalidInput(format!("Monte Carlo needs n >= {MIN_MC_SAMPLES}, got {n}")))
            }
            _ => Ok(()),
        }
    }

    /// Independent child stream for the `index`-th evaluation inside an
    /// assembly; deterministic strategies are returned unchanged.
    pub fn child(&self, index: u64) -> Self {
        match *self {
            Self::MonteCarlo { n, seed } => Self::MonteCarlo { n, seed: rng::mix(seed, index) },
            other => other,
        }
    }
}

/// Evaluates `E[∏ f_α(x_α)]` for `x ~ N(0, cov)`.
pub fn correlation(q: &CorrelationQuery, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<f64> {
    q.validate()?;
    match *strat {
        EvalStrategy::ClosedForm => closed::evaluate(q, acts),
        EvalStrategy::Quadrature { order, order_4pt } => {
            let n = if q.arity() == 4 { order_4pt } else { order };
            quadrature(q, acts, n)
        }
        EvalStrategy::MonteCarlo { n, seed } => monte_carlo(q, acts, n, seed).map(|(mean, _)| mean),
    }
}

/// Tensor Gauss–Hermite over the rank of the pivoted factor of `cov`.
/// Coordinates with zero variance are the constant zero.
pub fn quadrature(q: &CorrelationQuery, acts: ActivationPair<'_>, order: usize) -> Result<f64> {
    let n = q.arity();
    let (l, rank) = pivoted_cholesky_small(&q.cov, n)?;
    let rule = gauss_hermite(order);
    let slots = q.active_slots();
    if rank == 0 {
        return Ok(slots.iter().map(|&s| acts.apply(s, 0.0)).product());
    }
    let m = rule.len();
    let mut idx = [0usize; 4];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        let mut u = [0.0; 4];
        for c in 0..rank {
            w *= rule.weights[idx[c]];
            u[c] = rule.nodes[idx[c]];
        }
        let mut f = w;
        for (a, &slot) in slots.iter().enumerate() {
            let x: f64 = (0..rank).map(|c| l[a][c] * u[c]).sum();
            f *= acts.apply(slot, x);
        }
        total += f;
        // odometer increment over `rank` digits
        let mut c = 0;
        loop {
            idx[c] += 1;
            if idx[c] < m {
                break;
            }
            idx[c] = 0;
            c += 1;
            if c == rank {
                return Ok(total);
            }
        }
    }
}

/// Plain Monte Carlo with seeded standard normals pushed through the pivoted
/// factor. Returns the sample mean and its standard error.
pub fn monte_carlo(q: &CorrelationQuery, acts: ActivationPair<'_>, n: usize, seed: u64) -> Result<(f64, f64)> {
    let arity = q.arity();
    let (l, rank) = pivoted_cholesky_small(&q.cov, arity)?;
    let slots = q.active_slots();
    let mut rng = rng::stream(seed, 0);
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for _ in 0..n {
        let mut u = [0.0; 4];
        for v in u.iter_mut().take(rank) {
            *v = rng.sample(StandardNormal);
        }
        let mut f = 1.0;
        for (a, &slot) in slots.iter().enumerate() {
            let x: f64 = (0..rank).map(|c| l[a][c] * u[c]).sum();
            f *= acts.apply(slot, x);
        }
        sum += f;
        sumsq += f * f;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sumsq / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
    Ok((mean, (var / nf).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq() -> Activation {
        Activation::square()
    }

    #[test]
    fn square_sigma_sigma_example() {
        let a = sq();
        let acts = ActivationPair::new(&a, &a);
        let q = CorrelationQuery::sigma_sigma((Role::Student, Role::Student), [[1.0, 0.5], [0.5, 1.0]]);
        let closed = correlation(&q, acts, &EvalStrategy::ClosedForm).unwrap();
        assert!((closed - 1.5).abs() < 1e-15);
        let quad = correlation(&q, acts, &EvalStrategy::quadrature()).unwrap();
        assert!((quad - 1.5).abs() < 1e-11);
        let (mc, se) = monte_carlo(&q, acts, 200_000, 3).unwrap();
        assert!((mc - 1.5).abs() < 3.0 * se, "{mc} ± {se}");
    }

    #[test]
    fn zero_covariance_is_point_mass() {
        let e = Activation::erf();
        let s = Activation::custom("shifted", |x| x + 2.0, |_| 1.0);
        for act in [&e, &s] {
            let acts = ActivationPair::new(act, act);
            let q = CorrelationQuery::sigma_sigma((Role::Student, Role::Student), [[0.0; 2]; 2]);
            let v = correlation(&q, acts, &EvalStrategy::quadrature()).unwrap();
            assert!((v - act.sigma(0.0).powi(2)).abs() < 1e-15);
        }
    }

    #[test]
    fn independent_linear_factor_vanishes() {
        let e = Activation::erf();
        let acts = ActivationPair::new(&e, &e);
        let mut id = [[0.0; 3]; 3];
        for (i, row) in id.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let q = CorrelationQuery::dsigma_linear_sigma(Role::Teacher, id);
        for s in [EvalStrategy::ClosedForm, EvalStrategy::quadrature()] {
            assert!(correlation(&q, acts, &s).unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn closed_form_unsupported_for_custom() {
        let c = Activation::custom("tanh", f64::tanh, |x| 1.0 - x.tanh().powi(2));
        let acts = ActivationPair::new(&c, &c);
        let q = CorrelationQuery::dsigma_dsigma([[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(correlation(&q, acts, &EvalStrategy::ClosedForm), Err(Error::Unsupported(_))));
        let clipped = Activation::square_clipped(10.0);
        let acts = ActivationPair::new(&clipped, &clipped);
        assert!(matches!(correlation(&q, acts, &EvalStrategy::ClosedForm), Err(Error::Unsupported(_))));
    }

    #[test]
    fn strategy_validation() {
        assert!(EvalStrategy::Quadrature { order: 4, order_4pt: 16 }.validate().is_err());
        assert!(EvalStrategy::MonteCarlo { n: 10, seed: 0 }.validate().is_err());
        assert!(EvalStrategy::quadrature().validate().is_ok());
        let c = EvalStrategy::MonteCarlo { n: 1000, seed: 1 };
        assert_ne!(c.child(0), c.child(1));
    }

    #[test]
    fn erf_closed_forms_match_quadrature() {
        let e = Activation::erf();
        let acts = ActivationPair::new(&e, &e);
        let cov4 = [[1.2, 0.3, 0.5, -0.2], [0.3, 0.8, 0.1, 0.4], [0.5, 0.1, 1.0, 0.2], [-0.2, 0.4, 0.2, 0.9]];
        let c3 = [[cov4[0][0], cov4[0][1], cov4[0][2]], [cov4[1][0], cov4[1][1], cov4[1][2]], [cov4[2][0], cov4[2][1], cov4[2][2]]];
        let c2 = [[cov4[0][0], cov4[0][1]], [cov4[1][0], cov4[1][1]]];
        let queries = [
            CorrelationQuery::sigma_sigma((Role::Student, Role::Teacher), c2),
            CorrelationQuery::dsigma_dsigma(c2),
            CorrelationQuery::dsigma_linear_sigma(Role::Student, c3),
            CorrelationQuery::dsigma_dsigma_sigma_sigma((Role::Student, Role::Teacher), cov4),
        ];
        for q in &queries {
            let c = correlation(q, acts, &EvalStrategy::ClosedForm).unwrap();
            let n = correlation(q, acts, &EvalStrategy::Quadrature { order: 40, order_4pt: 24 }).unwrap();
            assert!((c - n).abs() < 1e-9, "{:?}: {c} vs {n}", q.kind);
        }
    }
}
