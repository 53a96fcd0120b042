//! Covariance lookup for the pre-activation fields entering a drift.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use super::correlation::{correlation, ActivationPair, CorrelationKind, CorrelationQuery, EvalStrategy, Slot};
use crate::error::{Error, Result};
use crate::quadrature::GaussRule;
use crate::rng;

/// A pre-activation: student `λ_i`, teacher `λ★_r`, or the orthogonal
/// component `λ⊥_i = λ_i − [M P⁻¹ λ★]_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Var {
    S(usize),
    T(usize),
    Perp(usize),
}

impl Var {
    fn student(self) -> Option<usize> {
        match self {
            Var::S(i) | Var::Perp(i) => Some(i),
            Var::T(_) => None,
        }
    }

    fn code(self) -> u64 {
        match self {
            Var::S(i) => 3 * i as u64,
            Var::T(r) => 3 * r as u64 + 1,
            Var::Perp(i) => 3 * i as u64 + 2,
        }
    }
}

pub(crate) trait Fields: Sync {
    fn students(&self) -> usize;
    fn teachers(&self) -> usize;
    fn corr(&self, kind: CorrelationKind, slots: [Slot; 4], vars: &[Var], acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<f64>;
}

fn child_strategy(strat: &EvalStrategy, kind: CorrelationKind, vars: &[Var]) -> EvalStrategy {
    match strat {
        EvalStrategy::MonteCarlo { .. } => {
            let h = vars.iter().fold(kind as u64 + 1, |h, v| rng::mix(h, v.code()));
            strat.child(h)
        }
        _ => *strat,
    }
}

fn build_query(kind: CorrelationKind, slots: [Slot; 4], vars: &[Var], cov: impl Fn(Var, Var) -> f64) -> CorrelationQuery {
    let mut c = [[0.0; 4]; 4];
    for (a, &va) in vars.iter().enumerate() {
        for (b, &vb) in vars.iter().enumerate().skip(a) {
            let v = cov(va, vb);
            c[a][b] = v;
            c[b][a] = v;
        }
    }
    CorrelationQuery { kind, slots, cov: c }
}

/// Fields jointly Gaussian with covariance `Ω` (and `Q⊥` when needed).
pub(crate) struct FullFields {
    omega: DMatrix<f64>,
    perp: Option<DMatrix<f64>>,
    p: usize,
    k: usize,
}

impl FullFields {
    pub fn new(q: &DMatrix<f64>, m: &DMatrix<f64>, p: &DMatrix<f64>, perp: Option<DMatrix<f64>>) -> Self {
        Self { omega: crate::linalg::block_omega(q, m, p), perp, p: q.nrows(), k: p.nrows() }
    }

    fn cov(&self, a: Var, b: Var) -> f64 {
        let p = self.p;
        let perp = || self.perp.as_ref().expect("orthogonal covariance not supplied");
        match (a, b) {
            (Var::S(i), Var::S(j)) => self.omega[(i, j)],
            (Var::S(i), Var::T(r)) | (Var::T(r), Var::S(i)) => self.omega[(i, p + r)],
            (Var::T(r), Var::T(s)) => self.omega[(p + r, p + s)],
            (Var::Perp(i), Var::S(j) | Var::Perp(j)) | (Var::S(j), Var::Perp(i)) => perp()[(i, j)],
            (Var::Perp(_), Var::T(_)) | (Var::T(_), Var::Perp(_)) => 0.0,
        }
    }
}

impl Fields for FullFields {
    fn students(&self) -> usize {
        self.p
    }

    fn teachers(&self) -> usize {
        self.k
    }

    fn corr(&self, kind: CorrelationKind, slots: [Slot; 4], vars: &[Var], acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<f64> {
        let q = build_query(kind, slots, vars, |a, b| self.cov(a, b));
        correlation(&q, acts, &child_strategy(strat, kind, vars))
    }
}

/// How the off-diagonal entries of Ξ enter a pair term.
pub(crate) enum XiSource {
    /// Average each pair term over a rule for a single ξ.
    Average(Arc<GaussRule>),
    /// One fixed realization of the symmetric matrix Ξ.
    Fixed(DMatrix<f64>),
}

/// Mean-field fields: `Q̃ = M P⁻¹ Mᵀ + D_√q Ξ D_√q`, `Q̃⊥ = D_√q Ξ D_√q`.
pub(crate) struct MfFields<'a> {
    projected: DMatrix<f64>,
    q: &'a DVector<f64>,
    m: &'a DMatrix<f64>,
    p: &'a DMatrix<f64>,
    xi: XiSource,
}

impl<'a> MfFields<'a> {
    pub fn new(projected: DMatrix<f64>, q: &'a DVector<f64>, m: &'a DMatrix<f64>, p: &'a DMatrix<f64>, xi: XiSource) -> Self {
        Self { projected, q, m, p, xi }
    }

    fn cov(&self, a: Var, b: Var, xi: f64) -> f64 {
        let off = |i: usize, j: usize| (self.q[i] * self.q[j]).sqrt() * xi;
        match (a, b) {
            (Var::S(i), Var::S(j)) if i == j => self.projected[(i, i)] + self.q[i],
            (Var::S(i), Var::S(j)) => self.projected[(i, j)] + off(i, j),
            (Var::S(i), Var::T(r)) | (Var::T(r), Var::S(i)) => self.m[(i, r)],
            (Var::T(r), Var::T(s)) => self.p[(r, s)],
            (Var::Perp(i), Var::S(j) | Var::Perp(j)) | (Var::S(j), Var::Perp(i)) => {
                if i == j {
                    self.q[i]
                } else {
                    off(i, j)
                }
            }
            (Var::Perp(_), Var::T(_)) | (Var::T(_), Var::Perp(_)) => 0.0,
        }
    }
}

impl Fields for MfFields<'_> {
    fn students(&self) -> usize {
        self.q.len()
    }

    fn teachers(&self) -> usize {
        self.p.nrows()
    }

    fn corr(&self, kind: CorrelationKind, slots: [Slot; 4], vars: &[Var], acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<f64> {
        let mut pair: Option<(usize, usize)> = None;
        let mut first: Option<usize> = None;
        for s in vars.iter().filter_map(|v| v.student()) {
            match first {
                None => first = Some(s),
                Some(f) if f == s => {}
                Some(f) => match pair {
                    None => pair = Some((f, s)),
                    Some((a, b)) if s == a || s == b => {}
                    Some(_) => {
                        return Err(Error::Unsupported(
                            "mean-field average of a term coupling three distinct students".into(),
                        ))
                    }
                },
            }
        }
        let strat = child_strategy(strat, kind, vars);
        let eval = |xi: f64| {
            let q = build_query(kind, slots, vars, |a, b| self.cov(a, b, xi));
            correlation(&q, acts, &strat)
        };
        let Some((i, j)) = pair else { return eval(0.0) };
        if self.q[i] == 0.0 || self.q[j] == 0.0 {
            return eval(0.0);
        }
        match &self.xi {
            XiSource::Fixed(x) => eval(x[(i, j)]),
            XiSource::Average(rule) => {
                let mut acc = 0.0;
                for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                    acc += w * eval(x)?;
                }
                Ok(acc)
            }
        }
    }
}
