//! Drifts and risk of the reduced mean-field state `(M, q)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::correlation::{ActivationPair, EvalStrategy};
use super::drift::{self, displacement_term, psi_m_generic, risk_noiseless_generic, square, use_square_matrix_forms};
use super::fields::{Fields, FullFields, MfFields, Var, XiSource};
use crate::error::Result;
use crate::overlap::{bar_omega, projected_overlap, ReducedMFState, XiModel};
use crate::rng;

fn q_drift<F: Fields>(f: &F, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DVector<f64>> {
    let v: Vec<f64> = (0..f.students())
        .into_par_iter()
        .map(|i| Ok(2.0 * displacement_term(f, i, Var::Perp(i), acts, strat)?))
        .collect::<Result<_>>()?;
    Ok(DVector::from_vec(v))
}

/// `Σ_{j≠i} q_j / (d − k)` for every `i`.
fn off_diagonal_mass(q: &DVector<f64>, n_orth: usize) -> DVector<f64> {
    let total = q.sum();
    q.map(|qi| (total - qi) / n_orth as f64)
}

/// `(E_Ξ[Ψ^M(Ω̃)], (E_Ξ[Ψ⊥_ii(Ω̃)])_i)`.
pub fn mf_expected_psi(
    mf: &ReducedMFState,
    p: &DMatrix<f64>,
    acts: ActivationPair<'_>,
    xi: &XiModel,
    strat: &EvalStrategy,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let rule = xi.rule()?;
    if use_square_matrix_forms(acts, strat) {
        let (pm, dq) = square_hdmf(mf, p)?;
        let pf = mf.students() as f64;
        let corr = off_diagonal_mass(&mf.q, xi.n_orth());
        let dq = DVector::from_fn(mf.students(), |i, _| dq[i] - 8.0 / pf * corr[i] * mf.q[i]);
        return Ok((pm, dq));
    }
    let f = MfFields::new(projected_overlap(&mf.m, p)?, &mf.q, &mf.m, p, XiSource::Average(rule));
    Ok((psi_m_generic(&f, acts, strat)?, q_drift(&f, acts, strat)?))
}

/// `E_Ξ[R(Ω̃)]`.
pub fn mf_expected_risk(
    mf: &ReducedMFState,
    p: &DMatrix<f64>,
    acts: ActivationPair<'_>,
    delta: f64,
    xi: &XiModel,
    strat: &EvalStrategy,
) -> Result<f64> {
    let rule = xi.rule()?;
    if use_square_matrix_forms(acts, strat) {
        let base = drift::risk(&bar_omega(mf, p)?, acts, delta, strat)?;
        let pf = mf.students() as f64;
        let corr = mf.q.dot(&off_diagonal_mass(&mf.q, xi.n_orth()));
        return Ok(base + corr / (pf * pf));
    }
    let f = MfFields::new(projected_overlap(&mf.m, p)?, &mf.q, &mf.m, p, XiSource::Average(rule));
    Ok(risk_noiseless_generic(&f, acts, strat)? + 0.5 * delta)
}

fn square_hdmf(mf: &ReducedMFState, p: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let bar = bar_omega(mf, p)?;
    let pf = mf.students() as f64;
    let c = square::trace_term(&bar.q, p);
    let dq = DVector::from_fn(mf.students(), |i, _| 4.0 * c * mf.q[i] - 8.0 / pf * bar.q[(i, i)] * mf.q[i]);
    Ok((square::psi_m(&bar), dq))
}

/// `(Ψ^M(Ω̄), (Ψ⊥_ii(Ω̄))_i)`: the mean-field drifts with Ξ replaced by the
/// identity.
pub fn hdmf_psi(
    mf: &ReducedMFState,
    p: &DMatrix<f64>,
    acts: ActivationPair<'_>,
    strat: &EvalStrategy,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if use_square_matrix_forms(acts, strat) {
        return square_hdmf(mf, p);
    }
    let bar = bar_omega(mf, p)?;
    let f = FullFields::new(&bar.q, &bar.m, p, Some(DMatrix::from_diagonal(&mf.q)));
    Ok((psi_m_generic(&f, acts, strat)?, q_drift(&f, acts, strat)?))
}

/// `R(Ω̄)`.
pub fn hdmf_risk(mf: &ReducedMFState, p: &DMatrix<f64>, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<f64> {
    drift::risk(&bar_omega(mf, p)?, acts, delta, strat)
}

/// Sample mean and standard error.
#[derive(Debug, Clone)]
pub struct Estimate<T> {
    pub mean: T,
    pub se: T,
}

#[derive(Debug, Clone)]
pub struct XiMonteCarlo {
    pub psi_m: Estimate<DMatrix<f64>>,
    pub q_drift: Estimate<DVector<f64>>,
    pub risk: Estimate<f64>,
}

/// Averages the mean-field drifts and risk over `n_draws` sampled Ξ matrices.
/// Serves as an oracle for the 1-D ξ averaging.
pub fn xi_monte_carlo(
    mf: &ReducedMFState,
    p: &DMatrix<f64>,
    acts: ActivationPair<'_>,
    delta: f64,
    xi: &XiModel,
    n_draws: usize,
    seed: u64,
    strat: &EvalStrategy,
) -> Result<XiMonteCarlo> {
    let n = mf.students();
    let projected = projected_overlap(&mf.m, p)?;
    let draws: Vec<(DMatrix<f64>, DVector<f64>, f64)> = (0..n_draws)
        .into_par_iter()
        .map(|draw| {
            let mut g = rng::stream(rng::mix(seed, draw as u64), rng::STREAM_XI);
            let mut x = DMatrix::identity(n, n);
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = xi.sample(&mut g)?;
                    x[(i, j)] = v;
                    x[(j, i)] = v;
                }
            }
            let f = MfFields::new(projected.clone(), &mf.q, &mf.m, p, XiSource::Fixed(x));
            Ok((psi_m_generic(&f, acts, strat)?, q_drift(&f, acts, strat)?, risk_noiseless_generic(&f, acts, strat)? + 0.5 * delta))
        })
        .collect::<Result<_>>()?;
    let nf = n_draws as f64;
    let se_of = |sum: f64, sumsq: f64| ((sumsq / nf - (sum / nf).powi(2)).max(0.0) / (nf - 1.0)).sqrt();
    let mut sm = (DMatrix::zeros(n, p.nrows()), DMatrix::zeros(n, p.nrows()));
    let mut sq = (DVector::zeros(n), DVector::zeros(n));
    let mut sr = (0.0, 0.0);
    for (a, b, r) in &draws {
        sm.0 += a;
        sm.1 += a.component_mul(a);
        sq.0 += b;
        sq.1 += b.component_mul(b);
        sr.0 += r;
        sr.1 += r * r;
    }
    Ok(XiMonteCarlo {
        psi_m: Estimate { mean: &sm.0 / nf, se: sm.0.zip_map(&sm.1, se_of) },
        q_drift: Estimate { mean: &sq.0 / nf, se: sq.0.zip_map(&sq.1, se_of) },
        risk: Estimate { mean: sr.0 / nf, se: se_of(sr.0, sr.1) },
    })
}
