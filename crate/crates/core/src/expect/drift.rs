//! Drift functions and the population risk of an [`OverlapState`].
//!
//! Each entry is expanded into correlation functions over the marginal
//! covariance of at most four pre-activations. The unclipped square with
//! [`EvalStrategy::ClosedForm`] takes a matrix shortcut instead; the
//! [`assembled`] module exposes the entry-wise route for every activation.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::correlation::{ActivationPair, CorrelationKind, EvalStrategy, Role, Slot};
use super::fields::{Fields, FullFields, Var};
use crate::error::Result;
use crate::linalg;
use crate::overlap::{q_perp, OverlapState};

const DLS_TEACHER: [Slot; 4] = [Slot::DSigma, Slot::Linear, Slot::Sigma(Role::Teacher), Slot::Linear];
const DLS_STUDENT: [Slot; 4] = [Slot::DSigma, Slot::Linear, Slot::Sigma(Role::Student), Slot::Linear];
const DD: [Slot; 4] = [Slot::DSigma, Slot::DSigma, Slot::Linear, Slot::Linear];

fn ss(a: Role, b: Role) -> [Slot; 4] {
    [Slot::Sigma(a), Slot::Sigma(b), Slot::Linear, Slot::Linear]
}

fn ddss(a: Role, b: Role) -> [Slot; 4] {
    [Slot::DSigma, Slot::DSigma, Slot::Sigma(a), Slot::Sigma(b)]
}

pub(crate) fn use_square_matrix_forms(acts: ActivationPair<'_>, strat: &EvalStrategy) -> bool {
    matches!(strat, EvalStrategy::ClosedForm) && acts.both_pure_square()
}

fn fill_rows(rows: usize, cols: usize, f: impl Fn(usize, usize) -> Result<f64> + Sync) -> Result<DMatrix<f64>> {
    let data: Vec<Vec<f64>> = (0..rows).into_par_iter().map(|i| (0..cols).map(|j| f(i, j)).collect()).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(rows, cols, |i, j| data[i][j]))
}

fn fill_symmetric(n: usize, f: impl Fn(usize, usize) -> Result<f64> + Sync) -> Result<DMatrix<f64>> {
    let data: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| (i..n).map(|j| f(i, j)).collect()).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, n, |i, j| if i <= j { data[i][j - i] } else { data[j][i - j] }))
}

/// `E[σ'(λ_i) b E★]` for the noiseless displacement `E★`.
pub(crate) fn displacement_term<F: Fields>(f: &F, i: usize, b: Var, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<f64> {
    let (p, k) = (f.students(), f.teachers());
    let mut teacher = 0.0;
    for s in 0..k {
        teacher += f.corr(CorrelationKind::DSigmaLinearSigma, DLS_TEACHER, &[Var::S(i), b, Var::T(s)], acts, strat)?;
    }
    let mut student = 0.0;
    for l in 0..p {
        student += f.corr(CorrelationKind::DSigmaLinearSigma, DLS_STUDENT, &[Var::S(i), b, Var::S(l)], acts, strat)?;
    }
    Ok(teacher / k as f64 - student / p as f64)
}

pub(crate) fn psi_m_generic<F: Fields>(f: &F, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    fill_rows(f.students(), f.teachers(), |i, r| displacement_term(f, i, Var::T(r), acts, strat))
}

pub(crate) fn psi_gf_generic<F: Fields>(f: &F, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    fill_symmetric(f.students(), |i, j| {
        Ok(displacement_term(f, i, Var::S(j), acts, strat)? + displacement_term(f, j, Var::S(i), acts, strat)?)
    })
}

pub(crate) fn psi_perp_generic<F: Fields>(f: &F, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    fill_symmetric(f.students(), |i, j| {
        Ok(displacement_term(f, i, Var::Perp(j), acts, strat)? + displacement_term(f, j, Var::Perp(i), acts, strat)?)
    })
}

pub(crate) fn psi_noise_generic<F: Fields>(f: &F, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    if delta == 0.0 {
        return Ok(DMatrix::zeros(f.students(), f.students()));
    }
    fill_symmetric(f.students(), |i, j| Ok(delta * f.corr(CorrelationKind::DSigmaDSigma, DD, &[Var::S(i), Var::S(j)], acts, strat)?))
}

pub(crate) fn psi_var_generic<F: Fields>(f: &F, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    let (p, k) = (f.students(), f.teachers());
    let (pf, kf) = (p as f64, k as f64);
    let four = CorrelationKind::DSigmaDSigmaSigmaSigma;
    let noiseless = fill_symmetric(p, |i, j| {
        let (a, b) = (Var::S(i), Var::S(j));
        let mut tt = 0.0;
        for r in 0..k {
            for s in r..k {
                let v = f.corr(four, ddss(Role::Teacher, Role::Teacher), &[a, b, Var::T(r), Var::T(s)], acts, strat)?;
                tt += if r == s { v } else { 2.0 * v };
            }
        }
        let mut st = 0.0;
        for l in 0..p {
            for r in 0..k {
                st += f.corr(four, ddss(Role::Student, Role::Teacher), &[a, b, Var::S(l), Var::T(r)], acts, strat)?;
            }
        }
        let mut s2 = 0.0;
        for l in 0..p {
            for m in l..p {
                let v = f.corr(four, ddss(Role::Student, Role::Student), &[a, b, Var::S(l), Var::S(m)], acts, strat)?;
                s2 += if l == m { v } else { 2.0 * v };
            }
        }
        Ok(tt / (kf * kf) - 2.0 * st / (pf * kf) + s2 / (pf * pf))
    })?;
    Ok(noiseless + psi_noise_generic(f, acts, delta, strat)?)
}

/// `½ E[E★²]` without the label-noise term.
pub(crate) fn risk_noiseless_generic<F: Fields>(f: &F, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<f64> {
    let (p, k) = (f.students(), f.teachers());
    let (pf, kf) = (p as f64, k as f64);
    let two = CorrelationKind::SigmaSigma;
    let mut tt = 0.0;
    for r in 0..k {
        for s in r..k {
            let v = f.corr(two, ss(Role::Teacher, Role::Teacher), &[Var::T(r), Var::T(s)], acts, strat)?;
            tt += if r == s { v } else { 2.0 * v };
        }
    }
    let st: f64 = (0..p)
        .into_par_iter()
        .map(|l| (0..k).map(|r| f.corr(two, ss(Role::Student, Role::Teacher), &[Var::S(l), Var::T(r)], acts, strat)).sum::<Result<f64>>())
        .sum::<Result<f64>>()?;
    let s2: f64 = (0..p)
        .into_par_iter()
        .map(|l| {
            (l..p)
                .map(|m| {
                    let v = f.corr(two, ss(Role::Student, Role::Student), &[Var::S(l), Var::S(m)], acts, strat)?;
                    Ok(if l == m { v } else { 2.0 * v })
                })
                .sum::<Result<f64>>()
        })
        .sum::<Result<f64>>()?;
    Ok(0.5 * (tt / (kf * kf) - 2.0 * st / (pf * kf) + s2 / (pf * pf)))
}

fn full(state: &OverlapState, with_perp: bool) -> Result<FullFields> {
    let perp = if with_perp { Some(q_perp(state)?) } else { None };
    Ok(FullFields::new(&state.q, &state.m, &state.p, perp))
}

/// Matrix forms for the unclipped square, written with the weighted Gram
/// `A = diag(−1/p · I_p, 1/k · I_k)` of the displacement.
pub(crate) mod square {
    use super::*;

    pub fn trace_term(q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
        p.trace() / p.nrows() as f64 - q.trace() / q.nrows() as f64
    }

    pub fn psi_m(s: &OverlapState) -> DMatrix<f64> {
        let (pf, kf) = (s.students() as f64, s.teachers() as f64);
        let c = trace_term(&s.q, &s.p);
        &s.m * (2.0 * c) + (&s.m * &s.p / kf - &s.q * &s.m / pf) * 4.0
    }

    pub fn psi_gf(s: &OverlapState) -> DMatrix<f64> {
        let (pf, kf) = (s.students() as f64, s.teachers() as f64);
        let c = trace_term(&s.q, &s.p);
        let mut out = &s.q * (4.0 * c) + (&s.m * s.m.transpose() / kf - &s.q * &s.q / pf) * 8.0;
        linalg::symmetrize(&mut out);
        out
    }

    pub fn psi_perp(s: &OverlapState, perp: &DMatrix<f64>) -> DMatrix<f64> {
        let pf = s.students() as f64;
        let c = trace_term(&s.q, &s.p);
        let mut out = perp * (4.0 * c) - (&s.q * perp + perp * &s.q) * (4.0 / pf);
        linalg::symmetrize(&mut out);
        out
    }

    /// `A Ω` and its square, from which every higher moment follows.
    fn weighted(s: &OverlapState) -> (DMatrix<f64>, DMatrix<f64>) {
        let (p, k) = (s.students(), s.teachers());
        let mut a_omega = s.omega();
        for i in 0..p {
            a_omega.row_mut(i).scale_mut(-1.0 / p as f64);
        }
        for r in 0..k {
            a_omega.row_mut(p + r).scale_mut(1.0 / k as f64);
        }
        let sq = &a_omega * &a_omega;
        (a_omega, sq)
    }

    pub fn psi_var(s: &OverlapState, delta: f64) -> DMatrix<f64> {
        let p = s.students();
        let omega = s.omega();
        let (a_omega, a_omega_sq) = weighted(s);
        let c = a_omega.trace();
        let second = c * c + 2.0 * a_omega_sq.trace();
        // Ω A Ω and Ω A Ω A Ω
        let oao = &omega * &a_omega;
        let oaoao = &omega * &a_omega_sq;
        let mut out = DMatrix::from_fn(p, p, |i, j| {
            4.0 * (s.q[(i, j)] * second + 4.0 * c * oao[(i, j)] + 8.0 * oaoao[(i, j)]) + 4.0 * delta * s.q[(i, j)]
        });
        linalg::symmetrize(&mut out);
        out
    }

    pub fn risk_noiseless(s: &OverlapState) -> f64 {
        let (a_omega, a_omega_sq) = weighted(s);
        let c = a_omega.trace();
        0.5 * (c * c + 2.0 * a_omega_sq.trace())
    }
}

/// `Ψ^M_ir = E[σ'(λ_i) λ★_r E]`.
pub fn psi_m(state: &OverlapState, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    if use_square_matrix_forms(acts, strat) {
        return Ok(square::psi_m(state));
    }
    assembled::psi_m(state, acts, strat)
}

/// `Ψ^GF_ij = E[(σ'(λ_i) λ_j + σ'(λ_j) λ_i) E]`.
pub fn psi_gf(state: &OverlapState, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    if use_square_matrix_forms(acts, strat) {
        return Ok(square::psi_gf(state));
    }
    assembled::psi_gf(state, acts, strat)
}

/// `Ψ^Var_ij = E[σ'(λ_i) σ'(λ_j) E²]`, label noise included.
pub fn psi_var(state: &OverlapState, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    if use_square_matrix_forms(acts, strat) {
        return Ok(square::psi_var(state, delta));
    }
    assembled::psi_var(state, acts, delta, strat)
}

/// `Ψ^noise_ij = Δ E[σ'(λ_i) σ'(λ_j)]`.
pub fn psi_noise(state: &OverlapState, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    if use_square_matrix_forms(acts, strat) {
        return Ok(&state.q * (4.0 * delta));
    }
    assembled::psi_noise(state, acts, delta, strat)
}

/// `Ψ⊥_ij = E[(σ'(λ_i) λ⊥_j + σ'(λ_j) λ⊥_i) E]`, from the joint law of
/// `(λ, λ⊥, λ★)`.
pub fn psi_perp(state: &OverlapState, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    if use_square_matrix_forms(acts, strat) {
        return Ok(square::psi_perp(state, &q_perp(state)?));
    }
    assembled::psi_perp(state, acts, strat)
}

/// `Ψ⊥` through `dQ⊥ = Ψ^GF − Ψ^M P⁻¹ Mᵀ − M P⁻¹ (Ψ^M)ᵀ`.
pub fn psi_perp_chain_rule(state: &OverlapState, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
    let gf = psi_gf(state, acts, strat)?;
    let pm = psi_m(state, acts, strat)?;
    let p_inv = linalg::spd_inverse(&state.p)?;
    let cross = &pm * &p_inv * state.m.transpose();
    let mut out = gf - &cross - cross.transpose();
    linalg::symmetrize(&mut out);
    Ok(out)
}

/// Population risk `½ E[E★²] + Δ/2`.
pub fn risk(state: &OverlapState, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<f64> {
    let noiseless = if use_square_matrix_forms(acts, strat) {
        square::risk_noiseless(state)
    } else {
        risk_noiseless_generic(&full(state, false)?, acts, strat)?
    };
    Ok(noiseless + 0.5 * delta)
}

/// Entry-by-entry evaluation through [`super::correlation()`], regardless of
/// whether a matrix shortcut exists.
pub mod assembled {
    use super::*;

    pub fn psi_m(state: &OverlapState, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
        psi_m_generic(&full(state, false)?, acts, strat)
    }

    pub fn psi_gf(state: &OverlapState, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
        psi_gf_generic(&full(state, false)?, acts, strat)
    }

    pub fn psi_var(state: &OverlapState, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
        psi_var_generic(&full(state, false)?, acts, delta, strat)
    }

    pub fn psi_noise(state: &OverlapState, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
        psi_noise_generic(&full(state, false)?, acts, delta, strat)
    }

    pub fn psi_perp(state: &OverlapState, acts: ActivationPair<'_>, strat: &EvalStrategy) -> Result<DMatrix<f64>> {
        psi_perp_generic(&full(state, true)?, acts, strat)
    }

    pub fn risk(state: &OverlapState, acts: ActivationPair<'_>, delta: f64, strat: &EvalStrategy) -> Result<f64> {
        Ok(risk_noiseless_generic(&full(state, false)?, acts, strat)? + 0.5 * delta)
    }
}
