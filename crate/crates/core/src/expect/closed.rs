//! Closed forms for the correlation functions.
//!
//! Unclipped square: every integrand is a polynomial, so the expectation is a
//! sum over pairings (Isserlis). `erf(x/√2)`: the classical arcsine integrals.

use std::f64::consts::PI;

use super::correlation::{ActivationPair, CorrelationKind, CorrelationQuery, Slot};
use crate::error::{Error, Result};

pub(crate) fn evaluate(q: &CorrelationQuery, acts: ActivationPair<'_>) -> Result<f64> {
    if acts.both_pure_square() {
        Ok(square(q))
    } else if acts.both_erf() {
        Ok(erf(q))
    } else {
        Err(Error::Unsupported(format!(
            "no closed form for activations ({}, {}); use quadrature or monte-carlo",
            acts.student.name(),
            acts.teacher.name()
        )))
    }
}

/// `E[x_{a_1} ⋯ x_{a_n}]` for a zero-mean Gaussian, by recursive pairing.
pub fn gaussian_moment(cov: &[[f64; 4]; 4], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    if idx.len() % 2 == 1 {
        return 0.0;
    }
    let first = idx[0];
    let rest = &idx[1..];
    let mut total = 0.0;
    let mut buf = Vec::with_capacity(rest.len());
    for (k, &partner) in rest.iter().enumerate() {
        let c = cov[first][partner];
        if c == 0.0 {
            continue;
        }
        buf.clear();
        buf.extend(rest.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, &v)| v));
        total += c * gaussian_moment(cov, &buf);
    }
    total
}

fn square(q: &CorrelationQuery) -> f64 {
    let mut coeff = 1.0;
    let mut idx = Vec::with_capacity(8);
    for (a, slot) in q.active_slots().iter().enumerate() {
        match slot {
            Slot::Linear => idx.push(a),
            Slot::Sigma(_) => idx.extend([a, a]),
            Slot::DSigma => {
                coeff *= 2.0;
                idx.push(a);
            }
        }
    }
    coeff * gaussian_moment(&q.cov, &idx)
}

fn erf(q: &CorrelationQuery) -> f64 {
    let c = &q.cov;
    match q.kind {
        CorrelationKind::SigmaSigma => i2(c[0][0], c[1][1], c[0][1]),
        CorrelationKind::DSigmaDSigma => j2(c[0][0], c[1][1], c[0][1]),
        CorrelationKind::DSigmaLinearSigma => i3(c),
        CorrelationKind::DSigmaDSigmaSigmaSigma => i4(c),
    }
}

fn asin_clamped(x: f64) -> f64 {
    x.clamp(-1.0, 1.0).asin()
}

/// `E[σ(a)σ(b)] = (2/π) asin(C_ab / √((1+C_aa)(1+C_bb)))`.
pub fn i2(caa: f64, cbb: f64, cab: f64) -> f64 {
    2.0 / PI * asin_clamped(cab / ((1.0 + caa) * (1.0 + cbb)).sqrt())
}

/// `E[σ'(a)σ'(b)] = (2/π) / √((1+C_aa)(1+C_bb) − C_ab²)`.
pub fn j2(caa: f64, cbb: f64, cab: f64) -> f64 {
    2.0 / PI / ((1.0 + caa) * (1.0 + cbb) - cab * cab).sqrt()
}

/// `E[σ'(a) b σ(c)]`.
fn i3(c: &[[f64; 4]; 4]) -> f64 {
    let (caa, cab, cac, cbc, ccc) = (c[0][0], c[0][1], c[0][2], c[1][2], c[2][2]);
    let l3 = (1.0 + caa) * (1.0 + ccc) - cac * cac;
    2.0 / PI / l3.sqrt() * (cbc * (1.0 + caa) - cab * cac) / (1.0 + caa)
}

/// `E[σ'(a)σ'(b)σ(c)σ(e)]`.
fn i4(c: &[[f64; 4]; 4]) -> f64 {
    let (a, b, cc, e) = (0, 1, 2, 3);
    let l4 = (1.0 + c[a][a]) * (1.0 + c[b][b]) - c[a][b] * c[a][b];
    let l0 = l4 * c[cc][e] - c[b][cc] * c[b][e] * (1.0 + c[a][a]) - c[a][cc] * c[a][e] * (1.0 + c[b][b])
        + c[a][b] * c[a][cc] * c[b][e]
        + c[a][b] * c[b][cc] * c[a][e];
    let side = |x: usize| {
        l4 * (1.0 + c[x][x]) - c[b][x] * c[b][x] * (1.0 + c[a][a]) - c[a][x] * c[a][x] * (1.0 + c[b][b])
            + 2.0 * c[a][b] * c[a][x] * c[b][x]
    };
    let (l1, l2) = (side(cc), side(e));
    4.0 / (PI * PI) / l4.sqrt() * asin_clamped(l0 / (l1 * l2).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isserlis_fourth_and_sixth() {
        let cov = [[2.0, 0.5, 0.3, 0.0], [0.5, 1.0, 0.2, 0.0], [0.3, 0.2, 1.5, 0.0], [0.0; 4]];
        // E[a²b²] = ω_aa ω_bb + 2 ω_ab²
        assert!((gaussian_moment(&cov, &[0, 0, 1, 1]) - (2.0 * 1.0 + 2.0 * 0.25)).abs() < 1e-15);
        // E[a b c²] = ω_ab ω_cc + 2 ω_ac ω_bc
        assert!((gaussian_moment(&cov, &[0, 1, 2, 2]) - (0.5 * 1.5 + 2.0 * 0.3 * 0.2)).abs() < 1e-15);
        // E[a⁶] = 15 ω_aa³
        assert!((gaussian_moment(&cov, &[0; 6]) - 15.0 * 8.0).abs() < 1e-12);
        assert_eq!(gaussian_moment(&cov, &[0, 1, 2]), 0.0);
    }

    #[test]
    fn erf_two_point_at_identity() {
        // Independent unit variables: E[σ'(a)σ'(b)] = E[σ'(a)]² = (2/π)/2
        assert!((j2(1.0, 1.0, 0.0) - 1.0 / PI).abs() < 1e-15);
        assert_eq!(i2(1.0, 1.0, 0.0), 0.0);
        // Fully correlated unit variables: E[σ(a)²] = (2/π) asin(1/2) = 1/3
        assert!((i2(1.0, 1.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
    }
}
