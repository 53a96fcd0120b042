//! Gaussian quadrature rules built with the Golub–Welsch eigenvalue method.
//!
//! All rules are normalized as probability measures (weights sum to one), so a
//! rule applied to `f` directly yields an expectation.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Nodes and weights of the symmetric tridiagonal Jacobi matrix with zero
/// diagonal and the given off-diagonal, normalized to total mass one.
fn golub_welsch_symmetric(offdiag: &[f64]) -> GaussRule {
    let n = offdiag.len() + 1;
    let mut jac = DMatrix::zeros(n, n);
    for (k, &b) in offdiag.iter().enumerate() {
        jac[(k, k + 1)] = b;
        jac[(k + 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    // The rule is symmetric about zero; average mirrored pairs so odd moments
    // vanish to rounding.
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let j = n - 1 - i;
        nodes[i] = 0.5 * (pairs[i].0 - pairs[j].0);
        weights[i] = 0.5 * (pairs[i].1 + pairs[j].1) / total;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    GaussRule { nodes, weights }
}

/// Gauss–Hermite rule for the standard normal density (probabilists' form).
pub fn gauss_hermite(order: usize) -> Arc<GaussRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(order)
        .or_insert_with(|| {
            let off: Vec<f64> = (1..order).map(|k| (k as f64).sqrt()).collect();
            Arc::new(golub_welsch_symmetric(&off))
        })
        .clone()
}

/// Rule for `ξ = ⟨g, g'⟩` with `g, g'` independent and uniform on the unit
/// sphere of `R^n_orth`, i.e. the density `∝ (1 − x²)^((n_orth − 3)/2)` on
/// `[−1, 1]`.
///
/// `n_orth = 1` is the two-point law `±1`; `n_orth = 2` is the arcsine law
/// (Gauss–Chebyshev); larger values use Gauss–Jacobi with equal exponents.
pub fn sphere_coordinate_rule(n_orth: usize, order: usize) -> Arc<GaussRule> {
    assert!(n_orth >= 1 && order >= 1);
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<GaussRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard.entry((n_orth, order)).or_insert_with(|| Arc::new(build_sphere_rule(n_orth, order))).clone()
}

fn build_sphere_rule(n_orth: usize, order: usize) -> GaussRule {
    match n_orth {
        1 => GaussRule { nodes: vec![-1.0, 1.0], weights: vec![0.5, 0.5] },
        2 => {
            let nf = order as f64;
            let mut nodes: Vec<f64> = (1..=order)
                .map(|i| ((2 * i - 1) as f64 * std::f64::consts::PI / (2.0 * nf)).cos())
                .collect();
            nodes.reverse();
            GaussRule { nodes, weights: vec![1.0 / nf; order] }
        }
        _ => {
            let a = (n_orth as f64 - 3.0) / 2.0;
            let off: Vec<f64> = (1..order)
                .map(|k| {
                    let k = k as f64;
                    let s = 2.0 * k + 2.0 * a;
                    (k * (k + 2.0 * a) / (s * s - 1.0)).sqrt()
                })
                .collect();
            golub_welsch_symmetric(&off)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        let r = gauss_hermite(20);
        assert!((r.expect(|_| 1.0) - 1.0).abs() < 1e-13);
        assert!(r.expect(|x| x).abs() < 1e-13);
        assert!((r.expect(|x| x * x) - 1.0).abs() < 1e-12);
        assert!((r.expect(|x| x.powi(4)) - 3.0).abs() < 1e-11);
        assert!((r.expect(|x| x.powi(6)) - 15.0).abs() < 1e-10);
        // E[cos x] = e^{-1/2}
        assert!((r.expect(f64::cos) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn sphere_rule_variance_law() {
        for n in [1usize, 2, 3, 4, 7, 16, 64, 1000] {
            let r = sphere_coordinate_rule(n, 64);
            assert!((r.expect(|_| 1.0) - 1.0).abs() < 1e-12, "mass n={n}");
            assert!(r.expect(|x| x).abs() < 1e-12, "mean n={n}");
            let var = r.expect(|x| x * x);
            assert!((var - 1.0 / n as f64).abs() < 1e-12, "var n={n}: {var}");
            assert!(r.nodes.iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn sphere_rule_fourth_moment() {
        // E[ξ⁴] = 3 / (n (n + 2)) for a coordinate of a uniform unit vector.
        for n in [3usize, 4, 10] {
            let r = sphere_coordinate_rule(n, 32);
            let m4 = r.expect(|x| x.powi(4));
            let want = 3.0 / (n as f64 * (n as f64 + 2.0));
            assert!((m4 - want).abs() < 1e-12, "n={n}: {m4} vs {want}");
        }
    }
}
