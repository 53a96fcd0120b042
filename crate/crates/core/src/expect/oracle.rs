//! Monte Carlo over the full joint law of `(λ, λ★, z)`.
//!
//! Shares nothing with the correlation expansion: each drift is estimated from
//! its defining expectation, so agreement with the engine tests the expansion
//! itself as well as the individual integrals.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::correlation::ActivationPair;
use super::mean_field::Estimate;
use crate::error::Result;
use crate::linalg::{pivoted_cholesky, spd_inverse};
use crate::overlap::OverlapState;
use crate::rng;

const CHUNKS: usize = 32;

#[derive(Debug, Clone)]
pub struct DriftOracle {
    pub psi_m: Estimate<DMatrix<f64>>,
    pub psi_gf: Estimate<DMatrix<f64>>,
    pub psi_var: Estimate<DMatrix<f64>>,
    pub psi_noise: Estimate<DMatrix<f64>>,
    pub psi_perp: Estimate<DMatrix<f64>>,
    pub risk: Estimate<f64>,
}

#[derive(Clone)]
struct Sums {
    m: (DMatrix<f64>, DMatrix<f64>),
    gf: (DMatrix<f64>, DMatrix<f64>),
    var: (DMatrix<f64>, DMatrix<f64>),
    noise: (DMatrix<f64>, DMatrix<f64>),
    perp: (DMatrix<f64>, DMatrix<f64>),
    risk: (f64, f64),
}

impl Sums {
    fn zeros(p: usize, k: usize) -> Self {
        let z = |r, c| (DMatrix::zeros(r, c), DMatrix::zeros(r, c));
        Self { m: z(p, k), gf: z(p, p), var: z(p, p), noise: z(p, p), perp: z(p, p), risk: (0.0, 0.0) }
    }

    fn merge(mut self, o: Self) -> Self {
        for (a, b) in [(&mut self.m, &o.m), (&mut self.gf, &o.gf), (&mut self.var, &o.var), (&mut self.noise, &o.noise), (&mut self.perp, &o.perp)] {
            a.0 += &b.0;
            a.1 += &b.1;
        }
        self.risk.0 += o.risk.0;
        self.risk.1 += o.risk.1;
        self
    }
}

fn push(acc: &mut (DMatrix<f64>, DMatrix<f64>), idx: (usize, usize), v: f64) {
    acc.0[idx] += v;
    acc.1[idx] += v * v;
}

/// Estimates every drift and the risk from `n` joint samples.
pub fn monte_carlo_drifts(state: &OverlapState, acts: ActivationPair<'_>, delta: f64, n: usize, seed: u64) -> Result<DriftOracle> {
    let (p, k) = (state.students(), state.teachers());
    let (pf, kf) = (p as f64, k as f64);
    let chol = pivoted_cholesky(&state.omega())?;
    let proj = &state.m * spd_inverse(&state.p)?;
    let sqrt_delta = delta.sqrt();
    let per_chunk = n.div_ceil(CHUNKS);

    let sums = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let count = per_chunk.min(n.saturating_sub(c * per_chunk));
            let mut g = rng::stream(rng::mix(seed, c as u64), rng::STREAM_SAMPLES);
            let mut s = Sums::zeros(p, k);
            let mut u = DVector::zeros(chol.rank);
            for _ in 0..count {
                for v in u.iter_mut() {
                    *v = g.sample(StandardNormal);
                }
                let z: f64 = g.sample(StandardNormal);
                let fields = &chol.factor * &u;
                let lam = fields.rows(0, p);
                let lam_t = fields.rows(p, k);
                let lam_perp = lam - &proj * lam_t;
                let ds: Vec<f64> = lam.iter().map(|&x| acts.student.dsigma(x)).collect();
                let e_star = lam_t.iter().map(|&x| acts.teacher.sigma(x)).sum::<f64>() / kf
                    - lam.iter().map(|&x| acts.student.sigma(x)).sum::<f64>() / pf;
                let e = e_star + sqrt_delta * z;
                for i in 0..p {
                    for r in 0..k {
                        push(&mut s.m, (i, r), ds[i] * lam_t[r] * e_star);
                    }
                    for j in 0..p {
                        push(&mut s.gf, (i, j), (ds[i] * lam[j] + ds[j] * lam[i]) * e_star);
                        push(&mut s.perp, (i, j), (ds[i] * lam_perp[j] + ds[j] * lam_perp[i]) * e_star);
                        push(&mut s.var, (i, j), ds[i] * ds[j] * e * e);
                        push(&mut s.noise, (i, j), delta * ds[i] * ds[j]);
                    }
                }
                let r = 0.5 * e_star * e_star;
                s.risk.0 += r;
                s.risk.1 += r * r;
            }
            s
        })
        .reduce(|| Sums::zeros(p, k), Sums::merge);

    let nf = n as f64;
    let est = |(sum, sumsq): &(DMatrix<f64>, DMatrix<f64>)| Estimate {
        mean: sum / nf,
        se: sum.zip_map(sumsq, |a, b| ((b / nf - (a / nf).powi(2)).max(0.0) / (nf - 1.0)).sqrt()),
    };
    let (rs, rss) = sums.risk;
    Ok(DriftOracle {
        psi_m: est(&sums.m),
        psi_gf: est(&sums.gf),
        psi_var: est(&sums.var),
        psi_noise: est(&sums.noise),
        psi_perp: est(&sums.perp),
        risk: Estimate { mean: rs / nf + 0.5 * delta, se: ((rss / nf - (rs / nf).powi(2)).max(0.0) / (nf - 1.0)).sqrt() },
    })
}
