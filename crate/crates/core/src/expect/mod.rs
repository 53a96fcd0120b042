//! Gaussian expectations: correlation functions, drifts, risk, and their
//! mean-field averages.

mod closed;
mod correlation;
mod drift;
mod fields;
mod mean_field;
mod oracle;

pub use closed::gaussian_moment;
pub use correlation::{
    correlation, monte_carlo, quadrature, ActivationPair, CorrelationKind, CorrelationQuery, EvalStrategy, Role, Slot,
    DEFAULT_QUADRATURE_ORDER, DEFAULT_QUADRATURE_ORDER_4PT, MIN_MC_SAMPLES, MIN_QUADRATURE_ORDER,
};
pub use drift::{assembled, psi_gf, psi_m, psi_noise, psi_perp, psi_perp_chain_rule, psi_var, risk};
pub use mean_field::{hdmf_psi, hdmf_risk, mf_expected_psi, mf_expected_risk, xi_monte_carlo, Estimate, XiMonteCarlo};
pub use oracle::{monte_carlo_drifts, DriftOracle};
