pub mod activation;
pub mod error;
pub mod expect;
pub mod linalg;
pub mod overlap;
pub mod quadrature;
pub mod rng;
pub mod trajectory;
pub mod config;
pub mod ode;
pub mod sgd;
