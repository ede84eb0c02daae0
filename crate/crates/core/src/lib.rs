//! Hamiltonian Monte Carlo with partial velocity refreshment: chains, explicit
//! convergence certificates, couplings, and an exact Gaussian laboratory.

pub mod anneal;
pub mod certify;
pub mod cli;
pub mod chain;
pub mod coupling;
pub mod error;
pub mod flow;
pub mod gaussian_lab;
pub mod linalg;
pub mod meanfield;
pub mod model;
pub mod stats;

pub use error::{KmcError, Result};
pub use flow::{IntegratorConfig, PhaseState};
pub use model::{Potential, SharedPotential};
