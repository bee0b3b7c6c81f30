//! Hamiltonian Monte Carlo variational inference (HMCVI).
//!
//! This crate trains variational posteriors whose samples are refined by a
//! short Hamiltonian Monte Carlo chain. The chain is wrapped in an auxiliary
//! variational lower bound on log p(x) so that every piece — initial
//! approximation, leapfrog step size, (partial) momentum updates, mass matrix
//! and the reverse models that price the chain — is trained jointly by
//! stochastic gradient ascent. Gradients come from the crate's own
//! reverse-mode tape ([`autodiff`]), which the integrator also uses for
//! potential-energy gradients, so the whole sampler stays differentiable end
//! to end.
//!
//! Module map:
//! - [`autodiff`]: expression tape, reverse-mode gradients, Adam.
//! - [`potential`]: target potentials U(q) = -log p(q, ...) and their graphs.
//! - [`leapfrog`]: volume-preserving leapfrog integration.
//! - [`hmc`]: momentum handling, transition kernel, chains and ensembles.
//! - [`bound`]: transition densities and the auxiliary lower bound.
//! - [`models`]: MLP building blocks (encoder, reverse models, mass network).
//! - [`data`]: IDX images, binarization, synthetic datasets.
//! - [`estimators`]: importance-sampling estimate of the marginal likelihood.
//! - [`training`]: experiment configs, training loop, evaluation.
//! - [`diagnostics`]: self-check battery shared by tests and the CLI.

pub mod autodiff;
pub mod bound;
pub mod data;
pub mod diagnostics;
pub mod estimators;
pub mod hmc;
pub mod leapfrog;
pub mod models;
pub mod potential;
pub mod training;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("estimator failure: {0}")]
    Estimator(String),
    #[error("data format error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
