//! Bayesian spatio-temporal Poisson autoregression for areal count panels.
//!
//! `poistar` fits weekly disease-count panels observed on a set of areal
//! units (districts, municipalities, grid cells) with a Poisson observation
//! model whose intensity splits into an *epidemic* component — a weighted
//! autoregression on recent counts, modulated by a log-linear growth factor —
//! and an *endemic baseline* component, both optionally carrying
//! spatio-temporal random effects with a Leroux conditional autoregressive
//! (CAR) structure in space and an AR(1) structure in time.
//!
//! The heavy lifting happens in three places:
//!
//! * [`car`] evaluates the CAR-AR random-field density through sparse
//!   quadratic forms and a precomputed eigenvalue log-determinant identity,
//!   so no dense factorization is ever needed during sampling;
//! * [`model`] assembles the joint log-posterior and its analytic gradient
//!   on an unconstrained parameterization (non-centered random effects,
//!   stick-broken simplex weights, log/logit scalar transforms);
//! * [`sampler`] draws from the posterior with a multinomial No-U-Turn
//!   sampler with diagonal mass-matrix and step-size adaptation.
//!
//! [`diagnostics`] covers convergence checks (rank-normalized split R-hat,
//! bulk effective sample size), information criteria (WAIC, PSIS-LOO), and
//! posterior-predictive scoring. [`simulate`] generates synthetic panels
//! from the model and runs parameter-recovery studies. [`cli`] wires
//! everything to files and subcommands; the `poistar` binary is a thin
//! wrapper over it.

pub mod car;
pub mod cli;
pub mod dense;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
