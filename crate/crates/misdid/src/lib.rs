//! Difference-in-differences estimation when the observed treatment indicator
//! is one-sidedly misclassified.
//!
//! True treatment `D*` and the recording indicator `S` follow a pair of latent
//! index equations; only `D = D* . S` is observed, so some truly treated units
//! are recorded as untreated. Regressing on `D` biases the ATT two ways: the
//! coefficient mixes treated and mislabelled units, and counterfactual trends
//! need not stay parallel across the observed groups. This crate provides:
//!
//! - a partial-observability probit first stage recovering (gamma, alpha, rho)
//!   from `D = 1{R gamma + U >= 0, Z alpha + V >= 0}` ([`pop`]),
//! - naive and two-step ATT estimators for two-period panels (first
//!   differences) and repeated cross-sections (pooled OLS), with bootstrap and
//!   analytic sandwich standard errors ([`estimators`]),
//! - exact decompositions of the DID estimand for a known discrete joint law,
//!   closed-form and plug-in asymptotic-bias formulas, simulators for the
//!   trivariate-normal data-generating process, and a Monte Carlo harness that
//!   checks all of it at desk scale ([`bias_lab`]),
//! - CSV ingestion with column roles and a 2x2 data model ([`data`]),
//! - the numerical kernels behind everything ([`numerics`]).
//!
//! The `misdid` binary exposes the `pop-fit`, `estimate`, `simulate`, and
//! `decompose` subcommands; see the crate examples for library usage.

pub mod bias_lab;
pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod numerics;
pub mod pop;

pub use error::{Error, Result};
