//! Simulation study of multilevel latent class (MLC) models for recovering
//! provider-level (Trust-level) covariate effects on patient outcomes.
//!
//! The pipeline has four parts:
//!
//! * [`simcore`] simulates patients nested in Trusts with a known Trust effect;
//! * [`mlc`] fits a two-level mixture of regressions by EM with restarts;
//! * [`recovery`] turns a fit into a recovered Trust-level coefficient;
//! * [`harness`] runs the Monte Carlo grid and summarises the recoveries.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod harness;
pub mod mlc;
pub mod recovery;
pub mod rng;
pub mod simcore;
