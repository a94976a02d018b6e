//! Optimal dividend band strategies with per-line reinsurance for
//! multi-line insurance portfolios whose claim arrivals share common
//! event classes.
//!
//! The pipeline is: describe the portfolio ([`model`]), bucket claim laws
//! on a lattice ([`lattice`]), apply retained-loss functions
//! ([`reinsurance`]), mix them into the aggregate retained-claim law
//! ([`aggregate`]), march the finite-difference scheme ([`solver`]), check
//! the result against the HJB operators ([`operators`]) and against a Monte
//! Carlo run of the controlled surplus ([`simulator`]).

pub mod aggregate;
pub mod error;
pub mod lattice;
pub mod model;
pub mod operators;
pub mod reinsurance;
pub mod search;
pub mod simulator;
pub mod solver;

pub use error::{Error, Result};
