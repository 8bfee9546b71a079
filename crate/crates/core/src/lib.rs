//! Stochastic volatility models as strict local martingales: condition
//! checks, simulation before and after initial enlargement, and Monte Carlo
//! estimation of the martingale defect.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyzer;
pub mod coeffs;
pub mod engine;
pub mod enlargement;
pub mod experiment;
pub mod jumps;
pub mod montecarlo;
pub mod quadrature;
pub mod stats;
