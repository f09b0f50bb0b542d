//! Two-stage stochastic economic dispatch on DC power-flow networks.
//!
//! The library is organized along the pipeline it implements:
//!
//! - [`network`]: graph topology, incidence/cycle matrices, and the
//!   fundamental-flow basis that parameterizes every Kirchhoff-consistent
//!   flow pattern.
//! - [`lp`]: a self-contained dense simplex solver that returns primal
//!   solutions together with exact dual multipliers.
//! - [`dcopf`]: the dispatch problems as linear programs — the generic
//!   balancing problem `J(q, x)`, the nominal day-ahead OPF, the real-time
//!   OPF, and the clairvoyant oracle — plus congestion extraction from the
//!   duals.
//! - [`rld`]: the analytic dispatch layer — Gaussian special functions,
//!   single-bus risk-limiting dispatch, the two-bus backflow equilibrium,
//!   congestion-aware network reduction, and the end-to-end network RLD.
//! - [`eval`]: the Monte Carlo harness — correlated scenario sampling,
//!   policy evaluation under common random numbers, σ sweeps, and the
//!   brute-force two-stage grid oracle.
//!
//! All public operations are pure functions over immutable inputs and are
//! safe to call concurrently.

pub mod dcopf;
pub mod eval;
pub mod lp;
pub mod network;
pub mod rld;
