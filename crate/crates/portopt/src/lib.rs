//! Mean-variance portfolio optimization under linear and quadratic
//! transaction costs.
//!
//! The crate solves the rebalancing problem: given a current portfolio `w̃`,
//! expected returns `μ`, a covariance `Σ`, and per-asset trading costs, find
//! the portfolio `w*` maximizing the risk/return trade-off net of the bill
//! for moving from `w̃` to `w*`. Costs enter the budget constraint — wealth
//! spent on trading is no longer invested — so the optimizer's weights sum
//! to slightly less than one and are normalized for reporting.
//!
//! # Modules
//!
//! * [`market`] — asset universe, covariance assembly, cost models;
//! * [`qp`] — dense active-set quadratic programming over box and equality
//!   constraints;
//! * [`linear`] — exact reformulation of the linear-cost problem as a single
//!   QP in the variables `(w, Δw⁻, Δw⁺)`;
//! * [`projection`] — Euclidean projection onto the quadratic-cost budget
//!   surface, by quintic root-finding (homogeneous impact slopes) or
//!   scalar bisection (general slopes);
//! * [`admm`] — operator-splitting solver for the quadratic-cost problem,
//!   alternating the QP step with the budget projection;
//! * [`strict`] — variance-pinned variant: maximize net return subject to
//!   `σ(w) = σ*` exactly, via a three-operator splitting;
//! * [`frontier`] — efficient-frontier sweeps, volatility targeting by
//!   bisection over the risk-tolerance parameter, and side-by-side
//!   comparison reports;
//! * [`config`] — serde-friendly problem description shared with the CLI.

pub mod admm;
pub mod config;
pub mod frontier;
pub mod linear;
pub mod market;
pub mod projection;
pub mod qp;
pub mod strict;
