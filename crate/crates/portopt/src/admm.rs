//! Mean–variance rebalancing under quadratic (market-impact) transaction
//! costs, solved by operator splitting.
//!
//! With impact terms `δ∓ᵢ(Δw∓ᵢ)²` the budget constraint becomes a quadric
//! in the stacked variable `x = (w, Δw⁻, Δw⁺)`:
//!
//! ```text
//! A₁x + xᵀC₁x = 1,   A₁ = (1ᵀ, c⁻ᵀ, c⁺ᵀ),   C₁ = diag(0, Δ⁻, Δ⁺)
//! ```
//!
//! so the problem is no longer a QP. Splitting the constraint set into
//!
//! * `Ω_x`: trade identity `A₂x = w̃` plus the box bounds — a set the
//!   active-set QP handles exactly, and
//! * `Ω_y`: the budget quadric — a set with a cheap closed-form-ish
//!   projection (see [`crate::projection`]),
//!
//! yields the consensus problem `min f(x) + g(y) s.t. x − y = 0`, solved
//! by the scaled alternating-direction method of multipliers:
//!
//! ```text
//! x ← argmin ½xᵀ(Q+φI)x − xᵀ(R+φ(y−u))   over Ω_x
//! y ← Π_{budget}(x + u)
//! u ← u + x − y
//! ```
//!
//! The penalty `φ` does not change the limit point, only the speed;
//! optional residual balancing (doubling/halving `φ`) is available behind
//! a flag and off by default so runs are bit-reproducible.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::linear::{
    stacked_bounds, stacked_linear_term, trade_identity_constraints, validate_inputs,
    BoundsPolicy, LinearError,
};
use crate::market::{cost_quadratic_split, CostSpec, TradeSplit, Universe};
use crate::projection::{project, ProjectionError, ProjectionInput};
use crate::qp::{default_max_iter, solve_qp_from, QpError, QpProblem, QpStatus, DEFAULT_TOL};

/// Errors from assembly or the splitting iteration.
#[derive(Debug, Error)]
pub enum AdmmError {
    /// Input validation failed (dimensions, γ, weights).
    #[error(transparent)]
    Invalid(#[from] LinearError),
    /// Structural problem rejected by the QP layer.
    #[error(transparent)]
    Qp(#[from] QpError),
    /// The x-update QP did not reach optimality.
    #[error("x-update failed at iteration {iteration}: QP status {status:?}")]
    XUpdateFailed { iteration: usize, status: QpStatus },
    /// The y-update could not project onto the budget surface.
    #[error("y-update failed at iteration {iteration}: {source}; iterate dump: {dump}")]
    YUpdateFailed {
        iteration: usize,
        source: ProjectionError,
        dump: String,
    },
    /// Options are out of range (φ, tolerances, iteration limit).
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

/// The assembled quadratic-cost program.
///
/// `Q = diag(Σ, 2γΔ⁻, 2γΔ⁺)` and `R = γ(μ, −c⁻, −c⁺)` define the
/// objective `½xᵀQx − xᵀR`; the budget quadric is carried by `a1`/`c1`
/// (diagonal) with right-hand side `b1 = 1`; the trade identity rows
/// `A₂x = B₂ = w̃` and the long-only box complete the constraint set.
#[derive(Debug, Clone)]
pub struct QcAssembly {
    pub q: DMatrix<f64>,
    pub r: DVector<f64>,
    /// Budget row coefficients `(1ₙ, c⁻, c⁺)`, length `3n`.
    pub a1: DVector<f64>,
    pub b1: f64,
    /// Trade-identity rows `(Iₙ, Iₙ, −Iₙ)`, shape `n × 3n`.
    pub a2: DMatrix<f64>,
    pub b2: DVector<f64>,
    /// Diagonal of `C₁ = diag(0, Δ⁻, Δ⁺)`, length `3n`.
    pub c1_diag: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Cost coefficients, kept for the budget projection.
    pub cs: CostSpec,
    n: usize,
}

impl QcAssembly {
    /// Number of assets (`3n` stacked variables).
    #[must_use]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Budget-quadric residual `A₁x + xᵀC₁x − B₁` of a stacked point.
    #[must_use]
    pub fn budget_residual(&self, x: &DVector<f64>) -> f64 {
        let mut acc = -self.b1;
        for i in 0..x.len() {
            acc += self.a1[i] * x[i] + self.c1_diag[i] * x[i] * x[i];
        }
        acc
    }

    /// Extracts the portfolio block of a stacked point.
    #[must_use]
    pub fn extract_weights(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.n).into_owned()
    }

    /// Extracts the trade blocks of a stacked point.
    #[must_use]
    pub fn extract_trades(&self, x: &DVector<f64>) -> TradeSplit {
        TradeSplit {
            dw_minus: x.rows(self.n, self.n).into_owned(),
            dw_plus: x.rows(2 * self.n, self.n).into_owned(),
        }
    }

    /// The canonical start: current holdings and no trades.
    #[must_use]
    pub fn initial_point(&self) -> DVector<f64> {
        let mut x = DVector::zeros(3 * self.n);
        x.rows_mut(0, self.n).copy_from(&self.b2);
        x
    }
}

/// Assembles the quadratic-cost program (long-only bounds, as in the
/// linear case's default policy).
pub fn assemble_qc(
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    gamma: f64,
) -> Result<QcAssembly, AdmmError> {
    let policy = BoundsPolicy::default();
    validate_inputs(u, cs, w_tilde, gamma, &policy)?;
    let n = u.n();
    let mut q = DMatrix::zeros(3 * n, 3 * n);
    q.view_mut((0, 0), (n, n)).copy_from(u.cov());
    for i in 0..n {
        q[(n + i, n + i)] = 2.0 * gamma * cs.delta_minus[i];
        q[(2 * n + i, 2 * n + i)] = 2.0 * gamma * cs.delta_plus[i];
    }
    let r = stacked_linear_term(u, cs, gamma);
    let mut a1 = DVector::zeros(3 * n);
    let mut c1_diag = DVector::zeros(3 * n);
    for i in 0..n {
        a1[i] = 1.0;
        a1[n + i] = cs.c_minus[i];
        a1[2 * n + i] = cs.c_plus[i];
        c1_diag[n + i] = cs.delta_minus[i];
        c1_diag[2 * n + i] = cs.delta_plus[i];
    }
    let (a2, b2) = trade_identity_constraints(w_tilde);
    let (lower, upper) = stacked_bounds(w_tilde, &policy);
    Ok(QcAssembly {
        q,
        r,
        a1,
        b1: 1.0,
        a2,
        b2,
        c1_diag,
        lower,
        upper,
        cs: cs.clone(),
        n,
    })
}

/// Solver knobs with reproducible defaults.
#[derive(Debug, Clone)]
pub struct AdmmOptions {
    /// Penalty parameter (affects speed, not the limit).
    pub phi: f64,
    /// Absolute stopping tolerance.
    pub eps_abs: f64,
    /// Relative stopping tolerance.
    pub eps_rel: f64,
    /// Iteration cap; hitting it returns the best iterate, not an error.
    pub max_iter: usize,
    /// Residual balancing: double/halve `φ` when the primal/dual residual
    /// ratio exceeds 10. Off by default — it changes the iteration path
    /// (not the limit) and with it bit-level reproducibility.
    pub adaptive_phi: bool,
    /// Keep the per-iteration residual trajectory in the diagnostics.
    pub record_trajectory: bool,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            phi: 1.0,
            eps_abs: 1e-8,
            eps_rel: 1e-6,
            max_iter: 5000,
            adaptive_phi: false,
            record_trajectory: false,
        }
    }
}

/// One snapshot of the splitting iteration.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub phi: f64,
    /// Iterations completed so far.
    pub k: usize,
    /// `‖x − y‖₂` of the current iterates.
    pub primal_residual: f64,
    /// `φ·‖y⁽ᵏ⁺¹⁾ − y⁽ᵏ⁾‖₂` of the last step.
    pub dual_residual: f64,
}

/// Convergence report; `trajectory` is filled only when requested.
#[derive(Debug, Clone, Serialize)]
pub struct AdmmDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub phi_final: f64,
    /// Per-iteration `(primal, dual)` residuals.
    pub trajectory: Vec<(f64, f64)>,
}

/// Result of a quadratic-cost solve.
#[derive(Debug, Clone)]
pub struct QcSolution {
    /// Optimal raw portfolio (from the x-iterate: trade identity and
    /// bounds hold exactly; the budget holds within the primal residual).
    pub w_star: DVector<f64>,
    pub trade: TradeSplit,
    /// Quadratic-model cost `c⁻ᵀΔw⁻ + c⁺ᵀΔw⁺ + Δw⁻ᵀΔ⁻Δw⁻ + Δw⁺ᵀΔ⁺Δw⁺`.
    pub cost_paid: f64,
    /// Full stacked x-iterate.
    pub x: DVector<f64>,
    /// Final iteration snapshot (resume with [`admm_solve_from`]).
    pub state: AdmmState,
    pub diagnostics: AdmmDiagnostics,
}

/// One x-update: the QP `min ½xᵀ(Q+φI)x − xᵀ(R+φ(y−u))` over the trade
/// identity and box. Exposed for testing; [`admm_solve`] runs the same
/// subproblem through a warm-started internal loop.
pub fn x_update(
    asm: &QcAssembly,
    y: &DVector<f64>,
    u: &DVector<f64>,
    phi: f64,
) -> Result<DVector<f64>, AdmmError> {
    if !(phi.is_finite() && phi > 0.0) {
        return Err(AdmmError::InvalidOption(format!("phi = {phi}")));
    }
    let prob = x_update_problem(asm, phi)?;
    let r = &asm.r + phi * (y - u);
    let prob = QpProblem::new(prob.q, r, prob.a, prob.b, prob.lower, prob.upper)?;
    let sol = solve_qp_from(&prob, DEFAULT_TOL, default_max_iter(prob.n()), None);
    if sol.status != QpStatus::Optimal {
        return Err(AdmmError::XUpdateFailed {
            iteration: 0,
            status: sol.status,
        });
    }
    Ok(sol.x)
}

fn x_update_problem(asm: &QcAssembly, phi: f64) -> Result<QpProblem, AdmmError> {
    let m = 3 * asm.n;
    let mut q = asm.q.clone();
    for i in 0..m {
        q[(i, i)] += phi;
    }
    Ok(QpProblem::new(
        q,
        DVector::zeros(m),
        asm.a2.clone(),
        asm.b2.clone(),
        asm.lower.clone(),
        asm.upper.clone(),
    )?)
}

/// Solves the quadratic-cost problem from the canonical start
/// `x = y = (w̃, 0, 0)`, `u = 0`.
pub fn admm_solve(asm: &QcAssembly, opts: &AdmmOptions) -> Result<QcSolution, AdmmError> {
    let x0 = asm.initial_point();
    let state = AdmmState {
        x: x0.clone(),
        y: x0,
        u: DVector::zeros(3 * asm.n),
        phi: opts.phi,
        k: 0,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
    };
    admm_solve_from(asm, opts, state)
}

/// Runs (or resumes) the splitting iteration from an explicit snapshot.
pub fn admm_solve_from(
    asm: &QcAssembly,
    opts: &AdmmOptions,
    state: AdmmState,
) -> Result<QcSolution, AdmmError> {
    validate_options(opts)?;
    let m = 3 * asm.n;
    if state.x.len() != m || state.y.len() != m || state.u.len() != m {
        return Err(AdmmError::InvalidOption(format!(
            "state vectors must have length {m}"
        )));
    }

    let mut phi = state.phi;
    let mut prob = x_update_problem(asm, phi)?;
    let mut proj_in = ProjectionInput::from_stacked(&state.y, &asm.cs)
        .map_err(|source| AdmmError::YUpdateFailed {
            iteration: state.k,
            source,
            dump: dump_iterate(&state.x, &state.u),
        })?;

    let mut x = state.x;
    let mut y = state.y;
    let mut u = state.u;
    let qp_iter_cap = default_max_iter(m);
    let sqrt_m = (m as f64).sqrt();

    let mut trajectory = Vec::new();
    let mut converged = false;
    let mut primal = state.primal_residual;
    let mut dual = state.dual_residual;
    let mut eps_pri = 0.0;
    let mut eps_dual = 0.0;
    let mut iterations = state.k;

    // Best-so-far snapshot, returned if the iteration cap is reached.
    let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>, f64, f64)> = None;

    // Iterations to let the dynamics settle between φ rescales.
    const ADAPT_COOLDOWN: usize = 50;
    let mut next_adapt = state.k;

    for k in state.k..state.k + opts.max_iter {
        // x-update (warm-started with the previous x, which satisfies the
        // same constraint set).
        prob.r.copy_from(&asm.r);
        prob.r.axpy(phi, &y, 1.0);
        prob.r.axpy(-phi, &u, 1.0);
        let sol = solve_qp_from(&prob, DEFAULT_TOL, qp_iter_cap, Some(&x));
        if sol.status != QpStatus::Optimal {
            return Err(AdmmError::XUpdateFailed {
                iteration: k,
                status: sol.status,
            });
        }
        x = sol.x;

        // y-update: project x + u onto the budget quadric.
        let n = asm.n;
        for i in 0..n {
            proj_in.v[i] = x[i] + u[i];
            proj_in.dv_minus[i] = x[n + i] + u[n + i];
            proj_in.dv_plus[i] = x[2 * n + i] + u[2 * n + i];
        }
        let proj = project(&proj_in).map_err(|source| AdmmError::YUpdateFailed {
            iteration: k,
            source,
            dump: dump_iterate(&x, &u),
        })?;
        let y_new = proj.y;

        dual = phi * (&y_new - &y).norm();
        y = y_new;

        // u-update and residuals.
        u += &x - &y;
        primal = (&x - &y).norm();
        iterations = k + 1;

        if opts.record_trajectory {
            trajectory.push((primal, dual));
        }

        eps_pri = sqrt_m * opts.eps_abs + opts.eps_rel * x.norm().max(y.norm());
        eps_dual = sqrt_m * opts.eps_abs + opts.eps_rel * phi * u.norm();
        let score = (primal / eps_pri.max(f64::MIN_POSITIVE))
            .max(dual / eps_dual.max(f64::MIN_POSITIVE));
        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, x.clone(), y.clone(), u.clone(), primal, dual));
        }
        if primal <= eps_pri && dual <= eps_dual {
            converged = true;
            break;
        }

        // Optional residual balancing (changes the path, not the limit).
        // Every change is followed by a cooldown: immediately after a
        // rescale the residuals reflect the transient, not the new φ, and
        // reacting to them can flip φ back and forth forever while the
        // iterates limit-cycle instead of converging.
        if opts.adaptive_phi && k >= next_adapt {
            if primal > 10.0 * dual && phi < 1e6 {
                phi *= 2.0;
                u /= 2.0;
                prob = x_update_problem(asm, phi)?;
                next_adapt = k + ADAPT_COOLDOWN;
            } else if dual > 10.0 * primal && phi > 1e-6 {
                phi /= 2.0;
                u *= 2.0;
                prob = x_update_problem(asm, phi)?;
                next_adapt = k + ADAPT_COOLDOWN;
            }
        }
    }

    // On a cap-out, hand back the best iterate seen rather than the last.
    if !converged {
        if let Some((_, bx, by, bu, bp, bd)) = best {
            x = bx;
            y = by;
            u = bu;
            primal = bp;
            dual = bd;
        }
    }

    let w_star = asm.extract_weights(&x);
    let trade = asm.extract_trades(&x);
    let cost_paid = cost_quadratic_split(&asm.cs, &trade);
    Ok(QcSolution {
        w_star,
        trade,
        cost_paid,
        x: x.clone(),
        state: AdmmState {
            x,
            y,
            u,
            phi,
            k: iterations,
            primal_residual: primal,
            dual_residual: dual,
        },
        diagnostics: AdmmDiagnostics {
            iterations,
            converged,
            primal_residual: primal,
            dual_residual: dual,
            eps_primal: eps_pri,
            eps_dual: eps_dual,
            phi_final: phi,
            trajectory,
        },
    })
}

fn validate_options(opts: &AdmmOptions) -> Result<(), AdmmError> {
    if !(opts.phi.is_finite() && opts.phi > 0.0) {
        return Err(AdmmError::InvalidOption(format!("phi = {}", opts.phi)));
    }
    if !(opts.eps_abs.is_finite() && opts.eps_abs >= 0.0) {
        return Err(AdmmError::InvalidOption(format!(
            "eps_abs = {}",
            opts.eps_abs
        )));
    }
    if !(opts.eps_rel.is_finite() && opts.eps_rel >= 0.0) {
        return Err(AdmmError::InvalidOption(format!(
            "eps_rel = {}",
            opts.eps_rel
        )));
    }
    if opts.max_iter == 0 {
        return Err(AdmmError::InvalidOption("max_iter = 0".into()));
    }
    Ok(())
}

fn dump_iterate(x: &DVector<f64>, u: &DVector<f64>) -> String {
    let head: Vec<String> = x.iter().take(6).map(|v| format!("{v:.6}")).collect();
    format!(
        "‖x‖ = {:.6e}, ‖u‖ = {:.6e}, x[..6] = [{}]",
        x.norm(),
        u.norm(),
        head.join(", ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{solve_lc, solve_markowitz};
    use crate::market::{split_trades, Correlation};
    use crate::projection::budget_residual_stacked;
    use crate::qp::solve_qp_default;
    use approx::assert_abs_diff_eq;

    fn table_universe() -> Universe {
        let mu = DVector::from_vec(vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.075, 0.10]);
        let vols = mu.clone();
        Universe::new(mu, vols, &Correlation::Constant(0.25)).unwrap()
    }

    fn w_tilde() -> DVector<f64> {
        DVector::from_vec(vec![
            0.2613632963,
            0.2141311560,
            0.1612984393,
            0.1279279551,
            0.1056803443,
            0.0734206565,
            0.0561781525,
        ])
    }

    fn table_costs() -> CostSpec {
        CostSpec::uniform(7, 0.02, 0.01, 0.05, 0.05).unwrap()
    }

    /// Reference quadratic-cost portfolio at σ(w*) = 4%, frozen offline.
    fn w_qc_expected() -> [f64; 7] {
        [
            0.0668055696,
            0.1084907372,
            0.1432379480,
            0.1279279551,
            0.1056803443,
            0.1417049841,
            0.2912893917,
        ]
    }

    const GAMMA_QC: f64 = 0.26042695788525205;

    #[test]
    fn zero_slopes_degenerate_to_linear_assembly() {
        let u = table_universe();
        let cs = CostSpec::uniform(7, 0.02, 0.01, 0.0, 0.0).unwrap();
        let asm = assemble_qc(&u, &cs, &w_tilde(), 0.5).unwrap();
        assert_eq!(asm.c1_diag.amax(), 0.0);
        // Q's trade blocks vanish; only the covariance block remains.
        for i in 7..21 {
            assert_eq!(asm.q[(i, i)], 0.0);
        }
    }

    #[test]
    fn impact_blocks_carry_two_gamma_delta() {
        let u = Universe::new(
            DVector::from_vec(vec![0.05]),
            DVector::from_vec(vec![0.2]),
            &Correlation::Constant(0.0),
        )
        .unwrap();
        let cs = CostSpec::uniform(1, 0.0, 0.0, 0.05, 0.05).unwrap();
        let asm = assemble_qc(&u, &cs, &DVector::from_vec(vec![1.0]), 1.0).unwrap();
        assert_abs_diff_eq!(asm.q[(0, 0)], 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(asm.q[(1, 1)], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(asm.q[(2, 2)], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn budget_functional_matches_cost_accounting() {
        // r(x) = A₁x + xᵀC₁x − 1 must equal 1ᵀw + C_QC(w|w̃) − 1 for any
        // split-consistent stacked point — checked at the reference
        // optimum, where it also nearly vanishes.
        let u = table_universe();
        let cs = table_costs();
        let asm = assemble_qc(&u, &cs, &w_tilde(), GAMMA_QC).unwrap();
        let w = DVector::from_vec(w_qc_expected().to_vec());
        let split = split_trades(&w, &w_tilde());
        let mut x = DVector::zeros(21);
        x.rows_mut(0, 7).copy_from(&w);
        x.rows_mut(7, 7).copy_from(&split.dw_minus);
        x.rows_mut(14, 7).copy_from(&split.dw_plus);
        let direct = w.sum() + cost_quadratic_split(&cs, &split) - 1.0;
        assert_abs_diff_eq!(asm.budget_residual(&x), direct, epsilon = 1e-12);
        assert_abs_diff_eq!(asm.budget_residual(&x), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn x_update_is_identity_when_objective_vanishes() {
        // Zero-variance universe, γ = 0: the x-update minimizes
        // ½φ‖x − (y−u)‖² alone, so a feasible y−u is returned unchanged.
        let u = Universe::from_covariance(
            DVector::from_vec(vec![0.05]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let cs = CostSpec::uniform(1, 0.02, 0.01, 0.05, 0.05).unwrap();
        let wt = DVector::from_vec(vec![0.5]);
        let asm = assemble_qc(&u, &cs, &wt, 0.0).unwrap();
        let y = DVector::from_vec(vec![0.6, 0.0, 0.1]); // satisfies A₂, box
        let zero = DVector::zeros(3);
        let x = x_update(&asm, &y, &zero, 1.0).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(x[i], y[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn x_update_with_huge_phi_is_constraint_projection() {
        let u = table_universe();
        let cs = table_costs();
        let asm = assemble_qc(&u, &cs, &w_tilde(), GAMMA_QC).unwrap();
        let mut y = asm.initial_point();
        y[0] += 0.3; // push off the constraint set
        y[8] -= 0.05;
        let zero = DVector::zeros(21);
        let x = x_update(&asm, &y, &zero, 1e8).unwrap();
        // Reference: direct projection min ½‖x − y‖² over A₂ + box.
        let prob = QpProblem::new(
            DMatrix::identity(21, 21),
            y.clone(),
            asm.a2.clone(),
            asm.b2.clone(),
            asm.lower.clone(),
            asm.upper.clone(),
        )
        .unwrap();
        let reference = solve_qp_default(&prob);
        for i in 0..21 {
            assert_abs_diff_eq!(x[i], reference.x[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn x_iterates_satisfy_trade_identity() {
        let u = table_universe();
        let asm = assemble_qc(&u, &table_costs(), &w_tilde(), GAMMA_QC).unwrap();
        let sol = admm_solve(
            &asm,
            &AdmmOptions {
                max_iter: 25,
                ..AdmmOptions::default()
            },
        )
        .unwrap();
        let residual = (&asm.a2 * &sol.x - &asm.b2).amax();
        assert!(residual <= 1e-8, "‖A₂x − B₂‖∞ = {residual}");
        assert!(!sol.diagnostics.converged);
    }

    #[test]
    fn reference_quadratic_cost_portfolio() {
        // γ tuned offline so σ(w*) = 4% under 2%/1% proportional costs
        // and 5% impact slopes.
        let u = table_universe();
        let asm = assemble_qc(&u, &table_costs(), &w_tilde(), GAMMA_QC).unwrap();
        let sol = admm_solve(&asm, &AdmmOptions::default()).unwrap();
        assert!(sol.diagnostics.converged);
        let expect = w_qc_expected();
        for i in 0..7 {
            assert_abs_diff_eq!(sol.w_star[i], expect[i], epsilon = 5e-6);
        }
        assert_abs_diff_eq!(u.volatility(&sol.w_star), 0.04, epsilon = 1e-5);
        // Quadratic-model cost: 1.49% of wealth.
        assert_abs_diff_eq!(sol.cost_paid, 0.0149, epsilon = 5e-5);
        // Modified budget identity on the returned point.
        assert_abs_diff_eq!(sol.w_star.sum() + sol.cost_paid, 1.0, epsilon = 1e-6);
        // Bounds honored exactly by the x-iterate.
        assert!(sol.x.min() >= -1e-12);
        // The y-iterate sits on the budget surface to projection accuracy.
        assert!(budget_residual_stacked(&asm.cs, &sol.state.y).abs() <= 1e-10);
    }

    #[test]
    fn zero_slope_solution_matches_augmented_qp() {
        let u = table_universe();
        let cs = CostSpec::uniform(7, 0.02, 0.01, 0.0, 0.0).unwrap();
        let gamma = 0.06404466445662751;
        let asm = assemble_qc(&u, &cs, &w_tilde(), gamma).unwrap();
        let qc = admm_solve(&asm, &AdmmOptions::default()).unwrap();
        let lc = solve_lc(&u, &cs, &w_tilde(), gamma).unwrap();
        for i in 0..7 {
            assert_abs_diff_eq!(qc.w_star[i], lc.w_star[i], epsilon = 1e-4);
        }
    }

    #[test]
    fn costless_solution_matches_markowitz() {
        let u = table_universe();
        let cs = CostSpec::zero(7);
        let gamma = 0.05;
        let asm = assemble_qc(&u, &cs, &w_tilde(), gamma).unwrap();
        // The fully degenerate instance (hyperplane budget, zero-objective
        // trade blocks) has the slowest dual tail of the suite: ~8.7k
        // iterations to the default tolerance.
        let qc = admm_solve(
            &asm,
            &AdmmOptions {
                max_iter: 20_000,
                ..AdmmOptions::default()
            },
        )
        .unwrap();
        assert!(qc.diagnostics.converged);
        let mvo = solve_markowitz(&u, gamma, true).unwrap();
        // First-order splitting at eps_rel = 1e−6 puts ~1e−5-scale noise
        // in weight space; the degeneration contract is 1e−4 per weight.
        for i in 0..7 {
            assert_abs_diff_eq!(qc.w_star[i], mvo[i], epsilon = 1e-4);
        }
    }

    #[test]
    fn converged_state_is_a_fixed_point() {
        // Resuming from a tightly converged (x, y, u) triple must not
        // drift: ten more iterations stay within 1e−8 of the solution.
        // (A triple converged only to the default tolerance is still a
        // ~1e−7-accurate fixed point, so the tight baseline matters.)
        let u = table_universe();
        let asm = assemble_qc(&u, &table_costs(), &w_tilde(), GAMMA_QC).unwrap();
        let sol = admm_solve(
            &asm,
            &AdmmOptions {
                eps_abs: 1e-13,
                eps_rel: 1e-11,
                max_iter: 100_000,
                ..AdmmOptions::default()
            },
        )
        .unwrap();
        assert!(sol.diagnostics.converged);
        let mut state = sol.state.clone();
        state.k = 0;
        let resumed = admm_solve_from(
            &asm,
            &AdmmOptions {
                max_iter: 10,
                eps_abs: 0.0,
                eps_rel: 0.0, // force all 10 iterations to run
                ..AdmmOptions::default()
            },
            state,
        )
        .unwrap();
        let drift = (&resumed.x - &sol.x).amax();
        assert!(drift <= 1e-8, "fixed-point drift {drift}");
    }

    #[test]
    fn vanishing_slopes_are_continuous() {
        let u = table_universe();
        let gamma = 0.1;
        let cs0 = CostSpec::uniform(7, 0.02, 0.01, 0.0, 0.0).unwrap();
        let cs1 = CostSpec::uniform(7, 0.02, 0.01, 1e-6, 1e-6).unwrap();
        let s0 = admm_solve(
            &assemble_qc(&u, &cs0, &w_tilde(), gamma).unwrap(),
            &AdmmOptions::default(),
        )
        .unwrap();
        let s1 = admm_solve(
            &assemble_qc(&u, &cs1, &w_tilde(), gamma).unwrap(),
            &AdmmOptions::default(),
        )
        .unwrap();
        for i in 0..7 {
            assert_abs_diff_eq!(s0.w_star[i], s1.w_star[i], epsilon = 1e-3);
        }
    }

    #[test]
    fn adaptive_penalty_reaches_same_solution() {
        let u = table_universe();
        let asm = assemble_qc(&u, &table_costs(), &w_tilde(), GAMMA_QC).unwrap();
        let plain = admm_solve(&asm, &AdmmOptions::default()).unwrap();
        let adaptive = admm_solve(
            &asm,
            &AdmmOptions {
                adaptive_phi: true,
                ..AdmmOptions::default()
            },
        )
        .unwrap();
        assert!(adaptive.diagnostics.converged);
        for i in 0..7 {
            assert_abs_diff_eq!(plain.w_star[i], adaptive.w_star[i], epsilon = 1e-5);
        }
    }

    #[test]
    fn trajectory_recorded_on_request() {
        let u = table_universe();
        let asm = assemble_qc(&u, &table_costs(), &w_tilde(), GAMMA_QC).unwrap();
        let sol = admm_solve(
            &asm,
            &AdmmOptions {
                record_trajectory: true,
                max_iter: 50,
                ..AdmmOptions::default()
            },
        )
        .unwrap();
        assert_eq!(sol.diagnostics.trajectory.len(), sol.diagnostics.iterations);
        // Residuals are finite throughout (augmented Lagrangian sanity).
        assert!(sol
            .diagnostics
            .trajectory
            .iter()
            .all(|(p, d)| p.is_finite() && d.is_finite()));
    }

    #[test]
    fn invalid_options_rejected() {
        let u = table_universe();
        let asm = assemble_qc(&u, &table_costs(), &w_tilde(), GAMMA_QC).unwrap();
        for bad in [
            AdmmOptions {
                phi: 0.0,
                ..AdmmOptions::default()
            },
            AdmmOptions {
                eps_abs: f64::NAN,
                ..AdmmOptions::default()
            },
            AdmmOptions {
                max_iter: 0,
                ..AdmmOptions::default()
            },
        ] {
            assert!(matches!(
                admm_solve(&asm, &bad),
                Err(AdmmError::InvalidOption(_))
            ));
        }
    }
}
