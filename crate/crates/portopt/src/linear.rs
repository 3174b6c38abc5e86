//! Mean–variance rebalancing under linear (proportional) transaction
//! costs via the augmented quadratic program.
//!
//! Proportional costs `C(w|w̃) = Σᵢ c⁻ᵢΔw⁻ᵢ + c⁺ᵢΔw⁺ᵢ` make the budget
//! constraint `1ᵀw + C(w|w̃) = 1` piecewise linear in `w`. Lifting the
//! sell/buy magnitudes into explicit variables restores a plain QP over
//! the stacked vector `x = (w, Δw⁻, Δw⁺)`:
//!
//! ```text
//! min ½ xᵀQx − γ xᵀR̂      Q = diag(Σ, 0, 0),  R̂ = (μ, −c⁻, −c⁺)
//! s.t. 1ᵀw + c⁻ᵀΔw⁻ + c⁺ᵀΔw⁺ = 1        (budget row)
//!      w − w̃ = Δw⁺ − Δw⁻                 (trade identity)
//!      bounds on x
//! ```
//!
//! The split is not constrained to be complementary; with positive costs
//! an optimal solution never buys and sells the same asset (doing both
//! wastes budget), so complementarity emerges on its own and is only
//! *verified* after the solve.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::market::{cost_linear_split, CostSpec, TradeSplit, Universe};
use crate::qp::{solve_qp_default, QpError, QpProblem, QpSolution, QpStatus};

/// Trade-magnitude bound used when the long-only box is disabled: each
/// `Δw∓ᵢ` is capped by this much turnover instead of the holdings-derived
/// bounds.
pub const DEFAULT_TURNOVER_CAP: f64 = 2.0;

/// Bound policy for the rebalancing programs.
#[derive(Debug, Clone)]
pub struct BoundsPolicy {
    /// Keep the long-only box `0 ≤ w ≤ 1` and the holdings-derived trade
    /// bounds `Δw⁻ ≤ w̃`, `Δw⁺ ≤ 1 − w̃` (the default).
    pub long_only: bool,
    /// When `long_only` is off, weights are unbounded and each trade
    /// magnitude is capped by this value instead.
    pub turnover_cap: f64,
}

impl Default for BoundsPolicy {
    fn default() -> Self {
        Self {
            long_only: true,
            turnover_cap: DEFAULT_TURNOVER_CAP,
        }
    }
}

/// Errors from assembly or solving of the linear-cost program.
#[derive(Debug, Error)]
pub enum LinearError {
    /// Vector/matrix dimensions disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// The augmented QP handles proportional costs only; quadratic
    /// impact terms must go through the splitting solver instead.
    #[error("impact slopes must be zero in linear-cost mode")]
    NonzeroDelta,
    /// Risk tolerance must be finite and nonnegative.
    #[error("invalid risk tolerance γ = {0}")]
    InvalidGamma(f64),
    /// A current weight falls outside `[0, 1]` while the long-only box is
    /// active.
    #[error("current weight {1} of asset {0} outside [0, 1]")]
    WeightOutOfRange(usize, f64),
    /// The turnover cap must be positive and finite.
    #[error("invalid turnover cap {0}")]
    InvalidTurnoverCap(f64),
    /// Structural problem rejected by the QP layer.
    #[error(transparent)]
    Qp(#[from] QpError),
    /// The QP solver did not reach an optimal point.
    #[error("QP terminated with status {status:?} (KKT residual {kkt_residual:.3e})")]
    SolverFailure {
        status: QpStatus,
        kkt_residual: f64,
    },
}

/// The assembled augmented program together with the weight selector.
#[derive(Debug, Clone)]
pub struct AugmentedAssembly {
    /// The stacked 3n-variable program.
    pub qp: QpProblem,
    n: usize,
}

impl AugmentedAssembly {
    /// Number of assets (the stacked problem has `3n` variables).
    #[must_use]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Extracts the portfolio block `w = (Iₙ 0 0)x` from a stacked point.
    #[must_use]
    pub fn extract_weights(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.n).into_owned()
    }

    /// Extracts the trade blocks from a stacked point.
    #[must_use]
    pub fn extract_trades(&self, x: &DVector<f64>) -> TradeSplit {
        TradeSplit {
            dw_minus: x.rows(self.n, self.n).into_owned(),
            dw_plus: x.rows(2 * self.n, self.n).into_owned(),
        }
    }
}

/// Shared validation for the augmented programs (also used by the
/// quadratic-cost assembly, which relaxes the zero-slope requirement).
pub(crate) fn validate_inputs(
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    gamma: f64,
    policy: &BoundsPolicy,
) -> Result<(), LinearError> {
    let n = u.n();
    if cs.n() != n || w_tilde.len() != n {
        return Err(LinearError::DimensionMismatch(format!(
            "universe: {n}, costs: {}, current weights: {}",
            cs.n(),
            w_tilde.len()
        )));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(LinearError::InvalidGamma(gamma));
    }
    if policy.long_only {
        for (i, &wi) in w_tilde.iter().enumerate() {
            if !(-1e-12..=1.0 + 1e-12).contains(&wi) {
                return Err(LinearError::WeightOutOfRange(i, wi));
            }
        }
    } else if !(policy.turnover_cap.is_finite() && policy.turnover_cap > 0.0) {
        return Err(LinearError::InvalidTurnoverCap(policy.turnover_cap));
    }
    if !w_tilde.iter().all(|v| v.is_finite()) {
        return Err(LinearError::DimensionMismatch(
            "current weights contain non-finite entries".into(),
        ));
    }
    Ok(())
}

/// Builds the stacked constraint matrix `A` (budget row + trade-identity
/// rows) and right-hand side `B = (1, w̃)` shared by both cost models.
pub(crate) fn stacked_constraints(
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = w_tilde.len();
    let mut a = DMatrix::zeros(n + 1, 3 * n);
    for i in 0..n {
        a[(0, i)] = 1.0;
        a[(0, n + i)] = cs.c_minus[i];
        a[(0, 2 * n + i)] = cs.c_plus[i];
        a[(1 + i, i)] = 1.0;
        a[(1 + i, n + i)] = 1.0;
        a[(1 + i, 2 * n + i)] = -1.0;
    }
    let mut b = DVector::zeros(n + 1);
    b[0] = 1.0;
    b.rows_mut(1, n).copy_from(w_tilde);
    (a, b)
}

/// Trade-identity-only constraints `w + Δw⁻ − Δw⁺ = w̃` (no budget row) —
/// the equality set of the splitting solver's x-update.
pub(crate) fn trade_identity_constraints(
    w_tilde: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = w_tilde.len();
    let mut a = DMatrix::zeros(n, 3 * n);
    for i in 0..n {
        a[(i, i)] = 1.0;
        a[(i, n + i)] = 1.0;
        a[(i, 2 * n + i)] = -1.0;
    }
    (a, w_tilde.clone())
}

/// Box bounds for the stacked variable under the given policy.
pub(crate) fn stacked_bounds(
    w_tilde: &DVector<f64>,
    policy: &BoundsPolicy,
) -> (DVector<f64>, DVector<f64>) {
    let n = w_tilde.len();
    let mut lower = DVector::zeros(3 * n);
    let mut upper = DVector::zeros(3 * n);
    if policy.long_only {
        for i in 0..n {
            let wt = w_tilde[i].clamp(0.0, 1.0);
            upper[i] = 1.0;
            upper[n + i] = wt;
            upper[2 * n + i] = 1.0 - wt;
        }
    } else {
        for i in 0..n {
            lower[i] = f64::NEG_INFINITY;
            upper[i] = f64::INFINITY;
            upper[n + i] = policy.turnover_cap;
            upper[2 * n + i] = policy.turnover_cap;
        }
    }
    (lower, upper)
}

/// Linear blocks of the objective: `R̂ = γ·(μ, −c⁻, −c⁺)`.
pub(crate) fn stacked_linear_term(u: &Universe, cs: &CostSpec, gamma: f64) -> DVector<f64> {
    let n = u.n();
    let mut r = DVector::zeros(3 * n);
    for i in 0..n {
        r[i] = gamma * u.mu()[i];
        r[n + i] = -gamma * cs.c_minus[i];
        r[2 * n + i] = -gamma * cs.c_plus[i];
    }
    r
}

/// Assembles the augmented QP with the default long-only policy.
pub fn assemble_lc(
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    gamma: f64,
) -> Result<AugmentedAssembly, LinearError> {
    assemble_lc_with(u, cs, w_tilde, gamma, &BoundsPolicy::default())
}

/// Assembles the augmented QP under an explicit bound policy.
pub fn assemble_lc_with(
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    gamma: f64,
    policy: &BoundsPolicy,
) -> Result<AugmentedAssembly, LinearError> {
    validate_inputs(u, cs, w_tilde, gamma, policy)?;
    if !cs.is_linear() {
        return Err(LinearError::NonzeroDelta);
    }
    let n = u.n();
    let mut q = DMatrix::zeros(3 * n, 3 * n);
    q.view_mut((0, 0), (n, n)).copy_from(u.cov());
    let r = stacked_linear_term(u, cs, gamma);
    let (a, b) = stacked_constraints(cs, w_tilde);
    let (lower, upper) = stacked_bounds(w_tilde, policy);
    let qp = QpProblem::new(q, r, a, b, lower, upper)?;
    Ok(AugmentedAssembly { qp, n })
}

/// Result of a linear-cost rebalancing solve.
#[derive(Debug, Clone)]
pub struct LcSolution {
    /// Optimal raw portfolio `w*` (wealth `1ᵀw*` is below 1 by the cost).
    pub w_star: DVector<f64>,
    /// Sell/buy magnitudes realizing `w* − w̃`.
    pub trade: TradeSplit,
    /// Transaction cost paid, `c⁻ᵀΔw⁻ + c⁺ᵀΔw⁺`.
    pub cost_paid: f64,
    /// Budget residual `1ᵀw* + cost − 1` (diagnostic; tiny at optimality).
    pub budget_residual: f64,
    /// Largest `min(Δw⁻ᵢ, Δw⁺ᵢ)` across assets — complementarity gauge.
    pub max_complementarity: f64,
    /// Iterations spent in the QP.
    pub iterations: usize,
    /// Non-fatal observations (currently: complementarity violations,
    /// possible only with zero costs where the split is non-unique).
    pub warnings: Vec<String>,
}

/// Solves the linear-cost rebalancing problem (long-only default).
pub fn solve_lc(
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    gamma: f64,
) -> Result<LcSolution, LinearError> {
    solve_lc_with(u, cs, w_tilde, gamma, &BoundsPolicy::default())
}

/// Solves the linear-cost rebalancing problem under an explicit policy.
pub fn solve_lc_with(
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    gamma: f64,
    policy: &BoundsPolicy,
) -> Result<LcSolution, LinearError> {
    let asm = assemble_lc_with(u, cs, w_tilde, gamma, policy)?;
    let sol = solve_qp_default(&asm.qp);
    ensure_optimal(&sol)?;
    let w_star = asm.extract_weights(&sol.x);
    let trade = asm.extract_trades(&sol.x);
    let cost_paid = cost_linear_split(cs, &trade);
    let budget_residual = w_star.sum() + cost_paid - 1.0;

    let mut max_complementarity = 0.0f64;
    for i in 0..asm.n() {
        max_complementarity = max_complementarity.max(trade.dw_minus[i].min(trade.dw_plus[i]));
    }
    let mut warnings = Vec::new();
    if max_complementarity > 1e-6 {
        warnings.push(format!(
            "buy/sell split overlaps (max min(Δw⁻,Δw⁺) = {max_complementarity:.3e}); \
             weights are unaffected but the split is non-unique"
        ));
    }
    Ok(LcSolution {
        w_star,
        trade,
        cost_paid,
        budget_residual,
        max_complementarity,
        iterations: sol.iterations,
        warnings,
    })
}

/// Plain mean–variance solve without transaction costs: `min ½wᵀΣw − γμᵀw`
/// subject to full investment and (by default) the long-only box. The
/// degeneration target for every zero-cost check in this crate.
pub fn solve_markowitz(
    u: &Universe,
    gamma: f64,
    long_only: bool,
) -> Result<DVector<f64>, LinearError> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(LinearError::InvalidGamma(gamma));
    }
    let n = u.n();
    let a = DMatrix::from_element(1, n, 1.0);
    let b = DVector::from_element(1, 1.0);
    let (lower, upper) = if long_only {
        (DVector::zeros(n), DVector::from_element(n, 1.0))
    } else {
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    };
    let qp = QpProblem::new(u.cov().clone(), gamma * u.mu(), a, b, lower, upper)?;
    let sol = solve_qp_default(&qp);
    ensure_optimal(&sol)?;
    Ok(sol.x)
}

fn ensure_optimal(sol: &QpSolution) -> Result<(), LinearError> {
    if sol.status == QpStatus::Optimal {
        Ok(())
    } else {
        Err(LinearError::SolverFailure {
            status: sol.status,
            kkt_residual: sol.kkt_residual,
        })
    }
}
