//! Volatility targeting and efficient-frontier sweeps.
//!
//! The cost-aware solvers are parameterized by the risk tolerance γ, but
//! practitioners think in volatility targets and frontier curves. This
//! module supplies the bridge:
//!
//! * [`solve_gamma`] — one solve at a given γ, dispatched by [`Mode`];
//! * [`solve_for_target_vol`] — outer bisection on γ exploiting the
//!   monotonicity of σ(w*(γ)), with the strict solver handling targets
//!   past the frontier's stall point;
//! * [`frontier`] — a sweep over a γ- or σ-grid producing
//!   [`FrontierPoint`]s in `(σ(w̄*), μ_net)` coordinates, where `w̄*` is
//!   the optimal book renormalized to full investment and `μ_net`
//!   subtracts the (possibly repeated) rebalancing cost from the raw
//!   book's gross return;
//! * [`compare_report`] — the side-by-side comparison of the cost-blind,
//!   linear-cost, and quadratic-cost books tuned to one volatility.
//!
//! Frontier points are independent solves; the sweep records per-point
//! failures and keeps going, so one pathological γ cannot sink a whole
//! curve.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::admm::{admm_solve, assemble_qc, AdmmError, AdmmOptions};
use crate::linear::{solve_lc, solve_markowitz, LinearError};
use crate::market::{
    cost_linear, cost_quadratic, net_expected_return, normalize, split_trades, CostKind,
    CostSpec, MarketError, TradeSplit, Universe,
};
use crate::strict::{
    assemble_strict, solve_strict, StrictError, StrictOptions, StrictStatus,
};

/// Default bisection tolerance on |σ(w*) − σ_target|, in volatility units.
pub const DEFAULT_VOL_TOL: f64 = 1e-4;

/// Upper cap on the risk-tolerance doubling search (2²⁰).
pub const GAMMA_CAP: f64 = 1_048_576.0;

/// Which optimization problem a solve runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Cost-blind mean–variance.
    Mvo,
    /// Proportional costs via the augmented QP.
    Linear,
    /// Linear-plus-quadratic costs via the splitting solver.
    Quadratic,
    /// Exact volatility target with net-return objective.
    Strict,
}

impl Mode {
    /// Parses the CLI/config spelling.
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mvo" => Some(Self::Mvo),
            "linear" => Some(Self::Linear),
            "quadratic" => Some(Self::Quadratic),
            "strict" => Some(Self::Strict),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mvo => "mvo",
            Self::Linear => "linear",
            Self::Quadratic => "quadratic",
            Self::Strict => "strict",
        })
    }
}

/// Per-solver knobs carried through every frontier-level entry point.
#[derive(Debug, Clone, Default)]
pub struct SolverOptions {
    pub admm: AdmmOptions,
    pub strict: StrictOptions,
}

/// Errors from volatility targeting and sweeps.
#[derive(Debug, Error)]
pub enum FrontierError {
    /// γ-parameterized entry point called with the strict mode.
    #[error("mode {0} targets volatility directly and has no risk-tolerance form")]
    NeedsVolatilityTarget(Mode),
    /// Target below what γ = 0 already produces.
    #[error(
        "volatility target {target:.6} below the minimum attainable {min_sigma:.6}"
    )]
    TargetBelowRange { target: f64, min_sigma: f64 },
    /// Doubling hit the γ cap without reaching the target: the frontier
    /// stalls below it.
    #[error(
        "volatility target {target:.6} unreachable: frontier stalls at {max_sigma:.6}"
    )]
    TargetUnreachable { target: f64, max_sigma: f64 },
    /// The σ(γ) samples moved the wrong way by more than the allowance —
    /// the bisection's premise failed, so the result would be garbage.
    #[error(
        "volatility not monotone in risk tolerance: σ({gamma_lo:.6e}) = {sigma_lo:.8} \
         but σ({gamma_hi:.6e}) = {sigma_hi:.8} (allowance {allowance:.2e})"
    )]
    MonotonicityViolation {
        gamma_lo: f64,
        gamma_hi: f64,
        sigma_lo: f64,
        sigma_hi: f64,
        allowance: f64,
    },
    /// Bisection interval collapsed without meeting the σ tolerance.
    #[error(
        "bisection stalled: interval [{gamma_lo:.6e}, {gamma_hi:.6e}] exhausted \
         with |σ − target| = {gap:.3e}"
    )]
    BisectionStalled {
        gamma_lo: f64,
        gamma_hi: f64,
        gap: f64,
    },
    /// Strict solve finished without certifying both constraints.
    #[error(
        "strict solve not feasibility-certified: budget residual {budget:.3e}, \
         variance residual {variance:.3e}"
    )]
    StrictNotCertified { budget: f64, variance: f64 },
    /// Invalid grid specification.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    /// Target is not a usable volatility.
    #[error("invalid volatility target {0}")]
    InvalidTarget(f64),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Strict(#[from] StrictError),
}

/// One solve's essentials, mode-agnostic.
#[derive(Debug, Clone)]
pub struct ModeSolution {
    pub w_star: DVector<f64>,
    pub trade: TradeSplit,
    /// Cost under the mode's own model (zero for [`Mode::Mvo`]).
    pub cost_paid: f64,
    /// Whether the solver met its own convergence/certification test;
    /// best-effort iterates still carry usable numbers.
    pub converged: bool,
}

/// Runs a single γ-parameterized solve. [`Mode::Strict`] has no γ form
/// and is rejected here — use [`solve_for_target_vol`].
pub fn solve_gamma(
    mode: Mode,
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    gamma: f64,
    opts: &SolverOptions,
) -> Result<ModeSolution, FrontierError> {
    match mode {
        Mode::Mvo => {
            let w = solve_markowitz(u, gamma, true)?;
            let trade = split_trades(&w, w_tilde);
            Ok(ModeSolution {
                w_star: w,
                trade,
                cost_paid: 0.0,
                converged: true,
            })
        }
        Mode::Linear => {
            // The proportional-cost problem prices only (c⁻, c⁺); the
            // impact slopes stay available for cross-evaluation.
            let sol = solve_lc(u, &cs.linear_part(), w_tilde, gamma)?;
            Ok(ModeSolution {
                w_star: sol.w_star,
                trade: sol.trade,
                cost_paid: sol.cost_paid,
                converged: true,
            })
        }
        Mode::Quadratic => {
            let asm = assemble_qc(u, cs, w_tilde, gamma)?;
            let sol = admm_solve(&asm, &opts.admm)?;
            Ok(ModeSolution {
                converged: sol.diagnostics.converged,
                w_star: sol.w_star,
                trade: sol.trade,
                cost_paid: sol.cost_paid,
            })
        }
        Mode::Strict => Err(FrontierError::NeedsVolatilityTarget(mode)),
    }
}

/// A volatility-targeted solve: the portfolio, and the γ that produced it
/// (`None` for the strict mode, which needs no γ).
#[derive(Debug, Clone)]
pub struct TargetVolSolution {
    pub solution: ModeSolution,
    pub gamma: Option<f64>,
    /// Realized σ(w*) of the raw book.
    pub sigma: f64,
}

/// Finds the portfolio whose raw volatility matches `sigma_target`.
///
/// For the γ-parameterized modes this bisects on γ: σ(w*(γ)) is
/// nondecreasing, so the bracket `[0, γ_hi]` is grown by doubling until
/// it straddles the target (capped at [`GAMMA_CAP`]; hitting the cap
/// means the frontier stalls below the target and the error reports the
/// largest volatility seen). Monotonicity is asserted along the way —
/// samples moving backwards by more than `2·tol` abort with a
/// diagnostic rather than bisecting noise.
///
/// Quadratic-mode evaluations run with the adaptive penalty switched on
/// and at least a 20000-iteration budget, whatever the caller's options
/// say: the doubling phase visits γ values orders of magnitude beyond
/// any sensible fixed penalty, where the default configuration returns
/// unconverged iterates whose volatility drifts upward and would corrupt
/// the search.
///
/// [`Mode::Strict`] solves the target directly and must certify
/// feasibility.
pub fn solve_for_target_vol(
    mode: Mode,
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    sigma_target: f64,
    tol: f64,
    opts: &SolverOptions,
) -> Result<TargetVolSolution, FrontierError> {
    if !(sigma_target.is_finite() && sigma_target > 0.0) {
        return Err(FrontierError::InvalidTarget(sigma_target));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(FrontierError::InvalidTarget(tol));
    }

    if mode == Mode::Strict {
        let asm = assemble_strict(u, cs, w_tilde, sigma_target)?;
        let sol = solve_strict(&asm, &opts.strict)?;
        if sol.status != StrictStatus::FeasibilityCertified {
            return Err(FrontierError::StrictNotCertified {
                budget: sol.budget_residual,
                variance: sol.variance_residual,
            });
        }
        let sigma = u.volatility(&sol.w_star);
        return Ok(TargetVolSolution {
            solution: ModeSolution {
                w_star: sol.w_star,
                trade: sol.trade,
                cost_paid: sol.cost_paid,
                converged: true,
            },
            gamma: None,
            sigma,
        });
    }

    let mut eval_opts = opts.clone();
    if mode == Mode::Quadratic {
        eval_opts.admm.adaptive_phi = true;
        eval_opts.admm.max_iter = eval_opts.admm.max_iter.max(20_000);
    }
    let eval = |gamma: f64| -> Result<(f64, ModeSolution), FrontierError> {
        let sol = solve_gamma(mode, u, cs, w_tilde, gamma, &eval_opts)?;
        Ok((u.volatility(&sol.w_star), sol))
    };
    let allowance = 2.0 * tol;
    let done = |sigma: f64| (sigma - sigma_target).abs() <= tol;

    // Lower endpoint: γ = 0 is the most conservative book on the curve.
    let (sigma_zero, sol_zero) = eval(0.0)?;
    if done(sigma_zero) {
        return Ok(TargetVolSolution {
            solution: sol_zero,
            gamma: Some(0.0),
            sigma: sigma_zero,
        });
    }
    if sigma_zero > sigma_target {
        return Err(FrontierError::TargetBelowRange {
            target: sigma_target,
            min_sigma: sigma_zero,
        });
    }

    // Grow the bracket by doubling until σ(γ_hi) crosses the target.
    let mut gamma_lo = 0.0;
    let mut sigma_lo = sigma_zero;
    let mut gamma_hi = 1.0;
    let (mut sigma_hi, mut sol_hi);
    loop {
        let (s, sol) = eval(gamma_hi)?;
        if s < sigma_lo - allowance {
            return Err(FrontierError::MonotonicityViolation {
                gamma_lo,
                gamma_hi,
                sigma_lo,
                sigma_hi: s,
                allowance,
            });
        }
        if done(s) {
            return Ok(TargetVolSolution {
                solution: sol,
                gamma: Some(gamma_hi),
                sigma: s,
            });
        }
        if s > sigma_target {
            sigma_hi = s;
            sol_hi = sol;
            break;
        }
        gamma_lo = gamma_hi;
        sigma_lo = s;
        gamma_hi *= 2.0;
        if gamma_hi > GAMMA_CAP {
            return Err(FrontierError::TargetUnreachable {
                target: sigma_target,
                max_sigma: sigma_lo,
            });
        }
    }

    // Bisect; the bracket always satisfies σ(lo) < target < σ(hi).
    for _ in 0..200 {
        let mid = 0.5 * (gamma_lo + gamma_hi);
        let (s, sol) = eval(mid)?;
        if s < sigma_lo - allowance || s > sigma_hi + allowance {
            return Err(FrontierError::MonotonicityViolation {
                gamma_lo,
                gamma_hi: mid,
                sigma_lo,
                sigma_hi: s,
                allowance,
            });
        }
        if done(s) {
            return Ok(TargetVolSolution {
                solution: sol,
                gamma: Some(mid),
                sigma: s,
            });
        }
        if s < sigma_target {
            gamma_lo = mid;
            sigma_lo = s;
        } else {
            gamma_hi = mid;
            sigma_hi = s;
            sol_hi = sol;
        }
    }
    let _ = sol_hi;
    Err(FrontierError::BisectionStalled {
        gamma_lo,
        gamma_hi,
        gap: (sigma_hi - sigma_target).abs().min((sigma_lo - sigma_target).abs()),
    })
}

/// A sweep grid: either risk tolerances or volatility targets.
#[derive(Debug, Clone, Serialize)]
pub enum Grid {
    Gamma {
        min: f64,
        max: f64,
        count: usize,
        /// Log-spaced (requires `min > 0`) or linear.
        log_spaced: bool,
    },
    Sigma {
        min: f64,
        max: f64,
        count: usize,
    },
}

impl Grid {
    /// The default sweep: 100 log-spaced risk tolerances spanning the
    /// aggressive-to-conservative range.
    #[must_use]
    pub fn default_gamma() -> Self {
        Grid::Gamma {
            min: 1e-3,
            max: 1e2,
            count: 100,
            log_spaced: true,
        }
    }

    /// Materializes the grid values (ascending).
    pub fn values(&self) -> Result<Vec<f64>, FrontierError> {
        let (min, max, count, log_spaced) = match *self {
            Grid::Gamma {
                min,
                max,
                count,
                log_spaced,
            } => (min, max, count, log_spaced),
            Grid::Sigma { min, max, count } => (min, max, count, false),
        };
        if count == 0 {
            return Err(FrontierError::InvalidGrid("count must be positive".into()));
        }
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(FrontierError::InvalidGrid(format!(
                "range [{min}, {max}] is not ascending and finite"
            )));
        }
        if log_spaced && min <= 0.0 {
            return Err(FrontierError::InvalidGrid(format!(
                "log spacing requires a positive minimum, got {min}"
            )));
        }
        if matches!(self, Grid::Sigma { .. }) && min <= 0.0 {
            return Err(FrontierError::InvalidGrid(format!(
                "volatility targets must be positive, got {min}"
            )));
        }
        if count == 1 {
            return Ok(vec![min]);
        }
        let step = if log_spaced {
            (max / min).ln() / (count - 1) as f64
        } else {
            (max - min) / (count - 1) as f64
        };
        Ok((0..count)
            .map(|i| {
                if log_spaced {
                    min * (step * i as f64).exp()
                } else {
                    min + step * i as f64
                }
            })
            .collect())
    }
}

/// One point of the cost-aware efficient frontier, in the coordinates of
/// the renormalized book.
#[derive(Debug, Clone, Serialize)]
pub struct FrontierPoint {
    /// Risk tolerance that produced the point (absent in strict mode).
    pub gamma: Option<f64>,
    /// σ(w̄*): volatility of the renormalized book.
    pub sigma_bar: f64,
    /// μ(w̄*): gross expected return of the renormalized book.
    pub mu_gross: f64,
    /// C(w*|w̃): one rebalance's cost under the mode's model.
    pub cost_paid: f64,
    /// μ(w*) − k·C(w*|w̃): raw gross return net of k rebalances.
    pub mu_net: f64,
    /// Raw optimizer output w* (sums to the remaining wealth).
    pub weights_raw: Vec<f64>,
    /// w̄* = w*/1ᵀw*.
    pub weights_norm: Vec<f64>,
    /// 1ᵀw*.
    pub wealth: f64,
    /// Solver convergence / certification flag for the point.
    pub converged: bool,
}

/// A sweep failure, tied to its grid slot; the sweep keeps going.
#[derive(Debug, Clone, Serialize)]
pub struct FrontierFailure {
    /// Index into the grid (not into `points`).
    pub index: usize,
    /// The grid value (γ or σ target) that failed.
    pub parameter: f64,
    pub message: String,
}

/// Sweep output: points sorted by `sigma_bar`, failures on the side.
#[derive(Debug, Clone, Serialize)]
pub struct FrontierSweep {
    pub points: Vec<FrontierPoint>,
    pub failures: Vec<FrontierFailure>,
}

fn make_point(
    mode: Mode,
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    gamma: Option<f64>,
    sol: &ModeSolution,
    rebalances_per_year: u32,
) -> Result<FrontierPoint, FrontierError> {
    let wealth = sol.w_star.sum();
    let w_norm = normalize(&sol.w_star)?;
    let (mu_gross, sigma_bar) = u.portfolio_stats(&w_norm)?;
    let mu_net = match mode {
        Mode::Mvo => u.expected_return(&sol.w_star),
        Mode::Linear => net_expected_return(
            u,
            &sol.w_star,
            w_tilde,
            cs,
            CostKind::Linear,
            rebalances_per_year,
        )?,
        Mode::Quadratic | Mode::Strict => net_expected_return(
            u,
            &sol.w_star,
            w_tilde,
            cs,
            CostKind::Quadratic,
            rebalances_per_year,
        )?,
    };
    Ok(FrontierPoint {
        gamma,
        sigma_bar,
        mu_gross,
        cost_paid: sol.cost_paid,
        mu_net,
        weights_raw: sol.w_star.iter().copied().collect(),
        weights_norm: w_norm.iter().copied().collect(),
        wealth,
        converged: sol.converged,
    })
}

/// Sweeps the grid and returns the frontier in `(σ(w̄*), μ_net)` space.
///
/// Per-point solver failures are recorded and skipped; only structural
/// errors (bad grid, γ-grid in strict mode) abort the sweep.
pub fn frontier(
    mode: Mode,
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    grid: &Grid,
    rebalances_per_year: u32,
    opts: &SolverOptions,
) -> Result<FrontierSweep, FrontierError> {
    let values = grid.values()?;
    if mode == Mode::Strict && matches!(grid, Grid::Gamma { .. }) {
        return Err(FrontierError::NeedsVolatilityTarget(mode));
    }
    let mut points = Vec::with_capacity(values.len());
    let mut failures = Vec::new();
    for (index, &value) in values.iter().enumerate() {
        let attempt = match grid {
            Grid::Gamma { .. } => solve_gamma(mode, u, cs, w_tilde, value, opts)
                .and_then(|sol| {
                    make_point(mode, u, cs, w_tilde, Some(value), &sol, rebalances_per_year)
                }),
            Grid::Sigma { .. } => {
                solve_for_target_vol(mode, u, cs, w_tilde, value, DEFAULT_VOL_TOL, opts)
                    .and_then(|t| {
                        make_point(
                            mode,
                            u,
                            cs,
                            w_tilde,
                            t.gamma,
                            &t.solution,
                            rebalances_per_year,
                        )
                    })
            }
        };
        match attempt {
            Ok(p) => points.push(p),
            Err(e) => failures.push(FrontierFailure {
                index,
                parameter: value,
                message: e.to_string(),
            }),
        }
    }
    points.sort_by(|a, b| {
        a.sigma_bar
            .partial_cmp(&b.sigma_bar)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                a.gamma
                    .unwrap_or(f64::NAN)
                    .partial_cmp(&b.gamma.unwrap_or(f64::NAN))
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    });
    Ok(FrontierSweep { points, failures })
}

/// Extracts the nondominated upper envelope: after this filter both
/// `sigma_bar` and `mu_net` increase strictly, so no point dominates its
/// successor.
#[must_use]
pub fn upper_envelope(points: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let mut sorted: Vec<&FrontierPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.sigma_bar
            .partial_cmp(&b.sigma_bar)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out: Vec<FrontierPoint> = Vec::new();
    for p in sorted {
        if out.last().map_or(true, |prev| p.mu_net > prev.mu_net) {
            out.push(p.clone());
        }
    }
    out
}

/// One column of the comparison report.
#[derive(Debug, Clone, Serialize)]
pub struct CompareColumn {
    pub label: String,
    pub weights: Vec<f64>,
    /// μ(w): gross expected return.
    pub mu: f64,
    /// σ(w).
    pub sigma: f64,
    /// Proportional-model cost of moving from the current book to `w`.
    pub cost_linear: f64,
    /// Quadratic-model cost of the same move.
    pub cost_quadratic: f64,
    /// μ(w) − proportional cost.
    pub mu_net_linear: f64,
    /// μ(w) − quadratic cost.
    pub mu_net_quadratic: f64,
}

/// Side-by-side comparison of the three formulations tuned to one
/// volatility target, each stated raw and (for the cost-aware books)
/// renormalized.
#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub sigma_target: f64,
    pub gamma_mvo: f64,
    pub gamma_linear: f64,
    pub gamma_quadratic: f64,
    /// Columns: current book, cost-blind, linear-cost, quadratic-cost,
    /// then the two cost-aware books renormalized.
    pub columns: Vec<CompareColumn>,
}

fn compare_column(
    label: &str,
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    w: &DVector<f64>,
) -> CompareColumn {
    let (mu, sigma) = (u.expected_return(w), u.volatility(w));
    let cl = cost_linear(cs, w, w_tilde);
    let cq = cost_quadratic(cs, w, w_tilde);
    CompareColumn {
        label: label.to_string(),
        weights: w.iter().copied().collect(),
        mu,
        sigma,
        cost_linear: cl,
        cost_quadratic: cq,
        mu_net_linear: mu - cl,
        mu_net_quadratic: mu - cq,
    }
}

/// Bisection tolerance used by [`compare_report`]: report columns are
/// quoted to basis-point precision, which the sweep default (1e−4 in σ,
/// hence ~1e−3 slack in the flat-frontier γ) cannot guarantee.
pub const COMPARE_VOL_TOL: f64 = 1e-6;

/// Builds the comparison report at `sigma_target`, targeting each mode
/// to [`COMPARE_VOL_TOL`].
pub fn compare_report(
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    sigma_target: f64,
    opts: &SolverOptions,
) -> Result<CompareReport, FrontierError> {
    let mvo = solve_for_target_vol(Mode::Mvo, u, cs, w_tilde, sigma_target, COMPARE_VOL_TOL, opts)?;
    let lc = solve_for_target_vol(
        Mode::Linear,
        u,
        cs,
        w_tilde,
        sigma_target,
        COMPARE_VOL_TOL,
        opts,
    )?;
    let qc = solve_for_target_vol(
        Mode::Quadratic,
        u,
        cs,
        w_tilde,
        sigma_target,
        COMPARE_VOL_TOL,
        opts,
    )?;
    let lc_norm = normalize(&lc.solution.w_star)?;
    let qc_norm = normalize(&qc.solution.w_star)?;
    let columns = vec![
        compare_column("current", u, cs, w_tilde, w_tilde),
        compare_column("cost-blind", u, cs, w_tilde, &mvo.solution.w_star),
        compare_column("linear-cost", u, cs, w_tilde, &lc.solution.w_star),
        compare_column("quadratic-cost", u, cs, w_tilde, &qc.solution.w_star),
        compare_column("linear-cost (renormalized)", u, cs, w_tilde, &lc_norm),
        compare_column("quadratic-cost (renormalized)", u, cs, w_tilde, &qc_norm),
    ];
    Ok(CompareReport {
        sigma_target,
        gamma_mvo: mvo.gamma.unwrap_or(f64::NAN),
        gamma_linear: lc.gamma.unwrap_or(f64::NAN),
        gamma_quadratic: qc.gamma.unwrap_or(f64::NAN),
        columns,
    })
}
