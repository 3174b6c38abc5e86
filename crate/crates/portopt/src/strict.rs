//! Maximum-net-return rebalancing at an *exact* volatility target.
//!
//! The γ-parameterized problems trace the efficient frontier but cannot
//! pin volatility exactly; past the frontier's stall point no γ reaches
//! the target at all. The strict formulation instead solves
//!
//! ```text
//! max  xᵀR − xᵀQx        R = (μ, −c⁻, −c⁺),  Q = diag(0, Δ⁻, Δ⁺)
//! s.t. A₁x + xᵀC₁x = 1   (budget quadric)
//!      A₂x = w̃           (trade identity)
//!      wᵀΣw = σ*²         (variance sphere)
//!      bounds
//! ```
//!
//! — the objective is the *net* expected return (gross return minus both
//! cost layers), with no risk-tolerance weight and no ½ factor. Two
//! quadratic equalities make this a nonconvex QCQP, so no solver here
//! claims global optimality; what is certified is **feasibility** (both
//! quadrics within tolerance) plus local stationarity, hedged by
//! deterministic multi-start.
//!
//! The method is a three-operator consensus splitting: the QP handles the
//! objective with the linear constraints, and each quadric gets its own
//! copy variable and scalar-secular projection — the budget surface via
//! [`crate::projection`], the variance sphere via the eigendecomposition
//! of `Σ` (both are single-constraint projections with one multiplier).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linear::{
    solve_markowitz, stacked_bounds, trade_identity_constraints, BoundsPolicy, LinearError,
};
use crate::market::{cost_quadratic_split, split_trades, CostSpec, TradeSplit, Universe};
use crate::projection::{project, ProjectionError, ProjectionInput};
use crate::qp::{default_max_iter, solve_qp_from, QpError, QpProblem, QpStatus, DEFAULT_TOL};

/// Feasibility certification threshold on both quadric residuals.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Errors from assembly or the strict solver.
#[derive(Debug, Error)]
pub enum StrictError {
    /// Vector/matrix dimensions disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// The volatility target lies outside what long-only portfolios of
    /// this universe can realize.
    #[error(
        "volatility target {requested:.6} outside attainable range \
         [{min_vol:.6}, {max_vol:.6}]"
    )]
    SigmaOutOfRange {
        requested: f64,
        min_vol: f64,
        max_vol: f64,
    },
    /// A current weight falls outside the long-only box.
    #[error("current weight {1} of asset {0} outside [0, 1]")]
    WeightOutOfRange(usize, f64),
    /// Determining the attainable range needs a minimum-variance solve.
    #[error("minimum-variance probe failed: {0}")]
    RangeProbe(#[from] LinearError),
    /// Structural problem rejected by the QP layer.
    #[error(transparent)]
    Qp(#[from] QpError),
    /// The x-update QP did not reach optimality.
    #[error("x-update failed at iteration {iteration}: QP status {status:?}")]
    XUpdateFailed { iteration: usize, status: QpStatus },
    /// The budget projection failed.
    #[error("budget projection failed at iteration {iteration}: {source}")]
    BudgetProjectionFailed {
        iteration: usize,
        source: ProjectionError,
    },
    /// The covariance block cannot reach the requested variance level
    /// (e.g. a zero matrix), so the sphere is empty.
    #[error("variance sphere unreachable: largest eigenvalue {0:.3e} is not positive")]
    SphereEmpty(f64),
    /// Options are out of range.
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

/// The assembled strict program.
#[derive(Debug, Clone)]
pub struct StrictAssembly {
    /// Objective curvature `diag(0, Δ⁻, Δ⁺)` — note: *not* the covariance,
    /// which lives only in the variance constraint.
    pub q: DMatrix<f64>,
    /// Objective linear term `(μ, −c⁻, −c⁺)` (maximized).
    pub r: DVector<f64>,
    /// Budget row `(1ₙ, c⁻, c⁺)`.
    pub a1: DVector<f64>,
    pub b1: f64,
    /// Trade identity rows.
    pub a2: DMatrix<f64>,
    pub b2: DVector<f64>,
    /// Diagonal of the budget quadric `C₁ = diag(0, Δ⁻, Δ⁺)`.
    pub c1_diag: DVector<f64>,
    /// Covariance block of `C₃` (the variance quadric touches only `w`).
    pub c3_cov: DMatrix<f64>,
    /// Variance target `σ*²`.
    pub b3: f64,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub cs: CostSpec,
    n: usize,
}

impl StrictAssembly {
    /// Number of assets.
    #[must_use]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Budget-quadric residual `A₁x + xᵀC₁x − B₁`.
    #[must_use]
    pub fn budget_residual(&self, x: &DVector<f64>) -> f64 {
        let mut acc = -self.b1;
        for i in 0..x.len() {
            acc += self.a1[i] * x[i] + self.c1_diag[i] * x[i] * x[i];
        }
        acc
    }

    /// Variance-sphere residual `wᵀΣw − B₃` of a stacked point.
    #[must_use]
    pub fn variance_residual(&self, x: &DVector<f64>) -> f64 {
        let w = x.rows(0, self.n).into_owned();
        (&self.c3_cov * &w).dot(&w) - self.b3
    }

    /// Net expected return `xᵀR − xᵀQx` (the maximized objective).
    #[must_use]
    pub fn net_return(&self, x: &DVector<f64>) -> f64 {
        self.r.dot(x) - (&self.q * x).dot(x)
    }

    /// Extracts the portfolio block.
    #[must_use]
    pub fn extract_weights(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.n).into_owned()
    }

    /// Extracts the trade blocks.
    #[must_use]
    pub fn extract_trades(&self, x: &DVector<f64>) -> TradeSplit {
        TradeSplit {
            dw_minus: x.rows(self.n, self.n).into_owned(),
            dw_plus: x.rows(2 * self.n, self.n).into_owned(),
        }
    }
}

/// Assembles the strict program, rejecting unattainable targets.
///
/// The attainable long-only range is `[σ_min, max᷈ᵢ vol᷈ᵢ]`: the lower end is
/// the minimum-variance portfolio's volatility, the upper end a full
/// position in the single most volatile asset.
pub fn assemble_strict(
    u: &Universe,
    cs: &CostSpec,
    w_tilde: &DVector<f64>,
    sigma_star: f64,
) -> Result<StrictAssembly, StrictError> {
    let n = u.n();
    if cs.n() != n || w_tilde.len() != n {
        return Err(StrictError::DimensionMismatch(format!(
            "universe: {n}, costs: {}, current weights: {}",
            cs.n(),
            w_tilde.len()
        )));
    }
    for (i, &wi) in w_tilde.iter().enumerate() {
        if !(-1e-12..=1.0 + 1e-12).contains(&wi) {
            return Err(StrictError::WeightOutOfRange(i, wi));
        }
    }
    let w_min = solve_markowitz(u, 0.0, true)?;
    let min_vol = u.volatility(&w_min);
    let max_vol = u.vols().max();
    if !(sigma_star.is_finite() && sigma_star > 0.0)
        || sigma_star < min_vol - 1e-12
        || sigma_star > max_vol + 1e-12
    {
        return Err(StrictError::SigmaOutOfRange {
            requested: sigma_star,
            min_vol,
            max_vol,
        });
    }

    let mut q = DMatrix::zeros(3 * n, 3 * n);
    let mut r = DVector::zeros(3 * n);
    let mut a1 = DVector::zeros(3 * n);
    let mut c1_diag = DVector::zeros(3 * n);
    for i in 0..n {
        q[(n + i, n + i)] = cs.delta_minus[i];
        q[(2 * n + i, 2 * n + i)] = cs.delta_plus[i];
        r[i] = u.mu()[i];
        r[n + i] = -cs.c_minus[i];
        r[2 * n + i] = -cs.c_plus[i];
        a1[i] = 1.0;
        a1[n + i] = cs.c_minus[i];
        a1[2 * n + i] = cs.c_plus[i];
        c1_diag[n + i] = cs.delta_minus[i];
        c1_diag[2 * n + i] = cs.delta_plus[i];
    }
    let (a2, b2) = trade_identity_constraints(w_tilde);
    let (lower, upper) = stacked_bounds(w_tilde, &BoundsPolicy::default());
    Ok(StrictAssembly {
        q,
        r,
        a1,
        b1: 1.0,
        a2,
        b2,
        c1_diag,
        c3_cov: u.cov().clone(),
        b3: sigma_star * sigma_star,
        lower,
        upper,
        cs: cs.clone(),
        n,
    })
}

/// Precomputed eigenstructure of the variance sphere `wᵀΣw = B₃`.
struct VarianceSphere {
    /// Eigenvector columns of `Σ`.
    basis: DMatrix<f64>,
    /// Matching eigenvalues (unsorted, as produced).
    lambda: DVector<f64>,
    /// Index of (the first occurrence of) the largest eigenvalue.
    max_idx: usize,
    b3: f64,
}

impl VarianceSphere {
    fn new(cov: &DMatrix<f64>, b3: f64) -> Result<Self, StrictError> {
        let eig = cov.clone().symmetric_eigen();
        let lambda_max = eig.eigenvalues.max();
        if !(lambda_max > 0.0) {
            return Err(StrictError::SphereEmpty(lambda_max));
        }
        let max_idx = (0..eig.eigenvalues.len())
            .find(|&i| eig.eigenvalues[i] >= lambda_max * (1.0 - 1e-12))
            .expect("max eigenvalue exists");
        Ok(Self {
            basis: eig.eigenvectors,
            lambda: eig.eigenvalues,
            max_idx,
            b3,
        })
    }

    /// `g(θ) = Σᵢ λᵢ ṽᵢ² / (1 + 2θλᵢ)² − B₃`, strictly decreasing on the
    /// domain `(−1/(2λ_max), ∞)`.
    fn secular(&self, v_tilde: &DVector<f64>, theta: f64) -> f64 {
        let mut acc = -self.b3;
        for i in 0..self.lambda.len() {
            let li = self.lambda[i];
            if li.abs() < 1e-300 {
                continue;
            }
            let den = 1.0 + 2.0 * theta * li;
            acc += li * (v_tilde[i] / den).powi(2);
        }
        acc
    }

    /// Nearest point on the sphere to `v_w`; the flag marks the degenerate
    /// branch where the multiplier sits on the domain boundary and one
    /// component is chosen by convention (deterministically).
    fn project(&self, v_w: &DVector<f64>) -> (DVector<f64>, bool) {
        let v_tilde = self.basis.transpose() * v_w;
        let lambda_max = self.lambda[self.max_idx];
        let pole = -1.0 / (2.0 * lambda_max);

        // Energy in the top eigenspace decides whether the secular
        // equation blows up at the pole (regular case) or stays bounded
        // (degenerate case: v orthogonal to the top eigenspace).
        let top_energy: f64 = (0..self.lambda.len())
            .filter(|&i| self.lambda[i] >= lambda_max * (1.0 - 1e-12))
            .map(|i| v_tilde[i].powi(2))
            .sum();
        let scale = 1.0 + v_tilde.norm_squared();

        if top_energy <= 1e-24 * scale {
            // Boundary solution: fix θ at the pole, keep the regular
            // components, and spend the variance deficit on the first top
            // eigenvector (sign +, by convention).
            let mut y_tilde = DVector::zeros(self.lambda.len());
            let mut used = 0.0;
            for i in 0..self.lambda.len() {
                if self.lambda[i] >= lambda_max * (1.0 - 1e-12) {
                    continue;
                }
                let den = 1.0 + 2.0 * pole * self.lambda[i];
                y_tilde[i] = v_tilde[i] / den;
                y_tilde[i] = if den.abs() < 1e-300 { 0.0 } else { y_tilde[i] };
                used += self.lambda[i] * y_tilde[i] * y_tilde[i];
            }
            let deficit = (self.b3 - used).max(0.0);
            y_tilde[self.max_idx] = (deficit / lambda_max).sqrt();
            return (&self.basis * y_tilde, true);
        }

        // Regular case: bracket the unique in-domain root and bisect.
        let (mut lo, mut hi);
        if self.secular(&v_tilde, 0.0) >= 0.0 {
            lo = 0.0;
            hi = 1.0;
            while self.secular(&v_tilde, hi) > 0.0 {
                hi *= 2.0;
            }
        } else {
            hi = 0.0;
            let mut gap = -pole;
            loop {
                gap *= 0.5;
                let cand = pole + gap;
                if self.secular(&v_tilde, cand) >= 0.0 {
                    lo = cand;
                    break;
                }
                hi = cand;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.secular(&v_tilde, mid) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo).abs() <= f64::EPSILON * (1.0 + mid.abs()) {
                break;
            }
        }
        let theta = 0.5 * (lo + hi);
        let mut y_tilde = DVector::zeros(self.lambda.len());
        for i in 0..self.lambda.len() {
            y_tilde[i] = v_tilde[i] / (1.0 + 2.0 * theta * self.lambda[i]);
        }
        (&self.basis * y_tilde, false)
    }
}

/// Projects a stacked point onto `{x : wᵀΣw = B₃}`: only the `w` block
/// moves, the trade blocks are untouched by the constraint. The flag
/// marks the degenerate branch (center-of-sphere inputs), where the
/// result is a deterministic convention rather than a unique nearest
/// point.
pub fn project_variance_sphere(
    v: &DVector<f64>,
    cov: &DMatrix<f64>,
    b3: f64,
) -> Result<(DVector<f64>, bool), StrictError> {
    let n = cov.nrows();
    if v.len() != 3 * n {
        return Err(StrictError::DimensionMismatch(format!(
            "stacked point has {} entries for {n} assets",
            v.len()
        )));
    }
    let sphere = VarianceSphere::new(cov, b3)?;
    let (w, degenerate) = sphere.project(&v.rows(0, n).into_owned());
    let mut out = v.clone();
    out.rows_mut(0, n).copy_from(&w);
    Ok((out, degenerate))
}

/// Solver knobs; `starts` deterministic multi-start runs hedge against
/// the nonconvex landscape.
#[derive(Debug, Clone)]
pub struct StrictOptions {
    pub phi: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Number of starting points (1 = holdings only; up to 5 adds the
    /// equal-weight start and three seeded perturbations).
    pub starts: usize,
}

impl Default for StrictOptions {
    fn default() -> Self {
        Self {
            phi: 1.0,
            eps_abs: 1e-8,
            eps_rel: 1e-6,
            max_iter: 5000,
            starts: 5,
        }
    }
}

/// Outcome classification: the solver never claims global optimality.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub enum StrictStatus {
    /// Both quadric residuals within [`FEASIBILITY_TOL`] at a stationary
    /// point (locally optimal at best; globality is not certified).
    FeasibilityCertified,
    /// Best iterate exceeded the tolerance on at least one constraint.
    NotConverged,
}

/// Result of a strict solve.
#[derive(Debug, Clone)]
pub struct StrictSolution {
    pub w_star: DVector<f64>,
    pub trade: TradeSplit,
    pub status: StrictStatus,
    /// Net expected return `xᵀR − xᵀQx` at the returned point.
    pub net_return: f64,
    /// Quadratic-model cost at the returned point.
    pub cost_paid: f64,
    /// `|A₁x + xᵀC₁x − 1|` at the returned point.
    pub budget_residual: f64,
    /// `|wᵀΣw − σ*²|` at the returned point.
    pub variance_residual: f64,
    /// Index of the winning start (0 = holdings).
    pub best_start: usize,
    /// Iterations used by the winning run.
    pub iterations: usize,
    /// Degenerate variance projections encountered across all runs.
    pub degenerate_projections: usize,
}

/// Solves the strict problem by multi-start consensus splitting.
pub fn solve_strict(
    asm: &StrictAssembly,
    opts: &StrictOptions,
) -> Result<StrictSolution, StrictError> {
    if !(opts.phi.is_finite() && opts.phi > 0.0) {
        return Err(StrictError::InvalidOption(format!("phi = {}", opts.phi)));
    }
    if opts.starts == 0 || opts.starts > 64 {
        return Err(StrictError::InvalidOption(format!(
            "starts = {}",
            opts.starts
        )));
    }
    if opts.max_iter == 0 {
        return Err(StrictError::InvalidOption("max_iter = 0".into()));
    }

    let sphere = VarianceSphere::new(&asm.c3_cov, asm.b3)?;
    let starts = starting_points(asm, opts.starts);

    let mut best: Option<(StrictSolution, bool)> = None;
    let mut total_degenerate = 0;
    for (s, x0) in starts.into_iter().enumerate() {
        let run = run_consensus(asm, &sphere, opts, x0)?;
        total_degenerate += run.degenerate_projections;
        let certified = run.budget_residual <= FEASIBILITY_TOL
            && run.variance_residual <= FEASIBILITY_TOL;
        let candidate = StrictSolution {
            best_start: s,
            ..run
        };
        let better = match &best {
            None => true,
            Some((b, b_cert)) => match (certified, b_cert) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => candidate.net_return > b.net_return,
                (false, false) => {
                    candidate.budget_residual.max(candidate.variance_residual)
                        < b.budget_residual.max(b.variance_residual)
                }
            },
        };
        if better {
            best = Some((candidate, certified));
        }
    }
    let (mut sol, certified) = best.expect("at least one start");
    sol.status = if certified {
        StrictStatus::FeasibilityCertified
    } else {
        StrictStatus::NotConverged
    };
    sol.degenerate_projections = total_degenerate;
    Ok(sol)
}

/// Deterministic starting stack: holdings, equal weights, then seeded
/// random long-only books, all with split-consistent trade blocks.
fn starting_points(asm: &StrictAssembly, count: usize) -> Vec<DVector<f64>> {
    let n = asm.n;
    let w_tilde = asm.b2.clone();
    let mut out = Vec::with_capacity(count);
    let stack = |w: &DVector<f64>| -> DVector<f64> {
        let split = split_trades(w, &w_tilde);
        let mut x = DVector::zeros(3 * n);
        x.rows_mut(0, n).copy_from(w);
        x.rows_mut(n, n).copy_from(&split.dw_minus);
        x.rows_mut(2 * n, n).copy_from(&split.dw_plus);
        x
    };
    out.push(stack(&w_tilde));
    if count > 1 {
        out.push(stack(&DVector::from_element(n, 1.0 / n as f64)));
    }
    for seed in 0..count.saturating_sub(2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 + 1);
        let mut w = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
        let total = w.sum();
        if total > 1e-9 {
            w /= total;
        } else {
            w.fill(1.0 / n as f64);
        }
        out.push(stack(&w));
    }
    out
}

fn run_consensus(
    asm: &StrictAssembly,
    sphere: &VarianceSphere,
    opts: &StrictOptions,
    x0: DVector<f64>,
) -> Result<StrictSolution, StrictError> {
    let n = asm.n;
    let m = 3 * n;
    let phi = opts.phi;

    // Objective min −xᵀR + xᵀQx + proximal terms ⇒ ½xᵀ(2Q+2φI)x − xᵀ(…).
    let mut q = asm.q.clone() * 2.0;
    for i in 0..m {
        q[(i, i)] += 2.0 * phi;
    }
    let mut prob = QpProblem::new(
        q,
        DVector::zeros(m),
        asm.a2.clone(),
        asm.b2.clone(),
        asm.lower.clone(),
        asm.upper.clone(),
    )?;

    let mut x = x0.clone();
    let mut y = x0.clone();
    let mut z = x0;
    let mut uy = DVector::zeros(m);
    let mut uz = DVector::zeros(m);
    let mut proj_in = ProjectionInput::from_stacked(&y, &asm.cs).map_err(|source| {
        StrictError::BudgetProjectionFailed {
            iteration: 0,
            source,
        }
    })?;

    let qp_iter_cap = default_max_iter(m);
    let sqrt_2m = ((2 * m) as f64).sqrt();
    let mut degenerate_projections = 0usize;
    let mut iterations = 0usize;

    for k in 0..opts.max_iter {
        // x-update.
        prob.r.copy_from(&asm.r);
        prob.r.axpy(phi, &y, 1.0);
        prob.r.axpy(-phi, &uy, 1.0);
        prob.r.axpy(phi, &z, 1.0);
        prob.r.axpy(-phi, &uz, 1.0);
        let sol = solve_qp_from(&prob, DEFAULT_TOL, qp_iter_cap, Some(&x));
        if sol.status != QpStatus::Optimal {
            return Err(StrictError::XUpdateFailed {
                iteration: k,
                status: sol.status,
            });
        }
        x = sol.x;

        // y-update: budget quadric.
        for i in 0..n {
            proj_in.v[i] = x[i] + uy[i];
            proj_in.dv_minus[i] = x[n + i] + uy[n + i];
            proj_in.dv_plus[i] = x[2 * n + i] + uy[2 * n + i];
        }
        let proj =
            project(&proj_in).map_err(|source| StrictError::BudgetProjectionFailed {
                iteration: k,
                source,
            })?;
        let y_new = proj.y;

        // z-update: variance sphere (w block only).
        let vz = &x + &uz;
        let (wz, degenerate) = sphere.project(&vz.rows(0, n).into_owned());
        if degenerate {
            degenerate_projections += 1;
        }
        let mut z_new = vz;
        z_new.rows_mut(0, n).copy_from(&wz);

        let dual = phi
            * ((&y_new - &y).norm_squared() + (&z_new - &z).norm_squared()).sqrt();
        y = y_new;
        z = z_new;
        uy += &x - &y;
        uz += &x - &z;
        let primal = ((&x - &y).norm_squared() + (&x - &z).norm_squared()).sqrt();
        iterations = k + 1;

        let x_norm = x.norm();
        let yz_norm = (y.norm_squared() + z.norm_squared()).sqrt();
        let eps_pri = sqrt_2m * opts.eps_abs
            + opts.eps_rel * (std::f64::consts::SQRT_2 * x_norm).max(yz_norm);
        let eps_dual = sqrt_2m * opts.eps_abs
            + opts.eps_rel * phi * (uy.norm_squared() + uz.norm_squared()).sqrt();
        if primal <= eps_pri && dual <= eps_dual {
            break;
        }
    }

    let w_star = asm.extract_weights(&x);
    let trade = asm.extract_trades(&x);
    let cost_paid = cost_quadratic_split(&asm.cs, &trade);
    Ok(StrictSolution {
        net_return: asm.net_return(&x),
        budget_residual: asm.budget_residual(&x).abs(),
        variance_residual: asm.variance_residual(&x).abs(),
        w_star,
        trade,
        cost_paid,
        status: StrictStatus::NotConverged, // classified by the caller
        best_start: 0,
        iterations,
        degenerate_projections,
    })
}
