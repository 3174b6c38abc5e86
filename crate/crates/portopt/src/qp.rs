//! Dense convex quadratic programming:
//!
//! ```text
//! minimize   ½ xᵀQx − xᵀR
//! subject to A x = B,   lower ≤ x ≤ upper
//! ```
//!
//! with `Q` symmetric positive semi-definite, `A` of modest row count, and
//! bounds that may be infinite. The solver is a primal active-set method
//! over the box constraints: equality constraints stay in a KKT system
//! throughout, while bound constraints enter and leave a working set. Each
//! iteration solves one equality-constrained subproblem, which at desk
//! scale (a few dozen variables) costs one dense factorization.
//!
//! Design notes:
//!
//! * Singular reduced Hessians are routine here — augmented portfolio
//!   assemblies carry zero diagonal blocks — so KKT subsystems are solved
//!   in a least-squares sense through a symmetric eigendecomposition, with
//!   a Cholesky fast path when the reduced Hessian is positive definite.
//! * A rank-deficient `A` is reduced up front: redundant consistent rows
//!   are dropped via SVD; inconsistent rows make the problem infeasible.
//! * Feasibility of the starting point is established by a phase-1 solve
//!   of `min ½‖Ax − B‖²` over the box, reusing the same engine.
//! * Unbounded descent (possible only when the box fails to close a zero-
//!   curvature direction) terminates with [`QpStatus::IterationLimit`] and
//!   the best iterate found; none of the portfolio assemblies in this
//!   crate can reach that state.
//!
//! Identical inputs take identical code paths with no randomness or
//! data-dependent threading, so repeated solves are bitwise reproducible.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

/// Default convergence tolerance: KKT stationarity, primal feasibility,
/// and multiplier sign checks all use this scale. Kept tight because the
/// operator-splitting layers call this solver hundreds of times and inner
/// sloppiness pollutes their residuals.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Default iteration budget for an `m`-variable problem.
#[must_use]
pub fn default_max_iter(m: usize) -> usize {
    10 * m + 100
}

/// Relative threshold below which a singular value of `A` counts as zero
/// during the row-rank reduction.
const RANK_EPS: f64 = 1e-12;

/// Relative threshold below which an eigenvalue of a KKT matrix counts as
/// zero in the least-squares subproblem solves.
const EIG_EPS: f64 = 1e-12;

/// Relative size of the out-of-range component of a KKT right-hand side
/// above which the subproblem is declared inconsistent (an unbounded ray).
const RAY_EPS: f64 = 1e-8;

/// Errors raised for structurally malformed problems. Infeasibility and
/// iteration exhaustion are *statuses*, not errors.
#[derive(Debug, Error)]
pub enum QpError {
    /// Matrix/vector dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// `Q` deviates from symmetry beyond rounding noise.
    #[error("Q is not symmetric: max |Q − Qᵀ| = {0:.3e}")]
    NotSymmetric(f64),
    /// Bounds are inverted or NaN.
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    /// A matrix or vector entry that must be finite is not.
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    /// The direct KKT system of an equality-only problem is singular.
    #[error("equality-constrained KKT system is singular")]
    SingularKkt,
}

/// A box- and equality-constrained quadratic program.
///
/// `lower`/`upper` entries may be `±∞` for unbounded coordinates; an entry
/// pair with `lower == upper` pins that variable.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub r: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Validates dimensions, symmetry of `Q`, finiteness, and bound order.
    pub fn new(
        q: DMatrix<f64>,
        r: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, QpError> {
        let m = r.len();
        if m == 0 {
            return Err(QpError::DimensionMismatch("zero-variable problem".into()));
        }
        if q.nrows() != m || q.ncols() != m {
            return Err(QpError::DimensionMismatch(format!(
                "Q is {}x{} for {m} variables",
                q.nrows(),
                q.ncols()
            )));
        }
        if a.ncols() != m && a.nrows() != 0 {
            return Err(QpError::DimensionMismatch(format!(
                "A has {} columns for {m} variables",
                a.ncols()
            )));
        }
        if b.len() != a.nrows() {
            return Err(QpError::DimensionMismatch(format!(
                "B has {} entries for {} equality rows",
                b.len(),
                a.nrows()
            )));
        }
        if lower.len() != m || upper.len() != m {
            return Err(QpError::DimensionMismatch("bounds length".into()));
        }
        for (name, v) in [("R", &r), ("B", &b)] {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(QpError::NonFinite(if name == "R" { "R" } else { "B" }));
            }
        }
        if !q.iter().all(|x| x.is_finite()) {
            return Err(QpError::NonFinite("Q"));
        }
        if !a.iter().all(|x| x.is_finite()) {
            return Err(QpError::NonFinite("A"));
        }
        let mut max_asym: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..m {
            for j in i..m {
                max_abs = max_abs.max(q[(i, j)].abs());
                max_asym = max_asym.max((q[(i, j)] - q[(j, i)]).abs());
            }
        }
        if max_asym > 1e-8 * (1.0 + max_abs) {
            return Err(QpError::NotSymmetric(max_asym));
        }
        for i in 0..m {
            let (l, u) = (lower[i], upper[i]);
            if l.is_nan() || u.is_nan() {
                return Err(QpError::InvalidBounds(format!("NaN bound at index {i}")));
            }
            if l > u {
                return Err(QpError::InvalidBounds(format!(
                    "lower {l} > upper {u} at index {i}"
                )));
            }
        }
        Ok(Self {
            q,
            r,
            a,
            b,
            lower,
            upper,
        })
    }

    /// Number of decision variables.
    #[must_use]
    pub fn n(&self) -> usize {
        self.r.len()
    }
}

/// Terminal state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    /// KKT conditions hold to tolerance.
    Optimal,
    /// The equality constraints are inconsistent with the box.
    Infeasible,
    /// The iteration budget ran out (or descent was unbounded); `x` is the
    /// best iterate reached.
    IterationLimit,
}

/// Result of a solve. When `status` is [`QpStatus::Optimal`], `x` satisfies
/// the equality constraints and bounds to within the feasibility check and
/// `kkt_residual` bounds the worst KKT violation (stationarity, primal
/// feasibility, and multiplier sign combined).
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Objective value `½xᵀQx − xᵀR`.
#[must_use]
pub fn objective(q: &DMatrix<f64>, r: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * (x.transpose() * q * x)[(0, 0)] - r.dot(x)
}

/// Solves the program with the default tolerance and iteration budget.
#[must_use]
pub fn solve_qp_default(prob: &QpProblem) -> QpSolution {
    solve_qp(prob, DEFAULT_TOL, default_max_iter(prob.n()))
}

/// Solves the program by the primal active-set method.
///
/// `tol` governs the stationarity and multiplier checks; `max_iter` caps
/// active-set iterations (phase 1 gets the same budget separately).
#[must_use]
pub fn solve_qp(prob: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
    solve_qp_from(prob, tol, max_iter, None)
}

/// As [`solve_qp`], but optionally warm-started: when `start` is feasible
/// for the equality constraints, phase 1 is skipped and the active set is
/// seeded from the bounds active at `start`. Used by the splitting solvers
/// whose consecutive subproblems differ only in the linear term.
#[must_use]
pub(crate) fn solve_qp_from(
    prob: &QpProblem,
    tol: f64,
    max_iter: usize,
    start: Option<&DVector<f64>>,
) -> QpSolution {
    let m = prob.n();

    // --- Reduce A to full row rank; detect inconsistent equalities. ---
    let b_scale = 1.0 + prob.b.amax();
    let (a_red, b_red, consistent) = reduce_equalities(&prob.a, &prob.b);
    if !consistent {
        let x = clamp_to_box(
            &start.cloned().unwrap_or_else(|| DVector::zeros(m)),
            &prob.lower,
            &prob.upper,
        );
        return package(
            prob,
            &a_red,
            x,
            &DVector::zeros(a_red.nrows()),
            0,
            QpStatus::Infeasible,
        );
    }

    let engine = Engine {
        q: &prob.q,
        r: &prob.r,
        a: &a_red,
        b: &b_red,
        lower: &prob.lower,
        upper: &prob.upper,
        tol,
    };

    // --- Phase 1: a feasible point for {Ax = B} ∩ box. ---
    let x0 = clamp_to_box(
        &start.cloned().unwrap_or_else(|| DVector::zeros(m)),
        &prob.lower,
        &prob.upper,
    );
    let mut iterations = 0;
    let x_feas = if a_red.nrows() == 0 || eq_residual(&a_red, &b_red, &x0) <= 1e-10 * b_scale {
        x0
    } else {
        let q1 = a_red.transpose() * &a_red;
        let r1 = a_red.transpose() * &b_red;
        let empty_a = DMatrix::<f64>::zeros(0, m);
        let empty_b = DVector::<f64>::zeros(0);
        let ph1 = Engine {
            q: &q1,
            r: &r1,
            a: &empty_a,
            b: &empty_b,
            lower: &prob.lower,
            upper: &prob.upper,
            tol,
        }
        .run(x0, max_iter);
        iterations += ph1.iterations;
        let resid = eq_residual(&a_red, &b_red, &ph1.x);
        if resid > 1e3 * tol * b_scale {
            // The box keeps every point away from the equality manifold.
            return package(
                prob,
                &a_red,
                ph1.x,
                &DVector::zeros(a_red.nrows()),
                iterations,
                QpStatus::Infeasible,
            );
        }
        ph1.x
    };

    // --- Phase 2: optimize over the working set. ---
    let out = engine.run(x_feas, max_iter);
    iterations += out.iterations;
    let status = if out.converged {
        QpStatus::Optimal
    } else {
        QpStatus::IterationLimit
    };
    let mut sol = package(prob, &a_red, out.x, &out.nu, iterations, status);
    // Honor the contract that Optimal implies a small KKT defect. The
    // threshold is relative to the data magnitude: the stationarity part
    // of the defect scales with Q and R, so a b-only scale would demote
    // backward-stable solutions of badly scaled problems (e.g. huge
    // proximal penalties).
    let data_scale = b_scale + prob.r.amax() + prob.q.amax();
    if sol.status == QpStatus::Optimal && sol.kkt_residual > 1e-6 * data_scale {
        sol.status = QpStatus::IterationLimit;
    }
    sol
}

/// Direct dense solve of the equality-only KKT system
/// `[Q Aᵀ; A 0]·(x, ν) = (R, B)` — the closed-form route used to
/// cross-check the iterative solver. Fails on singular systems.
pub fn solve_equality_kkt(
    q: &DMatrix<f64>,
    r: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let m = r.len();
    let p = a.nrows();
    if q.nrows() != m || q.ncols() != m || (p > 0 && a.ncols() != m) || b.len() != p {
        return Err(QpError::DimensionMismatch("KKT assembly".into()));
    }
    let mut k = DMatrix::zeros(m + p, m + p);
    k.view_mut((0, 0), (m, m)).copy_from(q);
    if p > 0 {
        k.view_mut((0, m), (m, p)).copy_from(&a.transpose());
        k.view_mut((m, 0), (p, m)).copy_from(a);
    }
    let mut rhs = DVector::zeros(m + p);
    rhs.rows_mut(0, m).copy_from(r);
    if p > 0 {
        rhs.rows_mut(m, p).copy_from(b);
    }
    let sol = k.lu().solve(&rhs).ok_or(QpError::SingularKkt)?;
    Ok((sol.rows(0, m).into_owned(), sol.rows(m, p).into_owned()))
}

// --------------------------------------------------------------------------
// Internals
// --------------------------------------------------------------------------

fn clamp_to_box(x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].max(lower[i]).min(upper[i]))
}

fn eq_residual(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    if a.nrows() == 0 {
        0.0
    } else {
        (a * x - b).amax()
    }
}

/// Replaces a rank-deficient equality system by an equivalent full-row-rank
/// one through the SVD `A = UΣVᵀ`: rows become `Σᵣ Vᵣᵀ x = Uᵣᵀ B`. Returns
/// `(Ã, B̃, consistent)`; full-rank systems pass through untouched so the
/// common path stays exact.
fn reduce_equalities(a: &DMatrix<f64>, b: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, bool) {
    let p = a.nrows();
    let m = a.ncols();
    if p == 0 {
        return (a.clone(), b.clone(), true);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_EPS * smax.max(f64::MIN_POSITIVE))
        .count();
    if rank == p {
        return (a.clone(), b.clone(), true);
    }
    let u = svd.u.as_ref().expect("SVD computed with u");
    let v_t = svd.v_t.as_ref().expect("SVD computed with v_t");
    // Consistency: B must lie in the range of A, i.e. the component of B
    // along the null rows of Uᵀ must vanish.
    let utb = u.transpose() * b;
    let b_scale = 1.0 + b.amax();
    for i in rank..utb.len() {
        if utb[i].abs() > 1e-9 * b_scale {
            return (a.clone(), b.clone(), false);
        }
    }
    let mut a_red = DMatrix::zeros(rank, m);
    let mut b_red = DVector::zeros(rank);
    for i in 0..rank {
        let s = svd.singular_values[i];
        for j in 0..m {
            a_red[(i, j)] = s * v_t[(i, j)];
        }
        b_red[i] = utb[i];
    }
    (a_red, b_red, true)
}

/// Minimum-norm least-squares solve of a symmetric system via
/// eigendecomposition. Returns the solution and the component of `rhs`
/// outside the matrix's range (zero iff the system is consistent).
fn sym_lstsq(k: &DMatrix<f64>, rhs: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = k.nrows();
    if n == 0 {
        return (DVector::zeros(0), DVector::zeros(0));
    }
    let eig = k.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().fold(0.0f64, |acc, &l| acc.max(l.abs()));
    let eps = EIG_EPS * lam_max.max(1.0);
    let proj = eig.eigenvectors.transpose() * rhs;
    let mut sol_c = DVector::zeros(n);
    let mut null_c = DVector::zeros(n);
    for i in 0..n {
        if eig.eigenvalues[i].abs() > eps {
            sol_c[i] = proj[i] / eig.eigenvalues[i];
        } else {
            null_c[i] = proj[i];
        }
    }
    (&eig.eigenvectors * sol_c, &eig.eigenvectors * null_c)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Active {
    Free,
    Lower,
    Upper,
    /// `lower == upper`: pinned for the whole solve.
    Fixed,
}

struct RunOutcome {
    x: DVector<f64>,
    nu: DVector<f64>,
    iterations: usize,
    converged: bool,
}

struct Engine<'p> {
    q: &'p DMatrix<f64>,
    r: &'p DVector<f64>,
    a: &'p DMatrix<f64>,
    b: &'p DVector<f64>,
    lower: &'p DVector<f64>,
    upper: &'p DVector<f64>,
    tol: f64,
}

/// Outcome of one equality-constrained subproblem solve.
enum SubStep {
    /// Finite Newton step for the free variables plus equality multipliers.
    Step(DVector<f64>, DVector<f64>),
    /// Zero-curvature descent ray (the subproblem has no finite minimizer).
    Ray(DVector<f64>),
}

impl Engine<'_> {
    fn run(&self, start: DVector<f64>, max_iter: usize) -> RunOutcome {
        let m = start.len();
        let p = self.a.nrows();
        let mut x = clamp_to_box(&start, self.lower, self.upper);
        let mut active: Vec<Active> = (0..m)
            .map(|i| {
                let (l, u) = (self.lower[i], self.upper[i]);
                if l == u {
                    x[i] = l;
                    Active::Fixed
                } else if l.is_finite() && x[i] - l <= 1e-12 * (1.0 + l.abs()) {
                    x[i] = l;
                    Active::Lower
                } else if u.is_finite() && u - x[i] <= 1e-12 * (1.0 + u.abs()) {
                    x[i] = u;
                    Active::Upper
                } else {
                    Active::Free
                }
            })
            .collect();
        let mut nu = DVector::zeros(p);
        // Consecutive iterations without movement; a guard against stalls on
        // degenerate vertices.
        let mut null_steps = 0usize;

        for it in 0..max_iter {
            // Pin working-set variables exactly to their bounds so drift
            // cannot accumulate across iterations.
            for i in 0..m {
                match active[i] {
                    Active::Lower | Active::Fixed => x[i] = self.lower[i],
                    Active::Upper => x[i] = self.upper[i],
                    Active::Free => {}
                }
            }
            let free: Vec<usize> = (0..m).filter(|&i| active[i] == Active::Free).collect();
            let f = free.len();
            let g = self.q * &x - self.r;
            let ra = if p > 0 { self.b - self.a * &x } else { DVector::zeros(0) };

            let sub = if f == 0 {
                // Everything pinned: only the multiplier estimate matters.
                SubStep::Step(DVector::zeros(0), self.multipliers_all_bound(&g))
            } else {
                self.solve_subproblem(&free, &g, &ra)
            };

            match sub {
                SubStep::Ray(d) => {
                    // The objective decreases without bound along d; walk to
                    // the nearest bound or give up if none blocks.
                    let (alpha, blocker) = self.max_step(&x, &free, &d, f64::INFINITY);
                    if !alpha.is_finite() {
                        return RunOutcome {
                            x,
                            nu,
                            iterations: it + 1,
                            converged: false,
                        };
                    }
                    apply_step(&mut x, &free, &d, alpha);
                    if let Some((i, side)) = blocker {
                        x[i] = match side {
                            Active::Lower => self.lower[i],
                            _ => self.upper[i],
                        };
                        active[i] = side;
                    }
                    null_steps = 0;
                }
                SubStep::Step(pf, nu_new) => {
                    let step_norm = if f == 0 { 0.0 } else { pf.amax() };
                    if step_norm <= self.tol * (1.0 + x.amax()) {
                        // Stationary on the working set: examine bound
                        // multipliers μ = ±(Qx − R + Aᵀν).
                        let t = if p > 0 { &g + self.a.transpose() * &nu_new } else { g.clone() };
                        let mut worst = -self.tol * (1.0 + t.amax());
                        let mut worst_i = None;
                        for i in 0..m {
                            let mu = match active[i] {
                                Active::Lower => t[i],
                                Active::Upper => -t[i],
                                Active::Free | Active::Fixed => continue,
                            };
                            if mu < worst {
                                worst = mu;
                                worst_i = Some(i);
                            }
                        }
                        match worst_i {
                            None => {
                                return RunOutcome {
                                    x,
                                    nu: nu_new,
                                    iterations: it + 1,
                                    converged: true,
                                }
                            }
                            Some(i) => {
                                active[i] = Active::Free;
                                nu = nu_new;
                                null_steps += 1;
                                if null_steps > m + p + 10 {
                                    // Degenerate vertex cycling guard.
                                    return RunOutcome {
                                        x,
                                        nu,
                                        iterations: it + 1,
                                        converged: false,
                                    };
                                }
                            }
                        }
                    } else {
                        let (alpha, blocker) = self.max_step(&x, &free, &pf, 1.0);
                        apply_step(&mut x, &free, &pf, alpha);
                        if alpha < 1.0 {
                            if let Some((i, side)) = blocker {
                                x[i] = match side {
                                    Active::Lower => self.lower[i],
                                    _ => self.upper[i],
                                };
                                active[i] = side;
                            }
                        }
                        nu = nu_new;
                        null_steps = 0;
                    }
                }
            }
        }
        RunOutcome {
            x,
            nu,
            iterations: max_iter,
            converged: false,
        }
    }

    /// Solves the working-set subproblem
    /// `min ½pᵀQ_FF p + gᵀp  s.t.  A_F p = rA` for the free coordinates.
    ///
    /// Positive-definite `Q_FF` takes a Cholesky/Schur route; otherwise the
    /// full KKT matrix is solved by symmetric least squares, and an
    /// inconsistent right-hand side yields the zero-curvature descent ray
    /// contained in its out-of-range component.
    fn solve_subproblem(&self, free: &[usize], g: &DVector<f64>, ra: &DVector<f64>) -> SubStep {
        let f = free.len();
        let p = self.a.nrows();
        let mut qff = DMatrix::zeros(f, f);
        for (bi, &i) in free.iter().enumerate() {
            for (bj, &j) in free.iter().enumerate() {
                qff[(bi, bj)] = self.q[(i, j)];
            }
        }
        let af = DMatrix::from_fn(p, f, |r_, c| self.a[(r_, free[c])]);
        let gf = DVector::from_fn(f, |k, _| g[free[k]]);

        if let Some(chol) = Cholesky::new(qff.clone()) {
            // A zero (or denormal) pivot means Q_FF is numerically singular
            // even though the factorization "succeeded"; only trust the
            // fast path when every pivot is comfortably positive.
            let qdiag_max = (0..f).map(|i| qff[(i, i)].abs()).fold(0.0f64, f64::max);
            let l = chol.l_dirty();
            let well_conditioned =
                (0..f).all(|i| l[(i, i)] * l[(i, i)] > 1e-12 * (1.0 + qdiag_max));
            if well_conditioned {
                if p == 0 {
                    return SubStep::Step(-chol.solve(&gf), DVector::zeros(0));
                }
                // Schur complement in the multipliers:
                // (A_F Q_FF⁻¹ A_Fᵀ) ν = −rA − A_F Q_FF⁻¹ g_F, then back-solve p.
                let qinv_gf = chol.solve(&gf);
                let qinv_aft = chol.solve(&af.transpose());
                let s = &af * &qinv_aft;
                let rhs_s = -(&af * &qinv_gf) - ra;
                let (nu, _) = sym_lstsq(&s, &rhs_s);
                let pf = -(qinv_gf + &qinv_aft * &nu);
                return SubStep::Step(pf, nu);
            }
        }

        // Singular reduced Hessian: assemble the full KKT matrix.
        let dim = f + p;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (f, f)).copy_from(&qff);
        if p > 0 {
            k.view_mut((0, f), (f, p)).copy_from(&af.transpose());
            k.view_mut((f, 0), (p, f)).copy_from(&af);
        }
        let mut rhs = DVector::zeros(dim);
        for i in 0..f {
            rhs[i] = -gf[i];
        }
        for i in 0..p {
            rhs[f + i] = ra[i];
        }
        let (z, z_null) = sym_lstsq(&k, &rhs);
        if z_null.norm() > RAY_EPS * (1.0 + rhs.norm()) {
            // rhs has a component outside range(K): its null-space part
            // (d, η) satisfies Q_FF d = −A_Fᵀη, A_F d = 0, so d is a
            // feasible zero-curvature direction with gᵀd < 0.
            let mut d = DVector::from_fn(f, |i, _| z_null[i]);
            let dmax = d.amax();
            if dmax > 1e-12 * z_null.amax().max(1.0) {
                d /= dmax;
                if gf.dot(&d) > 0.0 {
                    d = -d;
                }
                return SubStep::Ray(d);
            }
            // Direction lives purely in the multiplier block — fall through
            // with the range-space solution (cannot arise from a feasible x).
        }
        SubStep::Step(
            DVector::from_fn(f, |i, _| z[i]),
            DVector::from_fn(p, |i, _| z[f + i]),
        )
    }

    /// Least-squares multiplier estimate when no variable is free:
    /// `ν = argmin ‖g + Aᵀν‖₂`.
    fn multipliers_all_bound(&self, g: &DVector<f64>) -> DVector<f64> {
        let p = self.a.nrows();
        if p == 0 {
            return DVector::zeros(0);
        }
        // Normal equations (A Aᵀ) ν = −A g, solved in the least-squares
        // sense to tolerate redundant rows.
        let aat = self.a * self.a.transpose();
        let rhs = -(self.a * g);
        sym_lstsq(&aat, &rhs).0
    }

    /// Largest `α ∈ (0, cap]` keeping `x + α·p` inside the box, and the
    /// first blocking bound if the cap is not reached. `p` is indexed by
    /// the free list.
    fn max_step(
        &self,
        x: &DVector<f64>,
        free: &[usize],
        pf: &DVector<f64>,
        cap: f64,
    ) -> (f64, Option<(usize, Active)>) {
        let mut alpha = cap;
        let mut blocker = None;
        let pmax = pf.amax();
        for (k, &i) in free.iter().enumerate() {
            let pi = pf[k];
            if pi.abs() <= 1e-13 * pmax {
                continue;
            }
            if pi > 0.0 && self.upper[i].is_finite() {
                let ratio = ((self.upper[i] - x[i]) / pi).max(0.0);
                if ratio < alpha {
                    alpha = ratio;
                    blocker = Some((i, Active::Upper));
                }
            } else if pi < 0.0 && self.lower[i].is_finite() {
                let ratio = ((self.lower[i] - x[i]) / pi).max(0.0);
                if ratio < alpha {
                    alpha = ratio;
                    blocker = Some((i, Active::Lower));
                }
            }
        }
        (alpha, blocker)
    }
}

fn apply_step(x: &mut DVector<f64>, free: &[usize], pf: &DVector<f64>, alpha: f64) {
    for (k, &i) in free.iter().enumerate() {
        x[i] += alpha * pf[k];
    }
}

/// Builds the returned solution. Primal residuals are evaluated against the
/// *original* constraint data; the stationarity defect uses `a_eff`, the
/// (possibly row-reduced) equality matrix the multipliers `ν` belong to —
/// the two express the same constraint set, so the combined `kkt_residual`
/// is a genuine certificate for the original problem.
fn package(
    prob: &QpProblem,
    a_eff: &DMatrix<f64>,
    x: DVector<f64>,
    nu: &DVector<f64>,
    iterations: usize,
    status: QpStatus,
) -> QpSolution {
    let m = prob.n();
    let mut resid = eq_residual(&prob.a, &prob.b, &x);
    for i in 0..m {
        resid = resid
            .max(prob.lower[i] - x[i])
            .max(x[i] - prob.upper[i]);
    }
    if status != QpStatus::Infeasible {
        let t = if a_eff.nrows() == nu.len() && !nu.is_empty() {
            &prob.q * &x - &prob.r + a_eff.transpose() * nu
        } else {
            &prob.q * &x - &prob.r
        };
        let act_tol = |bound: f64| 1e-9 * (1.0 + bound.abs());
        for i in 0..m {
            let (l, u) = (prob.lower[i], prob.upper[i]);
            let stat = if l.is_finite() && u.is_finite() && u - l <= act_tol(l) + act_tol(u) {
                // Pinned variable: any multiplier sign is admissible.
                0.0
            } else if l.is_finite() && x[i] - l <= act_tol(l) {
                (-t[i]).max(0.0)
            } else if u.is_finite() && u - x[i] <= act_tol(u) {
                t[i].max(0.0)
            } else {
                t[i].abs()
            };
            resid = resid.max(stat);
        }
    }
    QpSolution {
        objective: objective(&prob.q, &prob.r, &x),
        x,
        status,
        kkt_residual: resid,
        iterations,
    }
}
