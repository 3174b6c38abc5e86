//! Euclidean projection onto the quadratic-cost budget surface.
//!
//! The operator-splitting solver's y-update must project a point
//! `v_y = (v, Δv⁻, Δv⁺)` (stacked length `3n`) onto the quadric
//!
//! ```text
//! Σᵢ wᵢ + Σᵢ c⁻ᵢ Δw⁻ᵢ + c⁺ᵢ Δw⁺ᵢ + δ⁻ᵢ (Δw⁻ᵢ)² + δ⁺ᵢ (Δw⁺ᵢ)² = 1,
//! ```
//!
//! the modified budget constraint under quadratic transaction costs. The
//! KKT conditions of the projection collapse to one scalar unknown, the
//! multiplier `λ`, through the reconstruction
//!
//! ```text
//! wᵢ = vᵢ − λ,   Δw∓ᵢ = (Δv∓ᵢ − λ c∓ᵢ) / (1 + 2λ δ∓ᵢ),
//! ```
//!
//! and `λ` solves a scalar *secular equation* — the budget evaluated along
//! the reconstruction. Two routes are implemented:
//!
//! * **homogeneous slopes** (all `δ⁻ᵢ` equal and all `δ⁺ᵢ` equal): clearing
//!   denominators turns the secular equation into a quintic polynomial
//!   whose real roots are found by companion-matrix eigenvalues; every
//!   root is a KKT candidate and the closest reconstruction wins;
//! * **general slopes**: the secular function is strictly decreasing on
//!   `(λ_min, ∞)` with `λ_min = −1/(2·max δ)`, so the single in-domain
//!   root is bracketed and bisected.
//!
//! The two routes are algebraically equivalent on homogeneous inputs, and
//! the test suite leans on that redundancy: the bisection path serves as
//! an independent check of the long closed-form quintic coefficients.
//!
//! Note the surface is *not* a convex set and the box bounds of the outer
//! problem play no role here — they are enforced by the other half of the
//! splitting.

use nalgebra::DVector;
use thiserror::Error;

use crate::market::CostSpec;

/// Default bisection tolerance on the secular residual.
pub const DEFAULT_PROJECTION_TOL: f64 = 1e-12;

/// Budget feasibility required of any returned projection.
const FEAS_TOL: f64 = 1e-10;

/// Relative threshold for trimming negligible leading polynomial
/// coefficients before root extraction.
const TRIM_EPS: f64 = 1e-14;

/// Errors raised by the projection routines.
#[derive(Debug, Error)]
pub enum ProjectionError {
    /// Input vector lengths disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// The quintic route requires every asset to share one `δ⁻` and one
    /// `δ⁺`.
    #[error("impact slopes are not homogeneous; use the general path")]
    HeterogeneousSlopes,
    /// All polynomial coefficients are (numerically) zero.
    #[error("zero polynomial has no defined roots")]
    ZeroPolynomial,
    /// The secular function was evaluated at one of its poles.
    #[error("secular function pole at λ = {0}")]
    PoleEvaluation(f64),
    /// No sign change found while expanding the bisection bracket.
    #[error("failed to bracket the secular root after {0} expansions")]
    BracketFailure(usize),
    /// No real root of the quintic reconstructs a point on the surface.
    #[error("no real root reconstructs a feasible projection")]
    NoFeasibleRoot,
    /// An input entry is NaN or infinite.
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
}

/// A point to be projected, in its natural partition `(v, Δv⁻, Δv⁺)`,
/// together with the cost coefficients defining the surface.
#[derive(Debug, Clone)]
pub struct ProjectionInput {
    pub v: DVector<f64>,
    pub dv_minus: DVector<f64>,
    pub dv_plus: DVector<f64>,
    pub cs: CostSpec,
}

impl ProjectionInput {
    /// Builds an input from its three blocks, checking lengths.
    pub fn new(
        v: DVector<f64>,
        dv_minus: DVector<f64>,
        dv_plus: DVector<f64>,
        cs: CostSpec,
    ) -> Result<Self, ProjectionError> {
        let n = v.len();
        if dv_minus.len() != n || dv_plus.len() != n || cs.n() != n {
            return Err(ProjectionError::DimensionMismatch(format!(
                "v: {n}, dv_minus: {}, dv_plus: {}, costs: {}",
                dv_minus.len(),
                dv_plus.len(),
                cs.n()
            )));
        }
        for (name, x) in [("v", &v), ("dv_minus", &dv_minus), ("dv_plus", &dv_plus)] {
            if !x.iter().all(|e| e.is_finite()) {
                return Err(ProjectionError::NonFinite(match name {
                    "v" => "v",
                    "dv_minus" => "dv_minus",
                    _ => "dv_plus",
                }));
            }
        }
        Ok(Self {
            v,
            dv_minus,
            dv_plus,
            cs,
        })
    }

    /// Splits a stacked `3n`-vector `(v, Δv⁻, Δv⁺)` into an input.
    pub fn from_stacked(vy: &DVector<f64>, cs: &CostSpec) -> Result<Self, ProjectionError> {
        let n = cs.n();
        if vy.len() != 3 * n {
            return Err(ProjectionError::DimensionMismatch(format!(
                "stacked point has {} entries for {n} assets",
                vy.len()
            )));
        }
        Self::new(
            vy.rows(0, n).into_owned(),
            vy.rows(n, n).into_owned(),
            vy.rows(2 * n, n).into_owned(),
            cs.clone(),
        )
    }

    /// Number of assets.
    #[must_use]
    pub fn n(&self) -> usize {
        self.v.len()
    }

    /// The point as one stacked `3n`-vector.
    #[must_use]
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.n();
        let mut out = DVector::zeros(3 * n);
        out.rows_mut(0, n).copy_from(&self.v);
        out.rows_mut(n, n).copy_from(&self.dv_minus);
        out.rows_mut(2 * n, n).copy_from(&self.dv_plus);
        out
    }

    /// Budget residual of the input point itself — equals
    /// [`secular_residual`] at `λ = 0`.
    #[must_use]
    pub fn budget_residual(&self) -> f64 {
        budget_residual_parts(&self.cs, &self.v, &self.dv_minus, &self.dv_plus)
    }
}

/// Budget-surface residual `Σw + Σc⁻Δw⁻ + Σc⁺Δw⁺ + Σδ⁻Δw⁻² + Σδ⁺Δw⁺² − 1`
/// of an arbitrary split point.
#[must_use]
pub fn budget_residual_parts(
    cs: &CostSpec,
    w: &DVector<f64>,
    dw_minus: &DVector<f64>,
    dw_plus: &DVector<f64>,
) -> f64 {
    let mut acc = -1.0;
    for i in 0..w.len() {
        acc += w[i]
            + cs.c_minus[i] * dw_minus[i]
            + cs.c_plus[i] * dw_plus[i]
            + cs.delta_minus[i] * dw_minus[i] * dw_minus[i]
            + cs.delta_plus[i] * dw_plus[i] * dw_plus[i];
    }
    acc
}

/// Budget-surface residual of a stacked `3n`-vector.
#[must_use]
pub fn budget_residual_stacked(cs: &CostSpec, y: &DVector<f64>) -> f64 {
    let n = cs.n();
    budget_residual_parts(
        cs,
        &y.rows(0, n).into_owned(),
        &y.rows(n, n).into_owned(),
        &y.rows(2 * n, n).into_owned(),
    )
}

/// Coefficients `α₀ + α₁λ + … + α₅λ⁵` of the cleared secular equation in
/// the homogeneous-slope case: the polynomial equals
/// `secular_residual(λ)·(1+2λδ⁻)²(1+2λδ⁺)²` identically.
///
/// With both slopes positive the leading coefficient is
/// `α₅ = −16·n·(δ⁻)²(δ⁺)²` — strictly negative, consistent with the
/// secular function falling to `−∞` as `λ → ∞` while the cleared factors
/// grow positively.
#[derive(Debug, Clone)]
pub struct QuinticCoefficients {
    pub alpha: [f64; 6],
}

impl QuinticCoefficients {
    /// Evaluates the polynomial at `lam` (Horner).
    #[must_use]
    pub fn eval(&self, lam: f64) -> f64 {
        self.alpha
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * lam + c)
    }
}

/// Result of a projection: the stacked surface point, its multiplier, the
/// half squared distance to the input, and how many KKT candidates were
/// compared (always 1 on the bisection path).
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub y: DVector<f64>,
    pub lambda: f64,
    pub distance: f64,
    pub candidates_considered: usize,
}

/// Closed-form quintic coefficients for homogeneous slopes.
///
/// The formulas depend only on the aggregates `n`, `Σvᵢ`, `Σc∓ᵢΔv∓ᵢ`,
/// `Σ(c∓ᵢ)²`, `Σ(Δv∓ᵢ)²` and the shared `δ⁻`, `δ⁺`. They were generated by
/// symbolic expansion of the cleared secular equation and are re-verified
/// pointwise against the rational form by the test suite.
pub fn quintic_coefficients(
    p: &ProjectionInput,
) -> Result<QuinticCoefficients, ProjectionError> {
    let Some((dm, dp)) = p.cs.homogeneous_delta() else {
        return Err(ProjectionError::HeterogeneousSlopes);
    };
    let nf = p.n() as f64;
    let sv = p.v.sum();
    let scm = p.cs.c_minus.dot(&p.dv_minus);
    let scp = p.cs.c_plus.dot(&p.dv_plus);
    let scm2 = p.cs.c_minus.dot(&p.cs.c_minus);
    let scp2 = p.cs.c_plus.dot(&p.cs.c_plus);
    let sdm2 = p.dv_minus.dot(&p.dv_minus);
    let sdp2 = p.dv_plus.dot(&p.dv_plus);

    let a0 = scm + scp + sdm2 * dm + sdp2 * dp + sv - 1.0;
    let a1 = -scm2 - scp2 - nf
        + 4.0 * dm * (scp + sdm2 * dp + sdp2 * dp + sv - 1.0)
        + 4.0 * dp * (scm + sv - 1.0);
    let a2 = 4.0 * dm * dm * (scp + sdp2 * dp + sv - 1.0)
        - dm * (scm2 + 4.0 * scp2 - 4.0 * sdm2 * dp * dp - 16.0 * sv * dp + 16.0 * dp + 4.0 * nf)
        + 4.0 * dp * dp * (scm + sv - 1.0)
        - dp * (4.0 * scm2 + scp2 + 4.0 * nf);
    let a3 = -4.0 * dm * dm * (scp2 - 4.0 * sv * dp + 4.0 * dp + nf)
        - 4.0 * dm * dp * (scm2 + scp2 - 4.0 * sv * dp + 4.0 * dp + 4.0 * nf)
        - 4.0 * dp * dp * (scm2 + nf);
    let a4 = 4.0
        * dm
        * dp
        * (dm * (-scp2 + 4.0 * sv * dp - 4.0 * dp - 4.0 * nf) - dp * (scm2 + 4.0 * nf));
    let a5 = -16.0 * dm * dm * dp * dp * nf;

    Ok(QuinticCoefficients {
        alpha: [a0, a1, a2, a3, a4, a5],
    })
}

/// All real roots of the polynomial `coeffs[0] + coeffs[1]λ + …`, sorted
/// ascending with multiplicities collapsed.
///
/// Leading coefficients below `1e−14·max|coeff|` are trimmed so the degree
/// degrades gracefully; the remaining polynomial's companion matrix is
/// eigendecomposed, near-real eigenvalues are kept, and each candidate is
/// polished by a few Newton steps on the polynomial itself.
pub fn real_roots(coeffs: &[f64]) -> Result<Vec<f64>, ProjectionError> {
    let max_abs = coeffs.iter().fold(0.0f64, |a, &c| a.max(c.abs()));
    if max_abs == 0.0 || !max_abs.is_finite() {
        return Err(ProjectionError::ZeroPolynomial);
    }
    let trim = TRIM_EPS * max_abs;
    let mut deg = coeffs.len().saturating_sub(1);
    while deg > 0 && coeffs[deg].abs() <= trim {
        deg -= 1;
    }
    if deg == 0 {
        return if coeffs[0].abs() <= trim {
            Err(ProjectionError::ZeroPolynomial)
        } else {
            Ok(Vec::new()) // nonzero constant: no roots
        };
    }
    let c = &coeffs[..=deg];

    // Frobenius companion matrix of the monic polynomial.
    let lead = c[deg];
    let mut companion = nalgebra::DMatrix::<f64>::zeros(deg, deg);
    for i in 0..deg {
        companion[(i, deg - 1)] = -c[i] / lead;
        if i > 0 {
            companion[(i, i - 1)] = 1.0;
        }
    }
    let eigs = companion.complex_eigenvalues();

    let mut roots: Vec<f64> = Vec::new();
    for e in eigs.iter() {
        if e.im.abs() > 1e-8 * (1.0 + e.re.abs()) {
            continue;
        }
        let lam = polish_root(c, e.re);
        // Accept only candidates whose residual is negligible relative to
        // the evaluation scale at that point.
        let scale: f64 = c
            .iter()
            .enumerate()
            .map(|(k, &ck)| ck.abs() * lam.abs().powi(k as i32))
            .sum();
        if eval_poly(c, lam).abs() <= 1e-10 * (1.0 + scale) {
            roots.push(lam);
        }
    }
    roots.sort_by(|a, b| a.partial_cmp(b).expect("finite roots"));
    // Collapse eigenvalue clusters from multiple roots.
    let mut out: Vec<f64> = Vec::new();
    for r in roots {
        match out.last() {
            Some(&last) if (r - last).abs() <= 1e-7 * (1.0 + r.abs()) => {}
            _ => out.push(r),
        }
    }
    Ok(out)
}

fn eval_poly(c: &[f64], lam: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ck| acc * lam + ck)
}

fn eval_poly_deriv(c: &[f64], lam: f64) -> f64 {
    let mut acc = 0.0;
    for k in (1..c.len()).rev() {
        acc = acc * lam + c[k] * k as f64;
    }
    acc
}

/// A handful of Newton iterations on the polynomial — deliberately *not*
/// on the rational secular form, so the two projection routes stay
/// independent checks of one another.
fn polish_root(c: &[f64], mut lam: f64) -> f64 {
    let mut prev_step: Option<f64> = None;
    for _ in 0..8 {
        let f = eval_poly(c, lam);
        let df = eval_poly_deriv(c, lam);
        if f == 0.0 || df == 0.0 || !df.is_finite() {
            break;
        }
        let mut step = f / df;
        if !step.is_finite() {
            break;
        }
        // A root of multiplicity m slows Newton to linear convergence with
        // step ratio (m−1)/m; when consecutive steps show that signature,
        // estimate m and take the multiplicity-corrected step instead.
        if let Some(ps) = prev_step {
            if ps != 0.0 {
                let rho = step / ps;
                if (0.3..0.97).contains(&rho) {
                    let m = (1.0 / (1.0 - rho)).round().clamp(2.0, (c.len() - 1) as f64);
                    step *= m;
                }
            }
        }
        lam -= step;
        prev_step = Some(step);
        if step.abs() <= 1e-16 * (1.0 + lam.abs()) {
            break;
        }
    }
    lam
}

/// Left-hand side of the secular equation at `lam`: the budget residual of
/// the reconstruction `y(λ)`. Strictly decreasing on `(λ_min, ∞)` where
/// `λ_min = −1/(2·max δ)`; errors at a pole of the rational terms.
pub fn secular_residual(lambda: f64, p: &ProjectionInput) -> Result<f64, ProjectionError> {
    let mut acc = -1.0;
    for i in 0..p.n() {
        acc += p.v[i] - lambda;
        let (den_m, den_p) = denominators(p, lambda, i);
        if den_m.abs() < 1e-13 || den_p.abs() < 1e-13 {
            return Err(ProjectionError::PoleEvaluation(lambda));
        }
        let num_m = p.dv_minus[i] - lambda * p.cs.c_minus[i];
        let num_p = p.dv_plus[i] - lambda * p.cs.c_plus[i];
        acc += p.cs.c_minus[i] * num_m / den_m + p.cs.c_plus[i] * num_p / den_p;
        acc += p.cs.delta_minus[i] * (num_m / den_m).powi(2)
            + p.cs.delta_plus[i] * (num_p / den_p).powi(2);
    }
    Ok(acc)
}

fn denominators(p: &ProjectionInput, lambda: f64, i: usize) -> (f64, f64) {
    (
        1.0 + 2.0 * lambda * p.cs.delta_minus[i],
        1.0 + 2.0 * lambda * p.cs.delta_plus[i],
    )
}

/// Reconstructs the stacked surface point for a multiplier, or `None` when
/// a denominator collides with a pole.
fn reconstruct(p: &ProjectionInput, lambda: f64) -> Option<(DVector<f64>, f64)> {
    let n = p.n();
    let mut y = DVector::zeros(3 * n);
    let mut dist = 0.0;
    for i in 0..n {
        let (den_m, den_p) = denominators(p, lambda, i);
        if den_m.abs() < 1e-12 || den_p.abs() < 1e-12 {
            return None;
        }
        let w = p.v[i] - lambda;
        let dwm = (p.dv_minus[i] - lambda * p.cs.c_minus[i]) / den_m;
        let dwp = (p.dv_plus[i] - lambda * p.cs.c_plus[i]) / den_p;
        y[i] = w;
        y[n + i] = dwm;
        y[2 * n + i] = dwp;
        dist += (w - p.v[i]).powi(2) + (dwm - p.dv_minus[i]).powi(2) + (dwp - p.dv_plus[i]).powi(2);
    }
    Some((y, 0.5 * dist))
}

/// Projection via the quintic route (homogeneous slopes required).
///
/// Every real root of the cleared secular polynomial is a KKT candidate;
/// each is reconstructed, checked against the surface, and the closest
/// feasible candidate is returned (ties within `1e−12` go to the smaller
/// `|λ|`). Errors when no root reconstructs a feasible point.
pub fn project_homogeneous(p: &ProjectionInput) -> Result<ProjectionResult, ProjectionError> {
    let qc = quintic_coefficients(p)?;
    let roots = real_roots(&qc.alpha)?;
    let mut best: Option<ProjectionResult> = None;
    let mut considered = 0;
    for lam in roots {
        let Some((y, dist)) = reconstruct(p, lam) else {
            continue;
        };
        if budget_residual_stacked(&p.cs, &y).abs() > FEAS_TOL {
            continue;
        }
        considered += 1;
        let better = match &best {
            None => true,
            Some(b) => {
                dist < b.distance - 1e-12
                    || ((dist - b.distance).abs() <= 1e-12 && lam.abs() < b.lambda.abs())
            }
        };
        if better {
            best = Some(ProjectionResult {
                y,
                lambda: lam,
                distance: dist,
                candidates_considered: 0,
            });
        }
    }
    match best {
        Some(mut b) => {
            b.candidates_considered = considered;
            Ok(b)
        }
        None => Err(ProjectionError::NoFeasibleRoot),
    }
}

/// Projection via bracketing and bisection of the secular equation —
/// valid for arbitrary per-asset slopes.
///
/// The search lives on `(λ_min, ∞)`, the domain where all denominators
/// stay positive and the secular function decreases strictly from `+∞`
/// to `−∞`; the unique root there is the projection multiplier.
pub fn project_general(
    p: &ProjectionInput,
    tol: f64,
) -> Result<ProjectionResult, ProjectionError> {
    let delta_max = p
        .cs
        .delta_minus
        .iter()
        .chain(p.cs.delta_plus.iter())
        .fold(0.0f64, |a, &d| a.max(d));

    let f0 = secular_residual(0.0, p)?;
    let lambda = if f0.abs() <= tol {
        0.0
    } else if f0 > 0.0 {
        // Root to the right: expand the upper end by doubling.
        let mut hi = 1.0;
        let mut expansions = 0;
        loop {
            let fhi = secular_residual(hi, p)?;
            if fhi <= 0.0 {
                break;
            }
            expansions += 1;
            if expansions > 200 {
                return Err(ProjectionError::BracketFailure(expansions));
            }
            hi *= 2.0;
        }
        bisect(p, 0.0, hi, tol)?
    } else if delta_max == 0.0 {
        // No poles below: expand the lower end by doubling.
        let mut lo = -1.0;
        let mut expansions = 0;
        loop {
            let flo = secular_residual(lo, p)?;
            if flo >= 0.0 {
                break;
            }
            expansions += 1;
            if expansions > 200 {
                return Err(ProjectionError::BracketFailure(expansions));
            }
            lo *= 2.0;
        }
        bisect(p, lo, 0.0, tol)?
    } else {
        // Root between the nearest pole and zero: approach the pole
        // geometrically until the residual turns positive.
        let lambda_min = -1.0 / (2.0 * delta_max);
        let mut gap = -lambda_min; // distance from pole to 0
        let mut lo = None;
        for k in 1..=200 {
            gap *= 0.5;
            let cand = lambda_min + gap;
            match secular_residual(cand, p) {
                Ok(f) if f >= 0.0 => {
                    lo = Some(cand);
                    break;
                }
                Ok(_) => {}
                // Landed numerically on the pole: step in further.
                Err(ProjectionError::PoleEvaluation(_)) => {}
                Err(e) => return Err(e),
            }
            if k == 200 {
                return Err(ProjectionError::BracketFailure(k));
            }
        }
        let lo = lo.ok_or(ProjectionError::BracketFailure(200))?;
        bisect(p, lo, 0.0, tol)?
    };

    let (y, distance) =
        reconstruct(p, lambda).ok_or(ProjectionError::PoleEvaluation(lambda))?;
    Ok(ProjectionResult {
        y,
        lambda,
        distance,
        candidates_considered: 1,
    })
}

/// Bisection on `[lo, hi]` with `f(lo) ≥ 0 ≥ f(hi)` (f decreasing).
fn bisect(p: &ProjectionInput, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64, ProjectionError> {
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..300 {
        mid = 0.5 * (lo + hi);
        let fm = match secular_residual(mid, p) {
            Ok(f) => f,
            // A pole inside the bracket can only be the left endpoint's
            // numerical shadow; shrink toward the right.
            Err(ProjectionError::PoleEvaluation(_)) => {
                lo = mid;
                continue;
            }
            Err(e) => return Err(e),
        };
        if fm.abs() <= tol {
            return Ok(mid);
        }
        if fm > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() <= f64::EPSILON * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(mid)
}

/// Dispatching projection: the quintic route for homogeneous slopes with
/// a bisection fallback, the general route otherwise.
pub fn project(p: &ProjectionInput) -> Result<ProjectionResult, ProjectionError> {
    if p.cs.homogeneous_delta().is_some() {
        match project_homogeneous(p) {
            Ok(r) => Ok(r),
            // Root polishing can, in extreme corners, leave every quintic
            // candidate outside the feasibility tolerance; the bisection
            // targets the in-domain root directly and is immune to that.
            Err(ProjectionError::NoFeasibleRoot) => project_general(p, DEFAULT_PROJECTION_TOL),
            Err(e) => Err(e),
        }
    } else {
        project_general(p, DEFAULT_PROJECTION_TOL)
    }
}
