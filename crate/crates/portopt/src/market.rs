//! Asset universe, portfolio statistics, and transaction-cost models.
//!
//! Every quantity is a plain decimal: an expected return of 5% is stored as
//! `0.05`, a 10 bps cost as `0.0010`. Conversion to and from percent is the
//! presentation layer's job, never this module's.
//!
//! Two cost models are supported, both expressed through the sale/purchase
//! split of a rebalancing trade. Writing `Δw⁻ᵢ = max(w̃ᵢ − wᵢ, 0)` for the
//! sold fraction of asset `i` and `Δw⁺ᵢ = max(wᵢ − w̃ᵢ, 0)` for the bought
//! fraction:
//!
//! * **linear**: `C(w|w̃) = Σᵢ c⁻ᵢ Δw⁻ᵢ + c⁺ᵢ Δw⁺ᵢ` — fixed unit costs,
//!   asymmetric between bid and ask;
//! * **quadratic**: `C(w|w̃) = Σᵢ Δw⁻ᵢ (c⁻ᵢ + δ⁻ᵢ Δw⁻ᵢ) + Δw⁺ᵢ (c⁺ᵢ + δ⁺ᵢ Δw⁺ᵢ)`
//!   — the unit cost grows linearly with the traded size, modelling market
//!   impact on top of the spread.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Errors raised while constructing or evaluating market data.
#[derive(Debug, Error)]
pub enum MarketError {
    /// Two vector or matrix dimensions that must agree do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// A covariance candidate failed the symmetry or eigenvalue screen.
    #[error("covariance is not positive semi-definite: {0}")]
    NotPositiveSemiDefinite(String),
    /// A correlation input lies outside its admissible range.
    #[error("invalid correlation: {0}")]
    InvalidCorrelation(String),
    /// A cost rate or impact slope is negative.
    #[error("invalid costs: {0}")]
    InvalidCosts(String),
    /// An input carries NaN or infinite entries.
    #[error("non-finite input: {0}")]
    NonFinite(String),
    /// A portfolio that must hold invested wealth sums to (near) zero.
    #[error("portfolio wealth too small to normalize (sum = {0:.3e})")]
    ZeroWealth(f64),
}

/// Relative eigenvalue floor for the PSD screen: eigenvalues above
/// `−1e−10·λ_max` are accepted as rounding noise.
const PSD_EIGEN_FLOOR: f64 = 1e-10;

/// Largest admissible asymmetry `‖Σ − Σᵀ‖_max` before a covariance
/// candidate is rejected instead of symmetrized.
const SYMMETRY_TOL: f64 = 1e-12;

/// Correlation structure used to assemble a covariance matrix.
#[derive(Debug, Clone)]
pub enum Correlation {
    /// One common pairwise correlation for all distinct asset pairs.
    Constant(f64),
    /// A full symmetric correlation matrix with unit diagonal.
    Matrix(DMatrix<f64>),
}

/// The investable universe: expected returns and the covariance of returns.
#[derive(Debug, Clone)]
pub struct Universe {
    mu: DVector<f64>,
    vols: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Universe {
    /// Builds a universe from expected returns, volatilities, and a
    /// correlation structure (see [`build_covariance`]).
    pub fn new(
        mu: DVector<f64>,
        vols: DVector<f64>,
        corr: &Correlation,
    ) -> Result<Self, MarketError> {
        if mu.len() != vols.len() {
            return Err(MarketError::DimensionMismatch(format!(
                "mu has {} entries, vols has {}",
                mu.len(),
                vols.len()
            )));
        }
        check_finite(mu.as_slice(), "mu")?;
        let cov = build_covariance(&vols, corr)?;
        Ok(Self { mu, vols, cov })
    }

    /// Builds a universe directly from a covariance matrix; volatilities are
    /// recovered from the diagonal.
    pub fn from_covariance(mu: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, MarketError> {
        if cov.nrows() != mu.len() || cov.ncols() != mu.len() {
            return Err(MarketError::DimensionMismatch(format!(
                "mu has {} entries, covariance is {}x{}",
                mu.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        check_finite(mu.as_slice(), "mu")?;
        let cov = validate_covariance(cov)?;
        let vols = DVector::from_iterator(mu.len(), cov.diagonal().iter().map(|v| v.sqrt()));
        Ok(Self { mu, vols, cov })
    }

    /// Number of assets.
    #[must_use]
    pub fn n(&self) -> usize {
        self.mu.len()
    }

    /// Expected returns (decimal per year).
    #[must_use]
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Per-asset volatilities (decimal), consistent with `cov`'s diagonal.
    #[must_use]
    pub fn vols(&self) -> &DVector<f64> {
        &self.vols
    }

    /// Covariance matrix of returns (decimal²).
    #[must_use]
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Expected return `μ(w) = wᵀμ` of a weight vector.
    #[must_use]
    pub fn expected_return(&self, w: &DVector<f64>) -> f64 {
        self.mu.dot(w)
    }

    /// Volatility `σ(w) = √(wᵀΣw)` of a weight vector.
    #[must_use]
    pub fn volatility(&self, w: &DVector<f64>) -> f64 {
        (quadratic_form(&self.cov, w)).max(0.0).sqrt()
    }

    /// Both portfolio statistics at once: `(μ(w), σ(w))`.
    pub fn portfolio_stats(&self, w: &DVector<f64>) -> Result<(f64, f64), MarketError> {
        if w.len() != self.n() {
            return Err(MarketError::DimensionMismatch(format!(
                "portfolio has {} weights for {} assets",
                w.len(),
                self.n()
            )));
        }
        Ok((self.expected_return(w), self.volatility(w)))
    }
}

/// `wᵀ M w` accumulated explicitly; keeps the volatility path free of
/// intermediate allocations.
fn quadratic_form(m: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        let wj = w[j];
        if wj == 0.0 {
            continue;
        }
        let mut col = 0.0;
        for i in 0..m.nrows() {
            col += w[i] * m[(i, j)];
        }
        acc += col * wj;
    }
    acc
}

fn check_finite(xs: &[f64], what: &str) -> Result<(), MarketError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(MarketError::NonFinite(what.to_string()))
    }
}

/// Assembles `covᵢⱼ = ρᵢⱼ·volᵢ·volⱼ` (with `ρᵢᵢ = 1`) and screens the result
/// for positive semi-definiteness.
///
/// A scalar correlation `ρ` must lie in `(−1/(n−1), 1]` — the open lower
/// endpoint is where the constant-correlation matrix loses PSD-ness.
pub fn build_covariance(
    vols: &DVector<f64>,
    corr: &Correlation,
) -> Result<DMatrix<f64>, MarketError> {
    let n = vols.len();
    check_finite(vols.as_slice(), "vols")?;
    if vols.iter().any(|&v| v <= 0.0) {
        return Err(MarketError::InvalidCorrelation(
            "volatilities must be strictly positive".into(),
        ));
    }
    let corr_mat = match corr {
        Correlation::Constant(rho) => {
            let lower = if n > 1 { -1.0 / (n as f64 - 1.0) } else { -1.0 };
            if !(*rho > lower && *rho <= 1.0) {
                return Err(MarketError::InvalidCorrelation(format!(
                    "constant correlation {rho} outside ({lower}, 1]"
                )));
            }
            DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { *rho })
        }
        Correlation::Matrix(m) => {
            if m.nrows() != n || m.ncols() != n {
                return Err(MarketError::DimensionMismatch(format!(
                    "correlation is {}x{} for {} assets",
                    m.nrows(),
                    m.ncols(),
                    n
                )));
            }
            for i in 0..n {
                if (m[(i, i)] - 1.0).abs() > 1e-12 {
                    return Err(MarketError::InvalidCorrelation(format!(
                        "diagonal entry ({i},{i}) = {} is not 1",
                        m[(i, i)]
                    )));
                }
            }
            m.clone()
        }
    };
    let cov = DMatrix::from_fn(n, n, |i, j| corr_mat[(i, j)] * vols[i] * vols[j]);
    validate_covariance(cov)
}

/// Screens a covariance candidate: symmetry within [`SYMMETRY_TOL`] (the
/// symmetric part is taken when within tolerance), then the eigenvalue floor
/// `λ_min ≥ −1e−10·λ_max`.
pub fn validate_covariance(cov: DMatrix<f64>) -> Result<DMatrix<f64>, MarketError> {
    let n = cov.nrows();
    if n != cov.ncols() {
        return Err(MarketError::DimensionMismatch(format!(
            "covariance is {}x{}",
            n,
            cov.ncols()
        )));
    }
    check_finite(cov.as_slice(), "covariance")?;
    let mut max_asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((cov[(i, j)] - cov[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_TOL {
        return Err(MarketError::NotPositiveSemiDefinite(format!(
            "asymmetry {max_asym:.3e} exceeds {SYMMETRY_TOL:.1e}"
        )));
    }
    let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (cov[(i, j)] + cov[(j, i)]));
    let eig = sym.clone().symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if lambda_min < -PSD_EIGEN_FLOOR * lambda_max.max(f64::MIN_POSITIVE) {
        return Err(MarketError::NotPositiveSemiDefinite(format!(
            "eigenvalue {lambda_min:.3e} below floor for max {lambda_max:.3e}"
        )));
    }
    Ok(sym)
}

/// Per-asset transaction-cost coefficients: bid/ask unit costs `c⁻, c⁺` and
/// quadratic impact slopes `δ⁻, δ⁺`. All entries are nonnegative decimals.
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub c_minus: DVector<f64>,
    pub c_plus: DVector<f64>,
    pub delta_minus: DVector<f64>,
    pub delta_plus: DVector<f64>,
}

impl CostSpec {
    /// Builds a cost specification from per-asset vectors.
    pub fn new(
        c_minus: DVector<f64>,
        c_plus: DVector<f64>,
        delta_minus: DVector<f64>,
        delta_plus: DVector<f64>,
    ) -> Result<Self, MarketError> {
        let n = c_minus.len();
        for (name, v) in [
            ("c_plus", &c_plus),
            ("delta_minus", &delta_minus),
            ("delta_plus", &delta_plus),
        ] {
            if v.len() != n {
                return Err(MarketError::DimensionMismatch(format!(
                    "{name} has {} entries, c_minus has {n}",
                    v.len()
                )));
            }
        }
        for (name, v) in [
            ("c_minus", &c_minus),
            ("c_plus", &c_plus),
            ("delta_minus", &delta_minus),
            ("delta_plus", &delta_plus),
        ] {
            check_finite(v.as_slice(), name)?;
            if v.iter().any(|&x| x < 0.0) {
                return Err(MarketError::InvalidCosts(format!(
                    "{name} has a negative entry"
                )));
            }
        }
        Ok(Self {
            c_minus,
            c_plus,
            delta_minus,
            delta_plus,
        })
    }

    /// Uniform coefficients broadcast across `n` assets.
    pub fn uniform(
        n: usize,
        c_minus: f64,
        c_plus: f64,
        delta_minus: f64,
        delta_plus: f64,
    ) -> Result<Self, MarketError> {
        Self::new(
            DVector::from_element(n, c_minus),
            DVector::from_element(n, c_plus),
            DVector::from_element(n, delta_minus),
            DVector::from_element(n, delta_plus),
        )
    }

    /// The free specification: every coefficient zero.
    #[must_use]
    pub fn zero(n: usize) -> Self {
        Self {
            c_minus: DVector::zeros(n),
            c_plus: DVector::zeros(n),
            delta_minus: DVector::zeros(n),
            delta_plus: DVector::zeros(n),
        }
    }

    /// Number of assets covered.
    #[must_use]
    pub fn n(&self) -> usize {
        self.c_minus.len()
    }

    /// The same specification with the quadratic slopes dropped — what the
    /// proportional-cost problem prices when handed a full specification.
    #[must_use]
    pub fn linear_part(&self) -> Self {
        Self {
            c_minus: self.c_minus.clone(),
            c_plus: self.c_plus.clone(),
            delta_minus: DVector::zeros(self.n()),
            delta_plus: DVector::zeros(self.n()),
        }
    }

    /// True when both quadratic slopes vanish identically, i.e. the model is
    /// purely linear.
    #[must_use]
    pub fn is_linear(&self) -> bool {
        self.delta_minus.iter().all(|&d| d == 0.0) && self.delta_plus.iter().all(|&d| d == 0.0)
    }

    /// When all sale slopes share one value and all purchase slopes share
    /// another, returns `(δ⁻, δ⁺)`; otherwise `None`. Homogeneity decides
    /// whether the quintic projection path applies.
    #[must_use]
    pub fn homogeneous_delta(&self) -> Option<(f64, f64)> {
        let dm = self.delta_minus[0];
        let dp = self.delta_plus[0];
        if self.delta_minus.iter().all(|&d| d == dm)
            && self.delta_plus.iter().all(|&d| d == dp)
        {
            Some((dm, dp))
        } else {
            None
        }
    }
}

/// A rebalancing trade decomposed into nonnegative sale and purchase legs.
#[derive(Debug, Clone)]
pub struct TradeSplit {
    pub dw_minus: DVector<f64>,
    pub dw_plus: DVector<f64>,
}

impl TradeSplit {
    /// Total one-way turnover `Σᵢ (Δw⁻ᵢ + Δw⁺ᵢ)`.
    #[must_use]
    pub fn turnover(&self) -> f64 {
        self.dw_minus.sum() + self.dw_plus.sum()
    }
}

/// Splits `w − w̃` into sale and purchase magnitudes:
/// `Δw⁻ᵢ = max(w̃ᵢ − wᵢ, 0)`, `Δw⁺ᵢ = max(wᵢ − w̃ᵢ, 0)`.
///
/// The two legs are complementary (`Δw⁻ᵢ·Δw⁺ᵢ = 0`) and reconstruct the
/// target exactly: `w = w̃ − Δw⁻ + Δw⁺`.
#[must_use]
pub fn split_trades(w: &DVector<f64>, w_tilde: &DVector<f64>) -> TradeSplit {
    let n = w.len();
    let mut dw_minus = DVector::zeros(n);
    let mut dw_plus = DVector::zeros(n);
    for i in 0..n {
        let d = w[i] - w_tilde[i];
        if d >= 0.0 {
            dw_plus[i] = d;
        } else {
            dw_minus[i] = -d;
        }
    }
    TradeSplit { dw_minus, dw_plus }
}

/// Which cost model a computation should charge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Linear,
    Quadratic,
}

/// Linear rebalancing cost `Σᵢ c⁻ᵢ Δw⁻ᵢ + c⁺ᵢ Δw⁺ᵢ` of moving `w̃` to `w`.
#[must_use]
pub fn cost_linear(cs: &CostSpec, w: &DVector<f64>, w_tilde: &DVector<f64>) -> f64 {
    let split = split_trades(w, w_tilde);
    cost_linear_split(cs, &split)
}

/// Linear cost charged on an explicit sale/purchase split.
#[must_use]
pub fn cost_linear_split(cs: &CostSpec, split: &TradeSplit) -> f64 {
    cs.c_minus.dot(&split.dw_minus) + cs.c_plus.dot(&split.dw_plus)
}

/// Quadratic rebalancing cost
/// `Σᵢ Δw⁻ᵢ(c⁻ᵢ + δ⁻ᵢΔw⁻ᵢ) + Δw⁺ᵢ(c⁺ᵢ + δ⁺ᵢΔw⁺ᵢ)` of moving `w̃` to `w`.
#[must_use]
pub fn cost_quadratic(cs: &CostSpec, w: &DVector<f64>, w_tilde: &DVector<f64>) -> f64 {
    let split = split_trades(w, w_tilde);
    cost_quadratic_split(cs, &split)
}

/// Quadratic cost charged on an explicit sale/purchase split.
#[must_use]
pub fn cost_quadratic_split(cs: &CostSpec, split: &TradeSplit) -> f64 {
    let mut acc = 0.0;
    for i in 0..cs.n() {
        let dm = split.dw_minus[i];
        let dp = split.dw_plus[i];
        acc += dm * (cs.c_minus[i] + cs.delta_minus[i] * dm);
        acc += dp * (cs.c_plus[i] + cs.delta_plus[i] * dp);
    }
    acc
}

/// Cost of the given kind for moving `w̃` to `w`.
#[must_use]
pub fn cost_of(kind: CostKind, cs: &CostSpec, w: &DVector<f64>, w_tilde: &DVector<f64>) -> f64 {
    match kind {
        CostKind::Linear => cost_linear(cs, w, w_tilde),
        CostKind::Quadratic => cost_quadratic(cs, w, w_tilde),
    }
}

/// Net expected return of an optimized portfolio: the gross return of the
/// optimizer's weights minus the rebalancing bill,
/// `μ(w*) − k·C(w*|w̃)`, where `k` is the number of rebalances charged per
/// year (cumulative costs are modelled as a plain multiplier).
///
/// The gross term deliberately uses the raw optimizer weights, not the
/// normalized ones: the cost was paid out of the same wealth that the raw
/// weights invest, so mixing conventions would double-count the shrinkage.
pub fn net_expected_return(
    u: &Universe,
    w_star: &DVector<f64>,
    w_tilde: &DVector<f64>,
    cs: &CostSpec,
    kind: CostKind,
    rebalances_per_year: u32,
) -> Result<f64, MarketError> {
    if w_star.len() != u.n() || w_tilde.len() != u.n() || cs.n() != u.n() {
        return Err(MarketError::DimensionMismatch(
            "net_expected_return inputs".into(),
        ));
    }
    let wealth = w_star.sum();
    if wealth <= 1e-9 {
        return Err(MarketError::ZeroWealth(wealth));
    }
    let cost = cost_of(kind, cs, w_star, w_tilde);
    Ok(u.expected_return(w_star) - f64::from(rebalances_per_year) * cost)
}

/// Rescales weights to sum to one: `w̄ᵢ = wᵢ/Σⱼwⱼ`.
pub fn normalize(w: &DVector<f64>) -> Result<DVector<f64>, MarketError> {
    let s = w.sum();
    if s <= 1e-9 {
        return Err(MarketError::ZeroWealth(s));
    }
    Ok(w / s)
}
