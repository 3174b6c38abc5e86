//! Run configuration: a JSON document describing the universe, the cost
//! model, the current book, and what to solve.
//!
//! The format is deliberately forgiving about *shape* — scalars broadcast
//! to per-asset vectors, correlation may be one number or a full matrix,
//! a covariance matrix may replace both — and strict about *content*:
//! unknown keys are rejected, dimensions must agree, and exactly one of
//! `gamma`/`sigma_star` may drive a single solve.
//!
//! All rates are decimals by default; `"units": "percent"` declares the
//! whole document percent-denominated and everything dimensionful is
//! divided down on load (returns, volatilities, cost coefficients,
//! weights, volatility targets and grids; covariance entries by 100²;
//! γ and correlations are dimensionless and untouched).

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::admm::AdmmOptions;
use crate::frontier::{Grid, Mode, SolverOptions};
use crate::market::{build_covariance, Correlation, CostSpec, MarketError, Universe};
use crate::strict::StrictOptions;

/// Tolerance on `Σw̃ − 1` before a partial-investment warning is issued.
const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Errors raised while loading a configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// The document is not valid JSON or has the wrong shape.
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] serde_json::Error),
    /// Reading the file failed.
    #[error("cannot read configuration: {0}")]
    Io(#[from] std::io::Error),
    /// The document parsed but its content is unusable.
    #[error("invalid configuration: {0}")]
    Invalid(String),
    /// Market-data validation failed (dimensions, positivity, PSD).
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// One asset row.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssetSpec {
    name: String,
    mu: f64,
    vol: f64,
}

/// A number that broadcasts, or one value per asset.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ScalarOrVec {
    Scalar(f64),
    PerAsset(Vec<f64>),
}

impl ScalarOrVec {
    fn materialize(&self, n: usize, key: &str) -> Result<DVector<f64>, ConfigError> {
        match self {
            Self::Scalar(x) => Ok(DVector::from_element(n, *x)),
            Self::PerAsset(v) => {
                if v.len() != n {
                    return Err(ConfigError::Invalid(format!(
                        "{key} has {} entries for {n} assets",
                        v.len()
                    )));
                }
                Ok(DVector::from_vec(v.clone()))
            }
        }
    }
}

/// Constant pairwise correlation, or a full matrix.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum CorrelationSpec {
    Constant(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostsSpec {
    c_minus: Option<ScalarOrVec>,
    c_plus: Option<ScalarOrVec>,
    delta_minus: Option<ScalarOrVec>,
    delta_plus: Option<ScalarOrVec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetSpec {
    gamma: Option<f64>,
    sigma_star: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    /// `"gamma"` or `"sigma"`.
    kind: String,
    min: f64,
    max: f64,
    count: usize,
    /// γ grids default to log spacing; σ grids are always linear.
    log_spaced: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdmmSpec {
    phi: Option<f64>,
    eps_abs: Option<f64>,
    eps_rel: Option<f64>,
    max_iter: Option<usize>,
    adaptive_phi: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrictSpec {
    phi: Option<f64>,
    eps_abs: Option<f64>,
    eps_rel: Option<f64>,
    max_iter: Option<usize>,
    starts: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSpec {
    admm: Option<AdmmSpec>,
    strict: Option<StrictSpec>,
}

/// The raw document, mirroring the file keys one-to-one.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    units: Option<String>,
    assets: Vec<AssetSpec>,
    correlation: Option<CorrelationSpec>,
    covariance: Option<Vec<Vec<f64>>>,
    costs: Option<CostsSpec>,
    current_weights: Vec<f64>,
    mode: Option<String>,
    target: Option<TargetSpec>,
    grid: Option<GridSpec>,
    rebalances_per_year: Option<u32>,
    solver: Option<SolverSpec>,
}

/// What a single solve should aim at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Gamma(f64),
    SigmaStar(f64),
}

/// A fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub names: Vec<String>,
    pub universe: Universe,
    pub costs: CostSpec,
    pub w_tilde: DVector<f64>,
    /// Mode from the file; the CLI flag takes precedence when given.
    pub mode: Option<Mode>,
    /// Target from the file; CLI flags take precedence when given.
    pub target: Option<Target>,
    pub grid: Option<Grid>,
    pub rebalances_per_year: u32,
    pub solver: SolverOptions,
    /// Non-fatal findings (partial investment, overridden inputs).
    pub warnings: Vec<String>,
}

fn to_matrix(rows: &[Vec<f64>], key: &str) -> Result<DMatrix<f64>, ConfigError> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(ConfigError::Invalid(format!("{key} must be square")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Parses and validates a configuration document.
pub fn load_config(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = serde_json::from_str(text)?;
    let mut warnings = Vec::new();

    let rate_scale = match raw.units.as_deref() {
        None | Some("decimal") => 1.0,
        Some("percent") => 0.01,
        Some(other) => {
            return Err(ConfigError::Invalid(format!(
                "units must be \"decimal\" or \"percent\", got \"{other}\""
            )))
        }
    };

    let n = raw.assets.len();
    if n == 0 {
        return Err(ConfigError::Invalid("assets list is empty".into()));
    }
    let names: Vec<String> = raw.assets.iter().map(|a| a.name.clone()).collect();
    let mu = DVector::from_iterator(n, raw.assets.iter().map(|a| a.mu * rate_scale));
    let vols = DVector::from_iterator(n, raw.assets.iter().map(|a| a.vol * rate_scale));

    let universe = if let Some(cov_rows) = &raw.covariance {
        let cov = to_matrix(cov_rows, "covariance")? * (rate_scale * rate_scale);
        if cov.nrows() != n {
            return Err(ConfigError::Invalid(format!(
                "covariance is {}x{} for {n} assets",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if raw.correlation.is_some() {
            warnings.push("covariance provided: correlation ignored".into());
        }
        for i in 0..n {
            let implied = cov[(i, i)].max(0.0).sqrt();
            if (implied - vols[i]).abs() > 1e-9 + 1e-6 * vols[i].abs() {
                warnings.push(format!(
                    "covariance overrides asset volatilities: {} implies {:.6}, vol says {:.6}",
                    names[i], implied, vols[i]
                ));
                break;
            }
        }
        Universe::from_covariance(mu, cov)?
    } else {
        let corr = match &raw.correlation {
            Some(CorrelationSpec::Constant(rho)) => Correlation::Constant(*rho),
            Some(CorrelationSpec::Matrix(rows)) => {
                Correlation::Matrix(to_matrix(rows, "correlation")?)
            }
            None if n == 1 => Correlation::Constant(0.0),
            None => {
                return Err(ConfigError::Invalid(
                    "either correlation or covariance is required".into(),
                ))
            }
        };
        let cov = build_covariance(&vols, &corr)?;
        Universe::from_covariance(mu, cov)?
    };

    let costs_spec = raw.costs.clone().unwrap_or_default();
    let take = |field: &Option<ScalarOrVec>, key: &str| -> Result<DVector<f64>, ConfigError> {
        match field {
            None => Ok(DVector::zeros(n)),
            Some(s) => Ok(s.materialize(n, key)? * rate_scale),
        }
    };
    let costs = CostSpec::new(
        take(&costs_spec.c_minus, "costs.c_minus")?,
        take(&costs_spec.c_plus, "costs.c_plus")?,
        take(&costs_spec.delta_minus, "costs.delta_minus")?,
        take(&costs_spec.delta_plus, "costs.delta_plus")?,
    )?;

    if raw.current_weights.len() != n {
        return Err(ConfigError::Invalid(format!(
            "current_weights has {} entries for {n} assets",
            raw.current_weights.len()
        )));
    }
    let w_tilde =
        DVector::from_iterator(n, raw.current_weights.iter().map(|&w| w * rate_scale));
    let sum = w_tilde.sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        warnings.push(format!(
            "current_weights sum to {sum:.9}, not 1 — treating as partial investment"
        ));
    }

    let mode = match &raw.mode {
        None => None,
        Some(s) => Some(Mode::parse(s).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "unknown mode \"{s}\" (expected mvo, linear, quadratic, or strict)"
            ))
        })?),
    };

    let target = match &raw.target {
        None => None,
        Some(TargetSpec {
            gamma: Some(_),
            sigma_star: Some(_),
        }) => {
            return Err(ConfigError::Invalid(
                "target must set exactly one of gamma/sigma_star, not both".into(),
            ))
        }
        Some(TargetSpec {
            gamma: Some(g),
            sigma_star: None,
        }) => Some(Target::Gamma(*g)),
        Some(TargetSpec {
            gamma: None,
            sigma_star: Some(s),
        }) => Some(Target::SigmaStar(s * rate_scale)),
        Some(TargetSpec {
            gamma: None,
            sigma_star: None,
        }) => {
            return Err(ConfigError::Invalid(
                "target must set exactly one of gamma/sigma_star".into(),
            ))
        }
    };

    let grid = match &raw.grid {
        None => None,
        Some(g) => {
            let grid = match g.kind.as_str() {
                "gamma" => Grid::Gamma {
                    min: g.min,
                    max: g.max,
                    count: g.count,
                    log_spaced: g.log_spaced.unwrap_or(true),
                },
                "sigma" => {
                    if g.log_spaced == Some(true) {
                        return Err(ConfigError::Invalid(
                            "sigma grids are linear; log_spaced is not supported".into(),
                        ));
                    }
                    Grid::Sigma {
                        min: g.min * rate_scale,
                        max: g.max * rate_scale,
                        count: g.count,
                    }
                }
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "grid.kind must be \"gamma\" or \"sigma\", got \"{other}\""
                    )))
                }
            };
            grid.values()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Some(grid)
        }
    };

    let mut solver = SolverOptions::default();
    if let Some(spec) = &raw.solver {
        if let Some(a) = &spec.admm {
            let d = AdmmOptions::default();
            solver.admm = AdmmOptions {
                phi: a.phi.unwrap_or(d.phi),
                eps_abs: a.eps_abs.unwrap_or(d.eps_abs),
                eps_rel: a.eps_rel.unwrap_or(d.eps_rel),
                max_iter: a.max_iter.unwrap_or(d.max_iter),
                adaptive_phi: a.adaptive_phi.unwrap_or(d.adaptive_phi),
                ..d
            };
        }
        if let Some(s) = &spec.strict {
            let d = StrictOptions::default();
            solver.strict = StrictOptions {
                phi: s.phi.unwrap_or(d.phi),
                eps_abs: s.eps_abs.unwrap_or(d.eps_abs),
                eps_rel: s.eps_rel.unwrap_or(d.eps_rel),
                max_iter: s.max_iter.unwrap_or(d.max_iter),
                starts: s.starts.unwrap_or(d.starts),
            };
        }
    }

    Ok(RunConfig {
        names,
        universe,
        costs,
        w_tilde,
        mode,
        target,
        grid,
        rebalances_per_year: raw.rebalances_per_year.unwrap_or(1),
        solver,
        warnings,
    })
}

/// Loads a configuration from a file path.
pub fn load_config_file(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    load_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn table_config_json() -> String {
        r#"{
            "assets": [
                {"name": "A1", "mu": 0.01, "vol": 0.01},
                {"name": "A2", "mu": 0.02, "vol": 0.02},
                {"name": "A3", "mu": 0.03, "vol": 0.03},
                {"name": "A4", "mu": 0.04, "vol": 0.04},
                {"name": "A5", "mu": 0.05, "vol": 0.05},
                {"name": "A6", "mu": 0.075, "vol": 0.075},
                {"name": "A7", "mu": 0.10, "vol": 0.10}
            ],
            "correlation": 0.25,
            "costs": {"c_minus": 0.02, "c_plus": 0.01, "delta_minus": 0.05, "delta_plus": 0.05},
            "current_weights": [0.2613632963, 0.2141311560, 0.1612984393, 0.1279279551,
                                0.1056803443, 0.0734206565, 0.0561781525],
            "mode": "quadratic",
            "target": {"gamma": 0.26042695788525205},
            "rebalances_per_year": 1
        }"#
        .to_string()
    }

    #[test]
    fn table_document_loads() {
        let cfg = load_config(&table_config_json()).unwrap();
        assert_eq!(cfg.names.len(), 7);
        assert_eq!(cfg.names[6], "A7");
        assert_abs_diff_eq!(cfg.universe.mu()[5], 0.075, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.universe.cov()[(0, 1)], 0.25 * 0.01 * 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.costs.c_minus[3], 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.costs.delta_plus[3], 0.05, epsilon = 1e-15);
        assert_eq!(cfg.mode, Some(Mode::Quadratic));
        assert_eq!(cfg.target, Some(Target::Gamma(0.26042695788525205)));
        assert_eq!(cfg.rebalances_per_year, 1);
        assert!(cfg.warnings.is_empty(), "{:?}", cfg.warnings);
    }

    #[test]
    fn percent_units_convert_everything_dimensionful() {
        let decimal = load_config(&table_config_json()).unwrap();
        let percent = load_config(
            &r#"{
                "units": "percent",
                "assets": [
                    {"name": "A1", "mu": 1.0, "vol": 1.0},
                    {"name": "A2", "mu": 2.0, "vol": 2.0},
                    {"name": "A3", "mu": 3.0, "vol": 3.0},
                    {"name": "A4", "mu": 4.0, "vol": 4.0},
                    {"name": "A5", "mu": 5.0, "vol": 5.0},
                    {"name": "A6", "mu": 7.5, "vol": 7.5},
                    {"name": "A7", "mu": 10.0, "vol": 10.0}
                ],
                "correlation": 0.25,
                "costs": {"c_minus": 2.0, "c_plus": 1.0, "delta_minus": 5.0, "delta_plus": 5.0},
                "current_weights": [26.13632963, 21.41311560, 16.12984393, 12.79279551,
                                    10.56803443, 7.34206565, 5.61781525],
                "mode": "quadratic",
                "target": {"gamma": 0.26042695788525205}
            }"#,
        )
        .unwrap();
        for i in 0..7 {
            assert_abs_diff_eq!(
                percent.universe.mu()[i],
                decimal.universe.mu()[i],
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(percent.w_tilde[i], decimal.w_tilde[i], epsilon = 1e-12);
            assert_abs_diff_eq!(
                percent.costs.delta_minus[i],
                decimal.costs.delta_minus[i],
                epsilon = 1e-12
            );
        }
        // γ is dimensionless: untouched by the percent flag.
        assert_eq!(percent.target, decimal.target);
        // σ targets are rates: converted.
        let sigma_cfg = load_config(
            &r#"{
                "units": "percent",
                "assets": [{"name": "A", "mu": 5.0, "vol": 10.0}],
                "current_weights": [100.0],
                "target": {"sigma_star": 6.0}
            }"#,
        )
        .unwrap();
        assert_eq!(sigma_cfg.target, Some(Target::SigmaStar(0.06)));
    }

    #[test]
    fn per_asset_costs_and_matrix_correlation() {
        let cfg = load_config(
            &r#"{
                "assets": [
                    {"name": "A", "mu": 0.03, "vol": 0.05},
                    {"name": "B", "mu": 0.05, "vol": 0.10}
                ],
                "correlation": [[1.0, 0.3], [0.3, 1.0]],
                "costs": {"c_minus": [0.001, 0.002], "delta_plus": 0.01},
                "current_weights": [0.6, 0.4]
            }"#,
        )
        .unwrap();
        assert_abs_diff_eq!(cfg.universe.cov()[(0, 1)], 0.3 * 0.05 * 0.10, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.costs.c_minus[1], 0.002, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.costs.c_plus[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.costs.delta_plus[0], 0.01, epsilon = 1e-15);
        assert_eq!(cfg.mode, None);
        assert_eq!(cfg.target, None);
    }

    #[test]
    fn covariance_overrides_and_warns() {
        let cfg = load_config(
            &r#"{
                "assets": [
                    {"name": "A", "mu": 0.03, "vol": 0.05},
                    {"name": "B", "mu": 0.05, "vol": 0.10}
                ],
                "correlation": 0.9,
                "covariance": [[0.0025, 0.0015], [0.0015, 0.0100]],
                "current_weights": [0.5, 0.5]
            }"#,
        )
        .unwrap();
        assert_abs_diff_eq!(cfg.universe.cov()[(0, 1)], 0.0015, epsilon = 1e-15);
        assert!(cfg
            .warnings
            .iter()
            .any(|w| w.contains("correlation ignored")));
    }

    #[test]
    fn partial_investment_warns_but_loads() {
        let cfg = load_config(
            &r#"{
                "assets": [{"name": "A", "mu": 0.05, "vol": 0.10}],
                "current_weights": [0.98]
            }"#,
        )
        .unwrap();
        assert!(cfg.warnings.iter().any(|w| w.contains("partial investment")));
        assert_abs_diff_eq!(cfg.w_tilde[0], 0.98, epsilon = 1e-15);
    }

    #[test]
    fn conflicting_or_empty_targets_rejected() {
        let both = r#"{
            "assets": [{"name": "A", "mu": 0.05, "vol": 0.10}],
            "current_weights": [1.0],
            "target": {"gamma": 0.5, "sigma_star": 0.04}
        }"#;
        assert!(matches!(load_config(both), Err(ConfigError::Invalid(_))));
        let neither = r#"{
            "assets": [{"name": "A", "mu": 0.05, "vol": 0.10}],
            "current_weights": [1.0],
            "target": {}
        }"#;
        assert!(matches!(load_config(neither), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn structural_mistakes_rejected() {
        // Unknown key.
        assert!(load_config(
            r#"{
                "assets": [{"name": "A", "mu": 0.05, "vol": 0.10}],
                "current_weights": [1.0],
                "turbo": true
            }"#
        )
        .is_err());
        // Unknown mode.
        assert!(matches!(
            load_config(
                r#"{
                    "assets": [{"name": "A", "mu": 0.05, "vol": 0.10}],
                    "current_weights": [1.0],
                    "mode": "sharpe"
                }"#
            ),
            Err(ConfigError::Invalid(_))
        ));
        // Wrong-length cost vector.
        assert!(matches!(
            load_config(
                r#"{
                    "assets": [{"name": "A", "mu": 0.05, "vol": 0.10}],
                    "current_weights": [1.0],
                    "costs": {"c_minus": [0.01, 0.02]}
                }"#
            ),
            Err(ConfigError::Invalid(_))
        ));
        // Missing correlation with several assets.
        assert!(matches!(
            load_config(
                r#"{
                    "assets": [
                        {"name": "A", "mu": 0.03, "vol": 0.05},
                        {"name": "B", "mu": 0.05, "vol": 0.10}
                    ],
                    "current_weights": [0.5, 0.5]
                }"#
            ),
            Err(ConfigError::Invalid(_))
        ));
        // Wrong-length weights.
        assert!(matches!(
            load_config(
                r#"{
                    "assets": [{"name": "A", "mu": 0.05, "vol": 0.10}],
                    "current_weights": [0.5, 0.5]
                }"#
            ),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn grid_and_solver_overrides_apply() {
        let cfg = load_config(
            &r#"{
                "assets": [{"name": "A", "mu": 0.05, "vol": 0.10}],
                "current_weights": [1.0],
                "grid": {"kind": "gamma", "min": 0.001, "max": 10.0, "count": 25},
                "solver": {
                    "admm": {"max_iter": 9000, "adaptive_phi": true},
                    "strict": {"starts": 3}
                }
            }"#,
        )
        .unwrap();
        match cfg.grid {
            Some(Grid::Gamma {
                count, log_spaced, ..
            }) => {
                assert_eq!(count, 25);
                assert!(log_spaced);
            }
            other => panic!("expected gamma grid, got {other:?}"),
        }
        assert_eq!(cfg.solver.admm.max_iter, 9000);
        assert!(cfg.solver.admm.adaptive_phi);
        assert_abs_diff_eq!(cfg.solver.admm.phi, 1.0, epsilon = 1e-15);
        assert_eq!(cfg.solver.strict.starts, 3);

        // σ grids convert under percent units and reject log spacing.
        let sigma = load_config(
            &r#"{
                "units": "percent",
                "assets": [{"name": "A", "mu": 5.0, "vol": 10.0}],
                "current_weights": [100.0],
                "grid": {"kind": "sigma", "min": 2.0, "max": 6.0, "count": 9}
            }"#,
        )
        .unwrap();
        match sigma.grid {
            Some(Grid::Sigma { min, max, count }) => {
                assert_abs_diff_eq!(min, 0.02, epsilon = 1e-15);
                assert_abs_diff_eq!(max, 0.06, epsilon = 1e-15);
                assert_eq!(count, 9);
            }
            other => panic!("expected sigma grid, got {other:?}"),
        }
        assert!(load_config(
            r#"{
                "assets": [{"name": "A", "mu": 0.05, "vol": 0.10}],
                "current_weights": [1.0],
                "grid": {"kind": "sigma", "min": 0.02, "max": 0.06, "count": 9, "log_spaced": true}
            }"#
        )
        .is_err());
    }
}
