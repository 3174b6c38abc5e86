//! Command-line frontend: single solves, frontier sweeps, side-by-side
//! comparison tables, and budget-projection debugging, driven by a JSON
//! configuration file.
//!
//! Exit codes: 0 on success, 1 when a solver fails, 2 on configuration or
//! usage errors (the same code `clap` uses for bad invocations).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use portopt::admm::{admm_solve, assemble_qc, AdmmDiagnostics};
use portopt::config::{load_config_file, RunConfig, Target};
use portopt::frontier::{
    compare_report, frontier, solve_for_target_vol, solve_gamma, CompareReport, FrontierSweep,
    Grid, Mode, DEFAULT_VOL_TOL,
};
use portopt::market::{net_expected_return, normalize, CostKind, CostSpec};
use portopt::projection::{budget_residual_stacked, project, ProjectionInput};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "portopt",
    version,
    about = "Mean-variance portfolio optimization under linear and quadratic transaction costs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one portfolio at a risk tolerance or a volatility target.
    Optimize(OptimizeArgs),
    /// Sweep the efficient frontier over a grid of risk tolerances
    /// (volatility targets in strict mode).
    Frontier(FrontierArgs),
    /// Books optimized with and without cost awareness at one volatility
    /// target, side by side.
    Compare(CompareArgs),
    /// Debug helper: project a stacked point onto the budget surface.
    Project(ProjectArgs),
}

#[derive(Args)]
struct OptimizeArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Optimization mode: mvo | linear | quadratic | strict. Overrides the
    /// config file.
    #[arg(long)]
    mode: Option<String>,
    /// Risk tolerance γ (decimal). Overrides the config target.
    #[arg(long, conflicts_with = "target_vol")]
    gamma: Option<f64>,
    /// Volatility target as a decimal (0.04 = 4%). Overrides the config
    /// target.
    #[arg(long)]
    target_vol: Option<f64>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Print solver diagnostics to stderr (and embed them in JSON output).
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct FrontierArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Optimization mode: mvo | linear | quadratic | strict. Overrides the
    /// config file.
    #[arg(long)]
    mode: Option<String>,
    /// Grid lower end: γ for the tolerance-driven modes, σ (decimal) in
    /// strict mode. All three --grid-* flags go together.
    #[arg(long)]
    grid_min: Option<f64>,
    /// Grid upper end.
    #[arg(long)]
    grid_max: Option<f64>,
    /// Number of grid points.
    #[arg(long)]
    grid_count: Option<usize>,
    /// Rebalances per year priced into net returns. Overrides the config.
    #[arg(long)]
    rebalances: Option<u32>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Print a convergence summary to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Volatility target as a decimal (0.04 = 4%). Overrides the config
    /// target.
    #[arg(long)]
    target_vol: Option<f64>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CompareFormat::Text)]
    format: CompareFormat,
    /// Print the tuned risk tolerances to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct ProjectArgs {
    /// JSON file with the point and the cost structure: {"v": [...],
    /// "dv_minus": [...], "dv_plus": [...], "costs": {"c_minus": ...,
    /// "c_plus": ..., "delta_minus": ..., "delta_plus": ...}} — cost
    /// entries may be one scalar or one value per asset.
    #[arg(long)]
    input: PathBuf,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Copy, Clone, ValueEnum)]
enum CompareFormat {
    Text,
    Json,
}

/// Failures split by exit code: configuration problems (2) versus solver
/// or output problems (1).
enum CliError {
    Config(String),
    Run(String),
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Optimize(args) => cmd_optimize(args),
        Command::Frontier(args) => cmd_frontier(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Project(args) => cmd_project(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load(path: &PathBuf) -> Result<RunConfig, CliError> {
    let cfg = load_config_file(path).map_err(config_err)?;
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn resolve_mode(flag: &Option<String>, from_config: Option<Mode>) -> Result<Mode, CliError> {
    match flag {
        Some(s) => Mode::parse(s).ok_or_else(|| {
            CliError::Config(format!(
                "unknown mode \"{s}\" (expected mvo, linear, quadratic, or strict)"
            ))
        }),
        None => from_config.ok_or_else(|| {
            CliError::Config("no mode given: pass --mode or set \"mode\" in the config".into())
        }),
    }
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, content)
            .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// Ten significant digits, deterministic across platforms.
fn sig(x: f64) -> String {
    format!("{x:.9e}")
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// optimize
// ---------------------------------------------------------------------------

/// One solve, flattened for output. CSV uses the same column set as the
/// frontier sweep.
#[derive(Serialize)]
struct SolveRecord {
    mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_target: Option<f64>,
    names: Vec<String>,
    sigma_bar: f64,
    mu_gross: f64,
    cost_paid: f64,
    mu_net: f64,
    wealth: f64,
    converged: bool,
    weights_raw: Vec<f64>,
    weights_norm: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<AdmmDiagnostics>,
}

#[allow(clippy::too_many_arguments)]
fn build_record(
    cfg: &RunConfig,
    mode: Mode,
    gamma: Option<f64>,
    sigma_target: Option<f64>,
    w_star: DVector<f64>,
    cost_paid: f64,
    converged: bool,
    diagnostics: Option<AdmmDiagnostics>,
) -> Result<SolveRecord, CliError> {
    let w_bar = normalize(&w_star).map_err(run_err)?;
    let (mu_gross, sigma_bar) = cfg.universe.portfolio_stats(&w_bar).map_err(run_err)?;
    let kind = match mode {
        Mode::Mvo => None,
        Mode::Linear => Some(CostKind::Linear),
        Mode::Quadratic | Mode::Strict => Some(CostKind::Quadratic),
    };
    let mu_net = match kind {
        None => cfg.universe.expected_return(&w_star),
        Some(kind) => net_expected_return(
            &cfg.universe,
            &w_star,
            &cfg.w_tilde,
            &cfg.costs,
            kind,
            cfg.rebalances_per_year,
        )
        .map_err(run_err)?,
    };
    Ok(SolveRecord {
        mode,
        gamma,
        sigma_target,
        names: cfg.names.clone(),
        sigma_bar,
        mu_gross,
        cost_paid,
        mu_net,
        wealth: w_star.sum(),
        converged,
        weights_raw: w_star.iter().copied().collect(),
        weights_norm: w_bar.iter().copied().collect(),
        diagnostics,
    })
}

fn record_csv(r: &SolveRecord) -> String {
    let mut out = String::from("gamma,sigma_bar,mu_gross,cost_paid,mu_net,wealth");
    for name in &r.names {
        out.push(',');
        out.push_str(&csv_field(name));
    }
    out.push('\n');
    if let Some(g) = r.gamma {
        out.push_str(&sig(g));
    }
    for v in [r.sigma_bar, r.mu_gross, r.cost_paid, r.mu_net, r.wealth] {
        out.push(',');
        out.push_str(&sig(v));
    }
    for w in &r.weights_norm {
        out.push(',');
        out.push_str(&sig(*w));
    }
    out.push('\n');
    out
}

fn cmd_optimize(args: OptimizeArgs) -> Result<(), CliError> {
    let cfg = load(&args.config)?;
    let mode = resolve_mode(&args.mode, cfg.mode)?;
    let target = match (args.gamma, args.target_vol) {
        (Some(g), None) => Target::Gamma(g),
        (None, Some(s)) => Target::SigmaStar(s),
        (None, None) => cfg.target.clone().ok_or_else(|| {
            CliError::Config(
                "no target given: pass --gamma or --target-vol, or set \"target\" in the config"
                    .into(),
            )
        })?,
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };

    let record = match target {
        Target::Gamma(gamma) => {
            if mode == Mode::Strict {
                return Err(CliError::Config(
                    "strict mode solves volatility targets; pass --target-vol instead of --gamma"
                        .into(),
                ));
            }
            if !(gamma.is_finite() && gamma >= 0.0) {
                return Err(CliError::Config(format!(
                    "risk tolerance must be finite and nonnegative, got {gamma}"
                )));
            }
            if mode == Mode::Quadratic {
                // Direct solve so the convergence report can be surfaced.
                let asm =
                    assemble_qc(&cfg.universe, &cfg.costs, &cfg.w_tilde, gamma).map_err(run_err)?;
                let mut opts = cfg.solver.admm.clone();
                opts.record_trajectory = opts.record_trajectory || args.verbose;
                let sol = admm_solve(&asm, &opts).map_err(run_err)?;
                if args.verbose {
                    let d = &sol.diagnostics;
                    eprintln!(
                        "iterations: {}, converged: {}, primal {:.3e} (tol {:.3e}), dual {:.3e} (tol {:.3e}), phi {}",
                        d.iterations, d.converged, d.primal_residual, d.eps_primal,
                        d.dual_residual, d.eps_dual, d.phi_final
                    );
                }
                let diagnostics = args.verbose.then_some(sol.diagnostics.clone());
                build_record(
                    &cfg,
                    mode,
                    Some(gamma),
                    None,
                    sol.w_star,
                    sol.cost_paid,
                    sol.diagnostics.converged,
                    diagnostics,
                )?
            } else {
                let sol = solve_gamma(mode, &cfg.universe, &cfg.costs, &cfg.w_tilde, gamma, &cfg.solver)
                    .map_err(run_err)?;
                build_record(
                    &cfg,
                    mode,
                    Some(gamma),
                    None,
                    sol.w_star,
                    sol.cost_paid,
                    sol.converged,
                    None,
                )?
            }
        }
        Target::SigmaStar(sigma) => {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(CliError::Config(format!(
                    "volatility target must be finite and positive, got {sigma}"
                )));
            }
            let tv = solve_for_target_vol(
                mode,
                &cfg.universe,
                &cfg.costs,
                &cfg.w_tilde,
                sigma,
                DEFAULT_VOL_TOL,
                &cfg.solver,
            )
            .map_err(run_err)?;
            if args.verbose {
                match tv.gamma {
                    Some(g) => eprintln!(
                        "target σ = {sigma}: realized σ(w*) = {:.6}, risk tolerance γ = {g:.10}",
                        tv.sigma
                    ),
                    None => eprintln!("target σ = {sigma}: realized σ(w*) = {:.6}", tv.sigma),
                }
            }
            build_record(
                &cfg,
                mode,
                tv.gamma,
                Some(sigma),
                tv.solution.w_star,
                tv.solution.cost_paid,
                tv.solution.converged,
                None,
            )?
        }
    };

    let content = match args.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&record).map_err(run_err)?;
            s.push('\n');
            s
        }
        Format::Csv => record_csv(&record),
    };
    emit(&args.out, &content)
}

// ---------------------------------------------------------------------------
// frontier
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SweepOutput<'a> {
    mode: Mode,
    rebalances_per_year: u32,
    names: &'a [String],
    #[serde(flatten)]
    sweep: &'a FrontierSweep,
}

fn sweep_csv(names: &[String], sweep: &FrontierSweep) -> String {
    let mut out = String::from("gamma,sigma_bar,mu_gross,cost_paid,mu_net,wealth");
    for name in names {
        out.push(',');
        out.push_str(&csv_field(name));
    }
    out.push('\n');
    for p in &sweep.points {
        if let Some(g) = p.gamma {
            out.push_str(&sig(g));
        }
        for v in [p.sigma_bar, p.mu_gross, p.cost_paid, p.mu_net, p.wealth] {
            out.push(',');
            out.push_str(&sig(v));
        }
        for w in &p.weights_norm {
            out.push(',');
            out.push_str(&sig(*w));
        }
        out.push('\n');
    }
    out
}

fn cmd_frontier(args: FrontierArgs) -> Result<(), CliError> {
    let cfg = load(&args.config)?;
    let mode = resolve_mode(&args.mode, cfg.mode)?;

    let grid = match (args.grid_min, args.grid_max, args.grid_count) {
        (None, None, None) => cfg.grid.clone().unwrap_or_else(Grid::default_gamma),
        (Some(min), Some(max), Some(count)) => {
            if mode == Mode::Strict {
                Grid::Sigma { min, max, count }
            } else {
                Grid::Gamma {
                    min,
                    max,
                    count,
                    log_spaced: min > 0.0,
                }
            }
        }
        _ => {
            return Err(CliError::Config(
                "pass all of --grid-min, --grid-max, --grid-count, or none of them".into(),
            ))
        }
    };
    if mode == Mode::Strict && matches!(grid, Grid::Gamma { .. }) {
        return Err(CliError::Config(
            "strict mode sweeps volatility targets; configure a sigma grid".into(),
        ));
    }

    let rebalances = args.rebalances.unwrap_or(cfg.rebalances_per_year);
    let sweep = frontier(
        mode,
        &cfg.universe,
        &cfg.costs,
        &cfg.w_tilde,
        &grid,
        rebalances,
        &cfg.solver,
    )
    .map_err(run_err)?;

    for f in &sweep.failures {
        eprintln!(
            "warning: grid point {} (value {:.6}) failed: {}",
            f.index, f.parameter, f.message
        );
    }
    if sweep.points.is_empty() {
        return Err(CliError::Run(
            "no grid point produced a portfolio".into(),
        ));
    }
    if args.verbose {
        let converged = sweep.points.iter().filter(|p| p.converged).count();
        eprintln!(
            "{} points ({} converged), {} failures",
            sweep.points.len(),
            converged,
            sweep.failures.len()
        );
    }

    let content = match args.format {
        Format::Csv => sweep_csv(&cfg.names, &sweep),
        Format::Json => {
            let out = SweepOutput {
                mode,
                rebalances_per_year: rebalances,
                names: &cfg.names,
                sweep: &sweep,
            };
            let mut s = serde_json::to_string_pretty(&out).map_err(run_err)?;
            s.push('\n');
            s
        }
    };
    emit(&args.out, &content)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

fn compare_text(names: &[String], report: &CompareReport) -> String {
    let row_labels: Vec<String> = names
        .iter()
        .cloned()
        .chain(
            [
                "expected return",
                "volatility",
                "cost (proportional)",
                "cost (quadratic)",
                "net return (proportional)",
                "net return (quadratic)",
            ]
            .map(String::from),
        )
        .collect();
    let label_width = row_labels.iter().map(String::len).max().unwrap_or(0).max(4);
    let widths: Vec<usize> = report.columns.iter().map(|c| c.label.len().max(6)).collect();

    let pct = |x: f64| format!("{:.2}", 100.0 * x);
    let mut out = String::new();
    out.push_str(&format!("{:label_width$}", ""));
    for (c, w) in report.columns.iter().zip(&widths) {
        out.push_str(&format!("  {:>w$}", c.label));
    }
    out.push('\n');

    let n = names.len();
    for (i, label) in row_labels.iter().enumerate() {
        out.push_str(&format!("{label:label_width$}"));
        for (c, w) in report.columns.iter().zip(&widths) {
            let value = if i < n {
                c.weights[i]
            } else {
                match i - n {
                    0 => c.mu,
                    1 => c.sigma,
                    2 => c.cost_linear,
                    3 => c.cost_quadratic,
                    4 => c.mu_net_linear,
                    _ => c.mu_net_quadratic,
                }
            };
            out.push_str(&format!("  {:>w$}", pct(value)));
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "all values in percent; volatility target {}\n",
        pct(report.sigma_target)
    ));
    out
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let cfg = load(&args.config)?;
    let sigma_target = match (args.target_vol, &cfg.target) {
        (Some(s), _) => s,
        (None, Some(Target::SigmaStar(s))) => *s,
        _ => {
            return Err(CliError::Config(
                "compare needs a volatility target: pass --target-vol or set target.sigma_star"
                    .into(),
            ))
        }
    };
    if !(sigma_target.is_finite() && sigma_target > 0.0) {
        return Err(CliError::Config(format!(
            "volatility target must be finite and positive, got {sigma_target}"
        )));
    }

    let report = compare_report(
        &cfg.universe,
        &cfg.costs,
        &cfg.w_tilde,
        sigma_target,
        &cfg.solver,
    )
    .map_err(run_err)?;
    if args.verbose {
        eprintln!(
            "risk tolerances: cost-blind {:.10}, proportional {:.10}, quadratic {:.10}",
            report.gamma_mvo, report.gamma_linear, report.gamma_quadratic
        );
    }

    let content = match args.format {
        CompareFormat::Text => compare_text(&cfg.names, &report),
        CompareFormat::Json => {
            let mut s = serde_json::to_string_pretty(&report).map_err(run_err)?;
            s.push('\n');
            s
        }
    };
    emit(&args.out, &content)
}

// ---------------------------------------------------------------------------
// project
// ---------------------------------------------------------------------------

/// One scalar broadcast to every asset, or one value per asset.
#[derive(Deserialize)]
#[serde(untagged)]
enum ScalarOrVec {
    Scalar(f64),
    Vec(Vec<f64>),
}

impl ScalarOrVec {
    fn materialize(&self, n: usize, key: &str) -> Result<DVector<f64>, CliError> {
        match self {
            ScalarOrVec::Scalar(x) => Ok(DVector::from_element(n, *x)),
            ScalarOrVec::Vec(v) if v.len() == n => Ok(DVector::from_vec(v.clone())),
            ScalarOrVec::Vec(v) => Err(CliError::Config(format!(
                "{key} has {} entries for {n} assets",
                v.len()
            ))),
        }
    }
}

impl Default for ScalarOrVec {
    fn default() -> Self {
        ScalarOrVec::Scalar(0.0)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectCosts {
    #[serde(default)]
    c_minus: ScalarOrVec,
    #[serde(default)]
    c_plus: ScalarOrVec,
    #[serde(default)]
    delta_minus: ScalarOrVec,
    #[serde(default)]
    delta_plus: ScalarOrVec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectInputFile {
    v: Vec<f64>,
    dv_minus: Vec<f64>,
    dv_plus: Vec<f64>,
    costs: ProjectCosts,
}

#[derive(Serialize)]
struct ProjectOutput {
    /// Surface point as one stacked vector (weights, sells, buys).
    y: Vec<f64>,
    /// Lagrange multiplier of the budget constraint.
    lambda: f64,
    /// Euclidean distance from the input point to `y`.
    distance: f64,
    /// KKT candidates compared (1 on the bisection route).
    candidates_considered: usize,
    /// Budget residual at `y` (zero up to the solve tolerance).
    budget_residual: f64,
}

fn cmd_project(args: ProjectArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.input)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.input.display())))?;
    let raw: ProjectInputFile = serde_json::from_str(&text).map_err(config_err)?;

    let n = raw.v.len();
    let cs = CostSpec::new(
        raw.costs.c_minus.materialize(n, "costs.c_minus")?,
        raw.costs.c_plus.materialize(n, "costs.c_plus")?,
        raw.costs.delta_minus.materialize(n, "costs.delta_minus")?,
        raw.costs.delta_plus.materialize(n, "costs.delta_plus")?,
    )
    .map_err(config_err)?;
    let input = ProjectionInput::new(
        DVector::from_vec(raw.v),
        DVector::from_vec(raw.dv_minus),
        DVector::from_vec(raw.dv_plus),
        cs.clone(),
    )
    .map_err(config_err)?;

    let result = project(&input).map_err(run_err)?;
    let output = ProjectOutput {
        distance: (&result.y - input.stacked()).norm(),
        budget_residual: budget_residual_stacked(&cs, &result.y),
        y: result.y.iter().copied().collect(),
        lambda: result.lambda,
        candidates_considered: result.candidates_considered,
    };
    let mut s = serde_json::to_string_pretty(&output).map_err(run_err)?;
    s.push('\n');
    emit(&args.out, &s)
}
