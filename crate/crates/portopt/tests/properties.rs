//! Property-based checks of the library's structural invariants: cost
//! identities, trade-splitting algebra, projection surface membership,
//! QP optimality conditions, and the monotonicity that volatility
//! targeting relies on.

use nalgebra::{DMatrix, DVector};
use portopt::admm::assemble_qc;
use portopt::linear::solve_lc;
use portopt::market::{
    cost_linear, cost_quadratic, normalize, split_trades, Correlation, CostSpec, Universe,
};
use portopt::projection::{budget_residual_stacked, project, secular_residual, ProjectionInput};
use portopt::qp::{solve_qp_default, QpProblem, QpStatus};
use proptest::prelude::*;

/// Strictly positive weights normalized to the simplex.
fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn small_universe() -> Universe {
    let mu = DVector::from_vec(vec![0.02, 0.05, 0.08]);
    let vols = DVector::from_vec(vec![0.05, 0.10, 0.20]);
    Universe::new(mu, vols, &Correlation::Constant(0.3)).unwrap()
}

fn cost_spec(n: usize) -> impl Strategy<Value = CostSpec> {
    (
        prop::collection::vec(0.0f64..0.05, n),
        prop::collection::vec(0.0f64..0.05, n),
        prop::collection::vec(0.0f64..0.2, n),
        prop::collection::vec(0.0f64..0.2, n),
    )
        .prop_map(|(cm, cp, dm, dp)| {
            CostSpec::new(
                DVector::from_vec(cm),
                DVector::from_vec(cp),
                DVector::from_vec(dm),
                DVector::from_vec(dp),
            )
            .unwrap()
        })
}

proptest! {
    /// Staying put is free, and any move costs a nonnegative amount.
    #[test]
    fn costs_vanish_only_at_the_current_book(
        w in simplex(4),
        w_tilde in simplex(4),
        cs in cost_spec(4),
    ) {
        let w = DVector::from_vec(w);
        let w_tilde = DVector::from_vec(w_tilde);
        prop_assert!(cost_linear(&cs, &w_tilde, &w_tilde).abs() < 1e-15);
        prop_assert!(cost_quadratic(&cs, &w_tilde, &w_tilde).abs() < 1e-15);
        prop_assert!(cost_linear(&cs, &w, &w_tilde) >= 0.0);
        prop_assert!(cost_quadratic(&cs, &w, &w_tilde) >= 0.0);
        // The quadratic model dominates the linear one: same linear part
        // plus nonnegative slope terms.
        prop_assert!(
            cost_quadratic(&cs, &w, &w_tilde) >= cost_linear(&cs, &w, &w_tilde) - 1e-15
        );
    }

    /// Sales and purchases reconstruct the trade and never overlap.
    #[test]
    fn trade_split_is_exact_and_one_sided(
        w in simplex(5),
        w_tilde in simplex(5),
    ) {
        let w = DVector::from_vec(w);
        let w_tilde = DVector::from_vec(w_tilde);
        let split = split_trades(&w, &w_tilde);
        for i in 0..5 {
            prop_assert!(split.dw_minus[i] >= 0.0);
            prop_assert!(split.dw_plus[i] >= 0.0);
            prop_assert!(split.dw_minus[i] * split.dw_plus[i] < 1e-15);
            prop_assert!(
                (split.dw_plus[i] - split.dw_minus[i] - (w[i] - w_tilde[i])).abs() < 1e-12
            );
        }
    }

    /// Renormalization is idempotent and blind to overall scale.
    #[test]
    fn normalization_is_idempotent_and_scale_invariant(
        w in prop::collection::vec(0.01f64..2.0, 6),
        alpha in 0.1f64..10.0,
    ) {
        let w = DVector::from_vec(w);
        let once = normalize(&w).unwrap();
        let twice = normalize(&once).unwrap();
        let scaled = normalize(&(&w * alpha)).unwrap();
        prop_assert!((once.sum() - 1.0).abs() < 1e-12);
        for i in 0..6 {
            prop_assert!((once[i] - twice[i]).abs() < 1e-12);
            prop_assert!((once[i] - scaled[i]).abs() < 1e-12);
        }
    }

    /// The budget projection returns a point of the budget surface, and
    /// an input already on the surface stays put.
    #[test]
    fn budget_projection_lands_on_the_surface(
        v in prop::collection::vec(-0.5f64..1.5, 4),
        dvm in prop::collection::vec(-0.2f64..0.4, 4),
        dvp in prop::collection::vec(-0.2f64..0.4, 4),
        cs in cost_spec(4),
    ) {
        let p = ProjectionInput::new(
            DVector::from_vec(v),
            DVector::from_vec(dvm),
            DVector::from_vec(dvp),
            cs.clone(),
        ).unwrap();
        let r = project(&p).unwrap();
        prop_assert!(budget_residual_stacked(&cs, &r.y).abs() <= 1e-8);
        prop_assert!(r.distance >= 0.0);

        let back = ProjectionInput::from_stacked(&r.y, &cs).unwrap();
        let again = project(&back).unwrap();
        prop_assert!(again.distance <= 1e-7);
        for i in 0..again.y.len() {
            prop_assert!((again.y[i] - r.y[i]).abs() <= 1e-7);
        }
    }

    /// The projection's scalar equation is strictly decreasing on its
    /// domain — the fact the bisection route rests on.
    #[test]
    fn projection_secular_function_decreases(
        v in prop::collection::vec(-0.5f64..1.5, 3),
        dvm in prop::collection::vec(-0.2f64..0.4, 3),
        dvp in prop::collection::vec(-0.2f64..0.4, 3),
        cs in cost_spec(3),
        t1 in 0.0f64..2.0,
        t2 in 0.0f64..2.0,
    ) {
        prop_assume!((t1 - t2).abs() > 1e-6);
        let p = ProjectionInput::new(
            DVector::from_vec(v),
            DVector::from_vec(dvm),
            DVector::from_vec(dvp),
            cs,
        ).unwrap();
        // Both sample multipliers sit right of every pole (λ ≥ 0 works
        // for nonnegative slopes).
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let f_lo = secular_residual(lo, &p).unwrap();
        let f_hi = secular_residual(hi, &p).unwrap();
        prop_assert!(f_lo > f_hi, "f({lo}) = {f_lo} vs f({hi}) = {f_hi}");
    }

    /// Boxed QP solutions satisfy their own optimality report: equality
    /// feasibility, bounds, and a small stationarity residual.
    #[test]
    fn qp_solutions_are_feasible_and_stationary(
        m_entries in prop::collection::vec(-1.0f64..1.0, 16),
        r in prop::collection::vec(-1.0f64..1.0, 4),
        x_feas in prop::collection::vec(0.1f64..0.9, 4),
    ) {
        let m = DMatrix::from_vec(4, 4, m_entries);
        let q = &m.transpose() * &m + DMatrix::identity(4, 4) * 0.1;
        let a = DMatrix::from_element(1, 4, 1.0);
        let x_feas = DVector::from_vec(x_feas);
        let b = DVector::from_element(1, x_feas.sum());
        let prob = QpProblem::new(
            q,
            DVector::from_vec(r),
            a,
            b.clone(),
            DVector::zeros(4),
            DVector::from_element(4, 1.0),
        ).unwrap();
        let sol = solve_qp_default(&prob);
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!((sol.x.sum() - b[0]).abs() <= 1e-8);
        for i in 0..4 {
            prop_assert!(sol.x[i] >= -1e-10 && sol.x[i] <= 1.0 + 1e-10);
        }
        prop_assert!(sol.kkt_residual <= 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every proportional-cost solve balances the books: invested wealth
    /// plus cost paid equals starting wealth, and no asset is bought and
    /// sold at once.
    #[test]
    fn proportional_solves_balance_wealth(
        w_tilde in simplex(3),
        gamma in 0.0f64..1.0,
        cm in 0.0f64..0.03,
        cp in 0.0f64..0.03,
    ) {
        let u = small_universe();
        let cs = CostSpec::uniform(3, cm, cp, 0.0, 0.0).unwrap();
        let w_tilde = DVector::from_vec(w_tilde);
        let sol = solve_lc(&u, &cs, &w_tilde, gamma).unwrap();
        let budget = sol.w_star.sum() + cost_linear(&cs, &sol.w_star, &w_tilde) - 1.0;
        prop_assert!(budget.abs() <= 1e-6, "budget residual {budget}");
        prop_assert!(sol.max_complementarity <= 1e-6);
    }

    /// Raw volatility is nondecreasing in the risk tolerance — the
    /// premise of the γ-bisection.
    #[test]
    fn volatility_grows_with_risk_tolerance(
        w_tilde in simplex(3),
        g1 in 0.0f64..2.0,
        g2 in 0.0f64..2.0,
        cm in 0.0f64..0.03,
    ) {
        prop_assume!((g1 - g2).abs() > 1e-9);
        let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
        let u = small_universe();
        let cs = CostSpec::uniform(3, cm, cm / 2.0, 0.0, 0.0).unwrap();
        let w_tilde = DVector::from_vec(w_tilde);
        let s_lo = u.volatility(&solve_lc(&u, &cs, &w_tilde, lo).unwrap().w_star);
        let s_hi = u.volatility(&solve_lc(&u, &cs, &w_tilde, hi).unwrap().w_star);
        prop_assert!(s_lo <= s_hi + 1e-9, "σ({lo}) = {s_lo} > σ({hi}) = {s_hi}");
    }

    /// The splitting solver's canonical starting point is always
    /// budget-feasible: holding the current book pays nothing.
    #[test]
    fn holdings_start_is_budget_feasible(
        w_tilde in simplex(5),
        cs in cost_spec(5),
    ) {
        let mu = DVector::from_vec(vec![0.01, 0.02, 0.04, 0.06, 0.09]);
        let u = Universe::new(mu.clone(), mu, &Correlation::Constant(0.2)).unwrap();
        let w_tilde = DVector::from_vec(w_tilde);
        let asm = assemble_qc(&u, &cs, &w_tilde, 0.5).unwrap();
        prop_assert!(asm.budget_residual(&asm.initial_point()).abs() <= 1e-12);
    }
}
