//! Property tests of structural invariants over randomly generated games.

use nashpde::calculus::{quadratic_form, quadratic_split, symmetrized_apply, EquilibriumPoint};
use nashpde::cli::config::{self, Instance};
use nashpde::equilibrium::{check_variational_equilibrium, solve_equilibrium, SolverSettings};
use nashpde::game::ControlProfile;
use nashpde::mesh::GridFunction;
use nashpde::stability::{certify_with, CertifySettings};
use proptest::prelude::*;

fn instance(f: &str, players: &[(f64, f64, f64)], tilt: &[f64]) -> Instance {
    let players: Vec<String> = players
        .iter()
        .map(|(zeta, amp, freq)| {
            format!(
                r#"{{"L": "0.5*(y - yd)^2", "yd": "{amp}*sin({freq}*x1)", "zeta": {zeta}, "alpha": -1, "beta": 1}}"#
            )
        })
        .collect();
    let tilt: Vec<String> = tilt
        .iter()
        .map(|a| format!(r#""{a}*sin(3.141592653589793*x1)""#))
        .collect();
    let text = format!(
        r#"{{"grid": {{"dim": 1, "extents": [[0, 1]], "points": [33]}}, "f": "{f}",
            "players": [{}], "tilt": [{}], "solver": {{"tolerance": 1e-11}}}}"#,
        players.join(","),
        tilt.join(",")
    );
    config::parse(&text).unwrap()
}

fn field(inst: &Instance, coeffs: &[f64]) -> GridFunction {
    GridFunction::from_fn(inst.spec.grid(), |x| {
        coeffs
            .iter()
            .enumerate()
            .map(|(m, c)| c * ((m + 1) as f64 * std::f64::consts::PI * x[0]).sin())
            .sum()
    })
}

fn player_strategy() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.05f64..2.0, -4.0f64..4.0, 0.5f64..6.0)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn equilibria_satisfy_the_normal_cone_condition(
        players in prop::collection::vec(player_strategy(), 1..=3),
        cubic in any::<bool>(),
        amp in -3.0f64..3.0,
    ) {
        let tilt = vec![amp; players.len()];
        let inst = instance(if cubic { "y^3" } else { "0" }, &players, &tilt);
        let r = solve_equilibrium(&inst.spec, &inst.perturbation, &inst.tilt, &inst.solver, None).unwrap();
        prop_assert!(r.converged);
        prop_assert!(inst.spec.is_feasible(&inst.perturbation, &r.u_bar));
        let report = check_variational_equilibrium(&inst.spec, &r, 1e-9);
        prop_assert!(report.passed(), "violation {}", report.worst_violation());
    }

    #[test]
    fn symmetrized_jacobian_is_self_adjoint(
        players in prop::collection::vec(player_strategy(), 1..=3),
        coeffs in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let inst = instance("y^3", &players, &vec![0.0; players.len()]);
        let m = players.len();
        let u = ControlProfile::new((0..m).map(|k| field(&inst, &coeffs[k..k + 2]).scale(0.5)).collect());
        let pt = EquilibriumPoint::evaluate(&inst.spec, &u, &inst.perturbation).unwrap();
        let h = ControlProfile::new((0..m).map(|k| field(&inst, &coeffs[k + 2..k + 5])).collect());
        let g = ControlProfile::new((0..m).map(|k| field(&inst, &coeffs[k + 3..k + 6])).collect());
        let a = symmetrized_apply(&inst.spec, &pt, &h).unwrap().inner(&g).unwrap();
        let b = symmetrized_apply(&inst.spec, &pt, &g).unwrap().inner(&h).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        let q = quadratic_form(&inst.spec, &pt, &h).unwrap();
        let s = symmetrized_apply(&inst.spec, &pt, &h).unwrap().inner(&h).unwrap();
        prop_assert!((q - s).abs() <= 1e-10 * (1.0 + q.abs()));
        let split = quadratic_split(&inst.spec, &pt, &h).unwrap();
        prop_assert!((q - split.total()).abs() <= 1e-10 * (1.0 + q.abs()));
    }

    #[test]
    fn tracking_games_certify_above_the_control_cost(
        players in prop::collection::vec(player_strategy(), 1..=2),
        amp in -3.0f64..3.0,
    ) {
        let inst = instance("0", &players, &vec![amp; players.len()]);
        let r = solve_equilibrium(&inst.spec, &inst.perturbation, &inst.tilt, &inst.solver, None).unwrap();
        let cert = certify_with(&inst.spec, &r, &CertifySettings::default()).unwrap();
        // with one player Q1 = ‖z‖² ≥ 0; several players couple through z_j
        if players.len() == 1 {
            prop_assert!(cert.lambda_min >= players[0].0 - 1e-8);
            prop_assert!(cert.is_fully_stable());
        }
        prop_assert!(cert.lambda_min.is_infinite() || (cert.eigvector.norm() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn pure_tilt_response_is_strongly_monotone(
        zeta in 0.1f64..2.0,
        coeffs in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let inst = instance("0", &[(zeta, 1.0, 2.0)], &[0.0]);
        let settings = SolverSettings { residual_tolerance: 1e-11, ..inst.solver.clone() };
        let t1 = ControlProfile::new(vec![field(&inst, &coeffs[..3])]);
        let t2 = ControlProfile::new(vec![field(&inst, &coeffs[3..])]);
        let s1 = solve_equilibrium(&inst.spec, &inst.perturbation, &t1, &settings, None).unwrap();
        let s2 = solve_equilibrium(&inst.spec, &inst.perturbation, &t2, &settings, None).unwrap();
        let du = s1.u_bar.sub(&s2.u_bar);
        let dt = t1.sub(&t2);
        // ⟨Δϑ, Δu⟩ ≥ ζ ‖Δu‖², hence ‖Δu‖ ≤ ‖Δϑ‖ / ζ
        let lhs = dt.inner(&du).unwrap();
        prop_assert!(lhs >= zeta * du.norm().powi(2) - 1e-9);
        prop_assert!(du.norm() <= dt.norm() / zeta + 1e-9);
    }
}
