mod common;

use std::sync::{Arc, OnceLock};

use common::{random_perspective, scalar_setup, ScalarSetup};
use density_ocp::dictionary::{
    build_dictionary, build_quadrature, build_quadrature_on, cost_data, lambda_matrix, LambdaForm,
    MChoice, RbfDictionary, Width,
};
use density_ocp::domain::DomainBox;
use density_ocp::dynamics::{
    generate_local_snapshots, generate_snapshots, ControlAffineSystem, InputLabel, Rk4,
};
use density_ocp::local_control::{
    identify_local, local_density, lqr_local, BlendedController, LocalController,
};
use density_ocp::ocp::{
    assemble, recover_controller, simulate_closed_loop, solve_ocp, DensitySolution, Norm,
    OcpSettings,
};
use density_ocp::operators::{edmd_fit, edmd_matrices, row_sum_deviation, IdentityBasis};
use density_ocp::solver::{solve, KktResiduals, SolveStatus, SolverOptions};
use density_ocp::validation::{compare_scalar, scalar_oracle};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn setup() -> &'static ScalarSetup {
    static SETUP: OnceLock<ScalarSetup> = OnceLock::new();
    SETUP.get_or_init(|| scalar_setup(5, 1000, 0.01))
}

fn scalar_solution() -> &'static DensitySolution {
    static SOL: OnceLock<DensitySolution> = OnceLock::new();
    SOL.get_or_init(|| {
        let s = setup();
        let prob = assemble(&s.pair, &s.cost, &s.dict, &s.quad, &OcpSettings::default()).unwrap();
        solve_ocp(&prob, &SolverOptions::default(), "test").unwrap()
    })
}

fn local_model() -> &'static LocalController {
    static LOCAL: OnceLock<LocalController> = OnceLock::new();
    LOCAL.get_or_init(|| {
        let sys = ControlAffineSystem::duffing();
        let data = generate_local_snapshots(&sys, 0.05, 400, 200, 0.01, 5).unwrap();
        let model = identify_local(&data).unwrap();
        lqr_local(&model, &DMatrix::identity(2, 2), 1.0, 0.3, 0.3).unwrap()
    })
}

// Dynamics

#[test]
fn snapshot_generation_is_deterministic() {
    let sys = ControlAffineSystem::duffing();
    let bx = DomainBox::symmetric(2, 3.0).unwrap();
    let a = generate_snapshots(&sys, &bx, 300, 0.01, InputLabel::Zero, 9).unwrap();
    let b = generate_snapshots(&sys, &bx, 300, 0.01, InputLabel::Zero, 9).unwrap();
    assert_eq!(a.x_points, b.x_points);
    assert_eq!(a.y_points, b.y_points);
}

#[test]
fn rk4_error_shrinks_at_fourth_order() {
    let sys = ControlAffineSystem::linear_decay(1, 4.0);
    let x0 = DVector::from_vec(vec![1.0]);
    let error = |dt: f64| {
        let traj = Rk4::new(dt)
            .unwrap()
            .integrate(&sys, &x0, &|_x: &DVector<f64>, _t: f64| 0.0, 1.0)
            .unwrap();
        (traj.final_state()[0] - (-4.0f64).exp()).abs()
    };
    for dt in [0.1, 0.05, 0.02, 0.01, 0.005, 0.002] {
        let ratio = error(dt) / error(dt / 2.0);
        assert!(ratio >= 12.0, "dt = {dt}: error ratio {ratio}");
    }
}

#[test]
fn snapshot_pairs_replay_one_step() {
    for (sys, half) in [
        (ControlAffineSystem::scalar_cubic(0.5), 5.0),
        (ControlAffineSystem::duffing(), 3.0),
        (ControlAffineSystem::vdp3d(), 1.0),
    ] {
        let bx = DomainBox::symmetric(sys.dim(), half).unwrap();
        let data = generate_snapshots(&sys, &bx, 200, 0.01, InputLabel::Step, 4).unwrap();
        let rk = Rk4::new(0.01).unwrap();
        for (x, y) in data.x_points.iter().zip(&data.y_points) {
            assert!((rk.step_constant(&sys, x, 1.0) - y).amax() <= 1e-12);
        }
    }
}

// Dictionary

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gram_matrix_is_psd(counts in 2usize..7, dim in 1usize..3, factor in 0.34f64..0.5) {
        let bx = DomainBox::symmetric(dim, 2.0).unwrap();
        let dict = build_dictionary(&bx, &vec![counts; dim], Width::Factor(factor), 0.0).unwrap();
        let lambda = lambda_matrix(&dict, LambdaForm::Analytic);
        prop_assert!((&lambda - lambda.transpose()).amax() == 0.0);
        prop_assert!(lambda.symmetric_eigenvalues().min() > -1e-10);
    }

    #[test]
    fn basis_is_strictly_positive(x in -6.0f64..6.0, y in -6.0f64..6.0) {
        let bx = DomainBox::symmetric(2, 5.0).unwrap();
        let dict = build_dictionary(&bx, &[5, 5], Width::Factor(0.4), 0.0).unwrap();
        let psi = dict.eval(&DVector::from_vec(vec![x, y]));
        prop_assert!(psi.iter().all(|p| *p > 0.0 && *p <= 1.0));
    }
}

#[test]
fn quadrature_integrates_interior_gaussians() {
    let bx = DomainBox::symmetric(2, 3.0).unwrap();
    let dict = build_dictionary(&bx, &[7, 7], Width::Factor(0.4), 0.0).unwrap();
    let quad = build_quadrature(&dict, 40).unwrap();
    let exact = 2.0 * std::f64::consts::PI * dict.sigma * dict.sigma;
    let mut checked = 0;
    for k in 0..dict.len() {
        let c = dict.center(k);
        if (0..2).all(|i| 3.0 - c[i].abs() > 4.0 * dict.sigma) {
            let integral = quad.integrate(|x| dict.eval(x)[k]);
            assert!(
                (integral / exact - 1.0).abs() < 0.01,
                "basis {k}: {integral} vs {exact}"
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn cost_gram_matches_analytic_lambda_without_ball() {
    let bx = DomainBox::symmetric(1, 6.0).unwrap();
    let dict = build_dictionary(&bx, &[7], Width::Factor(0.45), 0.0).unwrap();
    let quad = build_quadrature_on(&bx, 0.0, 600).unwrap();
    let cost = cost_data(
        &dict,
        &quad,
        |x: &DVector<f64>| x[0] * x[0],
        &MChoice::Ones,
        LambdaForm::Analytic,
    )
    .unwrap();
    for i in 0..dict.len() {
        for j in 0..dict.len() {
            let (ci, cj) = (dict.center(i)[0], dict.center(j)[0]);
            if 6.0 - ci.abs() > 4.0 * dict.sigma && 6.0 - cj.abs() > 4.0 * dict.sigma {
                let rel = (cost.d_mat[(i, j)] - cost.lambda[(i, j)]).abs() / cost.lambda[(i, i)];
                assert!(rel < 1e-3, "({i}, {j}): {rel}");
            }
        }
    }
}

// Operators

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transfer_matrix_keeps_densities_nonnegative(v in proptest::collection::vec(0.0f64..10.0, 5)) {
        let s = setup();
        let v = DVector::from_vec(v);
        for fit in [&s.pair.fit0, &s.pair.fit1] {
            prop_assert!((&fit.p * &v).min() >= -1e-8);
        }
    }
}

#[test]
fn nsdmd_fits_are_row_stochastic_and_dual() {
    let s = setup();
    for fit in [&s.pair.fit0, &s.pair.fit1] {
        assert!(fit.p_hat.min() >= -1e-9);
        assert!(row_sum_deviation(&fit.p_hat) <= 1e-8);
        assert_eq!(fit.p, fit.p_hat.transpose());
        let n = fit.p.nrows();
        assert!((&fit.m_gen - (&fit.p - DMatrix::identity(n, n)) / fit.dt).amax() <= 1e-9);
    }
}

#[test]
fn edmd_recovers_linear_flow() {
    let sys = ControlAffineSystem::linear_decay(1, 1.0);
    let bx = DomainBox::symmetric(1, 1.0).unwrap();
    for dt in [0.01, 0.1] {
        let data = generate_snapshots(&sys, &bx, 100, dt, InputLabel::Zero, 2).unwrap();
        let k = edmd_fit(&edmd_matrices(&data, &IdentityBasis { dim: 1 }).unwrap()).k[(0, 0)];
        assert!((k - (-dt).exp()).abs() <= 1e-6, "dt = {dt}: {k}");
    }
}

#[test]
fn drift_generator_is_first_order_in_dt() {
    let coarse = scalar_setup(5, 1000, 0.01);
    let fine = scalar_setup(5, 1000, 0.005);
    let scale = coarse.pair.m0.amax();
    let gap = (&coarse.pair.m0 - &fine.pair.m0).amax() / scale;
    // Same sample locations; the two fits differ by a first-order term plus
    // the change in fitting noise, both well below the generator scale.
    assert!(gap < 0.25, "relative gap {gap}");
}

// Solver

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn argmin_is_scale_invariant(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let prog = random_perspective(seed);
        let mut scaled = prog.clone();
        scaled.linear_cost *= scale;
        scaled.persp_weight *= scale;
        let opts = SolverOptions::default();
        let a = solve(&prog, &opts).unwrap();
        let b = solve(&scaled, &opts).unwrap();
        prop_assume!(a.status == SolveStatus::Optimal && b.status == SolveStatus::Optimal);
        let tol = 10.0 * opts.tol * (1.0 + a.z.amax());
        prop_assert!((&a.z - &b.z).amax() <= tol.max(1e-4 * (1.0 + a.z.amax())), "{} vs {}", a.z, b.z);
    }

    #[test]
    fn barrier_merit_never_increases_within_a_stage(seed in 0u64..10_000) {
        let res = solve(&random_perspective(seed), &SolverOptions::default()).unwrap();
        for stage in &res.merit_history {
            for pair in stage.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-9 * pair[0].abs().max(1.0));
            }
        }
        if res.status == SolveStatus::Optimal {
            prop_assert!(res.z[0] > 0.0 && res.z[1] > 0.0);
        }
    }
}

// Density program

#[test]
fn accepted_solution_satisfies_divergence_identity() {
    let s = setup();
    let sol = scalar_solution();
    assert!(sol.replay_residual(&s.pair.m0, &s.pair.m1, &s.cost.m_vec) <= 1e-6);
    for x in &s.quad.nodes {
        assert!(s.dict.eval(x).dot(&sol.v) >= -1e-6);
    }
}

#[test]
fn objective_grows_with_flux_penalty() {
    let s = setup();
    let opts = SolverOptions::default();
    let solve_with = |norm, r| {
        let settings = OcpSettings {
            r,
            norm,
            ..OcpSettings::default()
        };
        let prob = assemble(&s.pair, &s.cost, &s.dict, &s.quad, &settings).unwrap();
        solve_ocp(&prob, &opts, "test").unwrap().objective
    };
    let feasibility = solve_with(Norm::Feasibility, 1.0);
    let l1 = solve_with(Norm::L1, 1.0);
    let l1_double = solve_with(Norm::L1, 2.0);
    assert!(
        feasibility <= l1 + 1e-6 && l1 <= l1_double + 1e-6,
        "{feasibility} {l1} {l1_double}"
    );
}

fn isolated_dictionary() -> RbfDictionary {
    let bx = DomainBox::symmetric(1, 1.0).unwrap();
    build_dictionary(&bx, &[3], Width::Absolute(0.3), 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn controller_matches_ratio_at_isolated_centres(
        v in proptest::collection::vec(0.1f64..5.0, 3),
        ratio in proptest::collection::vec(1.0f64..5.0, 3),
        sign in proptest::collection::vec(prop::bool::ANY, 3),
    ) {
        let dict = isolated_dictionary();
        let v = DVector::from_vec(v);
        let w = DVector::from_fn(3, |k, _| if sign[k] { 1.0 } else { -1.0 } * ratio[k] * v[k]);
        let sol = DensitySolution { v: v.clone(), w: w.clone(), ..scalar_solution().clone() };
        let law = recover_controller(&sol, Arc::new(dict.clone())).unwrap();
        for k in 0..3 {
            let target = w[k] / v[k];
            let u = density_ocp::ocp::FeedbackLaw::control(&law, &dict.center(k));
            prop_assert!((u - target).abs() <= 0.1 * target.abs());
        }
    }
}

// Local control

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn blend_weights_form_a_partition(rho_l in 0.0f64..1e6, rho in 0.0f64..1e6, x in -3.0f64..3.0) {
        let s = setup();
        let global = recover_controller(scalar_solution(), Arc::new(s.dict.clone())).unwrap();
        let data = generate_local_snapshots(&s.system, 0.15, 200, 100, 0.01, 3).unwrap();
        let local = lqr_local(&identify_local(&data).unwrap(), &DMatrix::identity(1, 1), 1.0, 0.15, 0.15).unwrap();
        let ctrl = BlendedController { local, global };
        for (wl, wg) in [ctrl.weights(rho_l, rho), ctrl.weights_at(&DVector::from_vec(vec![x]))] {
            prop_assert!((0.0..=1.0).contains(&wl) && (0.0..=1.0).contains(&wg));
            prop_assert!((wl + wg - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn local_density_is_positive_exactly_in_active_region(x in -1.5f64..1.5, y in -1.5f64..1.5) {
        let local = local_model();
        let x = DVector::from_vec(vec![x, y]);
        let level = (&x.transpose() * &local.p * &x)[(0, 0)];
        prop_assume!((level - local.active_level()).abs() > 1e-9);
        prop_assert_eq!(local_density(local, &x) > 0.0, level < local.active_level());
    }

    #[test]
    fn lyapunov_function_decreases_along_local_loop(x in -1.0f64..1.0, y in -1.0f64..1.0) {
        prop_assume!(x.abs() + y.abs() > 1e-6);
        let local = local_model();
        let a_cl = &local.continuous_pair.a_c - &local.continuous_pair.b_c * local.k.transpose();
        let x = DVector::from_vec(vec![x, y]);
        let rate = (x.transpose() * (a_cl.transpose() * &local.p + &local.p * &a_cl) * &x)[(0, 0)];
        prop_assert!(rate < 0.0);
    }
}

#[test]
fn accepted_local_controller_solves_riccati() {
    let local = local_model();
    assert!(local.riccati_residual <= 1e-8);
    assert!(local.closed_loop_abscissa < 0.0);
}

#[test]
fn identification_is_exact_for_linear_data() {
    let sys = ControlAffineSystem::new(
        "linear",
        2,
        Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[1], -2.0 * x[0] - 0.3 * x[1]])),
        Arc::new(|_: &DVector<f64>| DVector::from_vec(vec![0.0, 1.0])),
    );
    let data = generate_local_snapshots(&sys, 0.5, 120, 60, 0.01, 8).unwrap();
    let model = identify_local(&data).unwrap();
    let rk = Rk4::new(0.01).unwrap();
    let e = |i: usize| DVector::from_fn(2, |k, _| if k == i { 1.0 } else { 0.0 });
    for i in 0..2 {
        let col = rk.step_constant(&sys, &e(i), 0.0);
        assert!((model.a.column(i) - col).amax() <= 1e-10);
    }
    let b = rk.step_constant(&sys, &DVector::zeros(2), 1.0);
    assert!((&model.b - b).amax() <= 1e-10);
}

// Analytic oracle

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn hjb_residual_vanishes(a in 0.1f64..2.0, x in -4.0f64..4.0) {
        let oracle = scalar_oracle(a);
        prop_assert!(oracle.hjb_residual(x).abs() <= 1e-8 * (1.0 + x.powi(6)));
    }
}

#[test]
fn analytic_law_contracts_every_start() {
    let sys = ControlAffineSystem::scalar_cubic(0.5);
    let oracle = scalar_oracle(0.5);
    let q = |x: &DVector<f64>| x[0] * x[0];
    for x0 in [-4.0, -2.5, -1.0, 0.5, 2.0, 4.0] {
        let run = simulate_closed_loop(
            &sys,
            &oracle,
            &DVector::from_vec(vec![x0]),
            &q,
            1.0,
            10.0,
            0.001,
        )
        .unwrap();
        let norms: Vec<f64> = run.trajectory.states.iter().map(|x| x[0].abs()).collect();
        assert!(norms.windows(2).all(|w| w[1] <= w[0]), "x0 = {x0}");
        assert!(*norms.last().unwrap() < 1e-3);
    }
}

#[test]
fn comparison_is_reproducible() {
    let s = setup();
    let law = recover_controller(scalar_solution(), Arc::new(s.dict.clone())).unwrap();
    let oracle = scalar_oracle(0.5);
    let a = compare_scalar(&law, &oracle, &s.system, &[1.0, -2.0], 5.0, 0.001).unwrap();
    let b = compare_scalar(&law, &oracle, &s.system, &[1.0, -2.0], 5.0, 0.001).unwrap();
    assert_eq!(a.report, b.report);
}

#[test]
fn kkt_residual_max_covers_every_component() {
    let k = KktResiduals {
        eq_residual: 1.0,
        stationarity: 2.0,
        complementarity: 3.0,
        primal_infeasibility: 4.0,
        dual_infeasibility: 5.0,
    };
    assert_eq!(k.max(), 5.0);
}
