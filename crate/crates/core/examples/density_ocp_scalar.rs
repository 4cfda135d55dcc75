//! Scalar cubic system end to end in memory: fit the generator pair, solve the
//! density program, and run the recovered feedback against the analytic law.

use std::sync::Arc;

use density_ocp::dictionary::{
    build_dictionary, build_quadrature, cost_data, LambdaForm, MChoice, Width,
};
use density_ocp::domain::DomainBox;
use density_ocp::dynamics::{generate_snapshots, snapshots_at, ControlAffineSystem, InputLabel};
use density_ocp::ocp::{assemble, recover_controller, solve_ocp, OcpSettings};
use density_ocp::operators::generator_pair;
use density_ocp::solver::SolverOptions;
use density_ocp::validation::{compare_scalar, scalar_oracle};
use nalgebra::DVector;

fn main() -> density_ocp::Result<()> {
    let sys = ControlAffineSystem::scalar_cubic(0.5);
    let bx = DomainBox::symmetric(1, 5.0)?;
    let dict = build_dictionary(&bx, &[5], Width::Absolute(1.225), 0.15)?;
    let quad = build_quadrature(&dict, 400)?;
    let cost = cost_data(
        &dict,
        &quad,
        |x: &DVector<f64>| x[0] * x[0],
        &MChoice::Ones,
        LambdaForm::Analytic,
    )?;

    let zero = generate_snapshots(&sys, &bx, 1000, 0.01, InputLabel::Zero, 1)?;
    let step = snapshots_at(
        &sys,
        zero.x_points.clone(),
        0.01,
        InputLabel::Step,
        bx.clone(),
        1,
    )?;
    let opts = SolverOptions::default();
    let pair = generator_pair(&zero, &step, &dict, &cost.lambda, &opts)?;

    let prob = assemble(&pair, &cost, &dict, &quad, &OcpSettings::default())?;
    let sol = solve_ocp(&prob, &opts, "in-memory")?;
    println!(
        "{:?}: objective {:.4}, equality residual {:.2e}",
        sol.status, sol.objective, sol.eq_residual
    );
    println!("v = {:.4?}", sol.v.as_slice());
    println!("w = {:.4?}", sol.w.as_slice());

    // Global law alone; the CLI blends it with a local LQR near the origin.
    let law = recover_controller(&sol, Arc::new(dict))?;
    let run = compare_scalar(
        &law,
        &scalar_oracle(0.5),
        &sys,
        &[1.0, 2.0, -1.0, -2.0],
        10.0,
        0.001,
    )?;
    for row in &run.report.rows {
        println!(
            "x0 = {:+.1}: J* = {:.4}, J = {}",
            row.x0,
            row.cost_analytic.unwrap_or(f64::NAN),
            row.cost_datadriven
                .map_or("diverged".to_string(), |c| format!("{c:.4}"))
        );
    }
    Ok(())
}
