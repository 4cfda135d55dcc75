//! Closed-form optimal control of `dx/dt = a x^3 + u` with cost `x^2 + u^2`.

use density_ocp::dynamics::ControlAffineSystem;
use density_ocp::ocp::simulate_closed_loop;
use density_ocp::validation::scalar_oracle;
use nalgebra::DVector;

fn main() -> density_ocp::Result<()> {
    let oracle = scalar_oracle(0.5);
    for x in [0.5, 1.0, 2.0, 3.0] {
        println!(
            "x = {x:.1}: u* = {:+.5}, V = {:.5}, HJB residual {:.1e}",
            oracle.optimal_control(x),
            oracle.value_function(x),
            oracle.hjb_residual(x)
        );
    }
    let sys = ControlAffineSystem::scalar_cubic(0.5);
    let q = |x: &DVector<f64>| x[0] * x[0];
    let run = simulate_closed_loop(
        &sys,
        &oracle,
        &DVector::from_vec(vec![3.0]),
        &q,
        1.0,
        10.0,
        0.001,
    )?;
    println!(
        "simulated J(3) = {:.5}, V(3) = {:.5}",
        run.cost.unwrap_or(f64::NAN),
        oracle.value_function(3.0)
    );
    Ok(())
}
