//! Local linear model of the Duffing oscillator from near-origin data, its
//! continuous-time LQR gain, and the local density that drives blending.

use density_ocp::dynamics::{generate_local_snapshots, ControlAffineSystem};
use density_ocp::local_control::{identify_local, local_density, lqr_local};
use nalgebra::{DMatrix, DVector};

fn main() -> density_ocp::Result<()> {
    let sys = ControlAffineSystem::duffing();
    let data = generate_local_snapshots(&sys, 0.05, 400, 200, 0.01, 5)?;
    let model = identify_local(&data)?;
    let (a_c, b_c) = model.continuous_pair();
    println!("identified A_c = {:.4?}", a_c.transpose().as_slice());
    println!(
        "analytic Jacobian = {:.4?}",
        sys.drift_jacobian(&DVector::zeros(2))
            .transpose()
            .as_slice()
    );
    println!("b_c = {:.4?}", b_c.as_slice());

    let local = lqr_local(&model, &DMatrix::identity(2, 2), 1.0, 0.3, 0.3)?;
    println!(
        "K = {:.5?}, Riccati residual {:.2e}, closed-loop abscissa {:.4}",
        local.k.as_slice(),
        local.riccati_residual,
        local.closed_loop_abscissa
    );
    println!("local law active for x'Px <= {:.4}", local.active_level());
    for r in [0.1, 0.5, 1.0, 1.5] {
        let x = DVector::from_vec(vec![r, 0.0]);
        println!("rho_l({r:.1}, 0) = {:.4e}", local_density(&local, &x));
    }
    Ok(())
}
