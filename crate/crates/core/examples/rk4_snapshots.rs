//! Open-loop Duffing trajectory and a one-step snapshot set.

use density_ocp::domain::DomainBox;
use density_ocp::dynamics::{generate_snapshots, integrate, ControlAffineSystem, InputLabel};
use nalgebra::DVector;

fn main() -> density_ocp::Result<()> {
    let sys = ControlAffineSystem::duffing();
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    let traj = integrate(&sys, &x0, &|_x: &DVector<f64>, _t: f64| 0.0, 10.0, 0.01)?;
    for k in (0..traj.len()).step_by(200) {
        let x = &traj.states[k];
        println!(
            "t = {:5.2}  x = ({:+.4}, {:+.4})",
            traj.times[k], x[0], x[1]
        );
    }

    let bx = DomainBox::symmetric(2, 3.0)?;
    let snaps = generate_snapshots(&sys, &bx, 1000, 0.01, InputLabel::Step, 7)?;
    let mean_step: f64 = snaps
        .x_points
        .iter()
        .zip(&snaps.y_points)
        .map(|(x, y)| (y - x).norm())
        .sum::<f64>()
        / snaps.len() as f64;
    println!(
        "{} step-input pairs, mean |y - x| = {mean_step:.4e}",
        snaps.len()
    );
    Ok(())
}
