//! EDMD on a linear system with the identity basis, then NSDMD and the
//! generator pair for the scalar cubic system.

use density_ocp::dictionary::{build_dictionary, lambda_matrix, LambdaForm, Width};
use density_ocp::domain::DomainBox;
use density_ocp::dynamics::{generate_snapshots, snapshots_at, ControlAffineSystem, InputLabel};
use density_ocp::operators::{
    edmd_fit, edmd_matrices, generator_pair, row_sum_deviation, IdentityBasis,
};
use density_ocp::solver::SolverOptions;

fn main() -> density_ocp::Result<()> {
    let dt = 0.1;
    let linear = ControlAffineSystem::linear_decay(1, 1.0);
    let bx = DomainBox::symmetric(1, 1.0)?;
    let data = generate_snapshots(&linear, &bx, 200, dt, InputLabel::Zero, 1)?;
    let k = edmd_fit(&edmd_matrices(&data, &IdentityBasis { dim: 1 })?).k[(0, 0)];
    println!("EDMD K = {k:.9}, exp(-dt) = {:.9}", (-dt).exp());

    let sys = ControlAffineSystem::scalar_cubic(0.5);
    let bx = DomainBox::symmetric(1, 5.0)?;
    let dict = build_dictionary(&bx, &[5], Width::Absolute(1.225), 0.15)?;
    let zero = generate_snapshots(&sys, &bx, 1000, 0.01, InputLabel::Zero, 1)?;
    let step = snapshots_at(
        &sys,
        zero.x_points.clone(),
        0.01,
        InputLabel::Step,
        bx.clone(),
        1,
    )?;
    let lambda = lambda_matrix(&dict, LambdaForm::Analytic);
    let pair = generator_pair(&zero, &step, &dict, &lambda, &SolverOptions::default())?;
    let d = &pair.fit0.diagnostics;
    println!(
        "NSDMD residual {:.4e} (EDMD {:.4e}, projected EDMD {:.4e})",
        pair.fit0.residual, d.edmd_residual, d.projected_residual
    );
    println!(
        "min entry {:.2e}, row-sum deviation {:.2e}",
        pair.fit0.p_hat.min(),
        row_sum_deviation(&pair.fit0.p_hat)
    );
    for (name, m) in [("M0", &pair.m0), ("M1", &pair.m1)] {
        println!("{name}:");
        for row in m.row_iter() {
            println!("  {:8.3?}", row.iter().collect::<Vec<_>>());
        }
    }
    Ok(())
}
