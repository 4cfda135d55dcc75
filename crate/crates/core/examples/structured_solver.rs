//! The two solver entry points on toy problems: a perspective program with
//! equalities and a row-stochastic least-squares fit.

use density_ocp::solver::{solve, solve_row_stochastic_ls, SolverOptions, StructuredProgram};
use nalgebra::{DMatrix, DVector};

fn main() -> density_ocp::Result<()> {
    // min v + w^2 / v  s.t. v + w = 2, v >= 0; optimum v = 2 - w with w = 2 - sqrt(2).
    let prog = StructuredProgram::new(
        DVector::from_vec(vec![1.0, 0.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        DVector::from_vec(vec![2.0]),
        vec![0],
    )
    .with_perspective(
        DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DVector::from_vec(vec![1.0]),
    )?;
    let res = solve(&prog, &SolverOptions::default())?;
    println!(
        "{:?}: z = {:.6?}, objective {:.8}, kkt {:.2e}",
        res.status,
        res.z.as_slice(),
        res.objective,
        res.kkt.max()
    );

    // Data generated by a stochastic matrix, then perturbed.
    let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.0, 1.0, 0.5, 0.5]);
    let truth = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.2, 0.8]);
    let a = &g * truth + DMatrix::from_row_slice(3, 2, &[0.05, -0.02, -0.03, 0.04, 0.01, 0.0]);
    let p0 = DMatrix::from_element(2, 2, 0.5);
    let fit = solve_row_stochastic_ls(&g, &a, &p0, &SolverOptions::default())?;
    println!(
        "row-stochastic P =\n{:.6}after {} iterations",
        fit.p, fit.iterations
    );
    Ok(())
}
