//! Gaussian RBF grid, the Gram matrix `Lambda` in both closed forms, and a
//! quadrature cross-check.

use density_ocp::dictionary::{
    build_dictionary, build_quadrature, lambda_matrix, LambdaForm, Width,
};
use density_ocp::domain::DomainBox;
use density_ocp::validation::{lambda_consistency, lambda_consistency_of};

fn main() -> density_ocp::Result<()> {
    let bx = DomainBox::symmetric(1, 5.0)?;
    let dict = build_dictionary(&bx, &[9], Width::Factor(0.4), 0.0)?;
    println!("N = {}, sigma = {:.4}", dict.len(), dict.sigma);

    let analytic = lambda_matrix(&dict, LambdaForm::Analytic);
    let printed = lambda_matrix(&dict, LambdaForm::Printed);
    println!(
        "Lambda_00: analytic {:.6}, printed {:.6}",
        analytic[(0, 0)],
        printed[(0, 0)]
    );

    let quad = build_quadrature(&dict, 800)?;
    let good = lambda_consistency(&dict, LambdaForm::Analytic, &quad);
    let bad = lambda_consistency_of(&dict, &printed, &quad);
    println!(
        "max relative error vs quadrature: analytic {:.2e}, printed {:.2e}",
        good.max_relative_deviation, bad.max_relative_deviation
    );
    Ok(())
}
