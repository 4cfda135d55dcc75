#![allow(dead_code)]

use density_ocp::dictionary::{
    build_dictionary, build_quadrature, cost_data, CostData, LambdaForm, MChoice, QuadratureRule,
    RbfDictionary, Width,
};
use density_ocp::domain::DomainBox;
use density_ocp::dynamics::{generate_snapshots, snapshots_at, ControlAffineSystem, InputLabel};
use density_ocp::operators::{generator_pair, GeneratorPair};
use density_ocp::solver::SolverOptions;
use nalgebra::DVector;

pub struct ScalarSetup {
    pub system: ControlAffineSystem,
    pub dict: RbfDictionary,
    pub quad: QuadratureRule,
    pub cost: CostData,
    pub pair: GeneratorPair,
}

/// Scalar cubic benchmark at the published size: five RBFs on [-5, 5].
pub fn scalar_setup(counts: usize, samples: usize, dt: f64) -> ScalarSetup {
    let system = ControlAffineSystem::scalar_cubic(0.5);
    let bx = DomainBox::symmetric(1, 5.0).unwrap();
    let width = if counts == 5 {
        Width::Absolute(1.225)
    } else {
        Width::Factor(0.49)
    };
    let dict = build_dictionary(&bx, &[counts], width, 0.15).unwrap();
    let quad = build_quadrature(&dict, 400).unwrap();
    let cost = cost_data(
        &dict,
        &quad,
        |x: &DVector<f64>| x[0] * x[0],
        &MChoice::Ones,
        LambdaForm::Analytic,
    )
    .unwrap();
    let zero = generate_snapshots(&system, &bx, samples, dt, InputLabel::Zero, 1).unwrap();
    let step = snapshots_at(&system, zero.x_points.clone(), dt, InputLabel::Step, bx, 1).unwrap();
    let pair =
        generator_pair(&zero, &step, &dict, &cost.lambda, &SolverOptions::default()).unwrap();
    ScalarSetup {
        system,
        dict,
        quad,
        cost,
        pair,
    }
}

/// Prints one acceptance line; returns `passed` so callers can assert.
pub fn report(id: usize, name: &str, passed: bool, detail: &str) -> bool {
    println!(
        "criterion {id:>2} [{}] {name}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    passed
}

use density_ocp::solver::StructuredProgram;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `min c'v + sum rho_j w_j^2 / v_j` over `E (v, w) = E z0`, `v >= 0`, with
/// two density and two flux variables and two equalities.
pub fn random_perspective(seed: u64) -> StructuredProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (eq_a, eq_b) = random_equalities(&mut rng);
    let linear = DVector::from_vec(vec![
        rng.random_range(0.2..2.0),
        rng.random_range(0.2..2.0),
        0.0,
        0.0,
    ]);
    let num = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let den = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let weights = DVector::from_vec(vec![rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)]);
    StructuredProgram::new(linear, eq_a, eq_b, vec![0, 1])
        .with_perspective(num, den, weights)
        .unwrap()
}

/// Same feasible set with `kappa_j |w_j|` in place of the perspective terms.
pub fn random_l1(seed: u64) -> StructuredProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (eq_a, eq_b) = random_equalities(&mut rng);
    let linear = DVector::from_vec(vec![
        rng.random_range(0.2..2.0),
        rng.random_range(0.2..2.0),
        0.0,
        0.0,
    ]);
    let rows = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let weights = DVector::from_vec(vec![rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)]);
    StructuredProgram::new(linear, eq_a, eq_b, vec![0, 1])
        .with_l1(rows, weights)
        .unwrap()
}

fn random_equalities(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DVector<f64>) {
    let eq_a = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
    let z0 = DVector::from_vec(vec![
        rng.random_range(0.2..2.0),
        rng.random_range(0.2..2.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ]);
    let eq_b = &eq_a * z0;
    (eq_a, eq_b)
}

/// `min 1/2 p'Qp - rhs'p` on the simplex, `Q` positive definite, size 2 to 5.
pub fn random_simplex(seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=5);
    let a = DMatrix::from_fn(k + 1, k, |_, _| rng.random_range(-1.0..1.0));
    let q = a.tr_mul(&a) + DMatrix::identity(k, k) * 0.1;
    let rhs = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
    (q, rhs)
}
