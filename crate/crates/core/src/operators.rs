//! Transfer-operator fits from one-step snapshot data.
//!
//! EDMD solves `min |G K - A|_F` in closed form. NSDMD solves the same fit in
//! the Lambda-weighted coordinates `G_hat = G Lambda^{-1}`, `A_hat = A Lambda^{-1}`
//! with `P_hat >= 0` and `P_hat 1 = 1`, and returns the Perron-Frobenius matrix
//! `P = P_hat^T`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::RbfDictionary;
use crate::dynamics::{InputLabel, SnapshotSet};
use crate::error::{Error, Result};
use crate::io::{self, MatrixEntry};
use crate::solver::{project_rows, solve_row_stochastic_ls, KktResiduals, SolverOptions};

/// Anything that maps a state to a vector of observables.
pub trait Basis {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Basis for RbfDictionary {
    fn len(&self) -> usize {
        RbfDictionary::len(self)
    }

    fn dim(&self) -> usize {
        RbfDictionary::dim(self)
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        RbfDictionary::eval_into(self, x, out)
    }
}

/// `Psi(x) = x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityBasis {
    pub dim: usize,
}

impl Basis for IdentityBasis {
    fn len(&self) -> usize {
        self.dim
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdMatrices {
    pub g: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub m: usize,
}

const BLOCK_ROWS: usize = 1024;

pub fn edmd_matrices<B: Basis + ?Sized>(data: &SnapshotSet, basis: &B) -> Result<EdmdMatrices> {
    if data.is_empty() {
        return Err(Error::invalid("snapshots", "at least one pair is required"));
    }
    if data.dim() != basis.dim() {
        return Err(Error::dimension(
            "snapshot dimension",
            basis.dim(),
            data.dim(),
        ));
    }
    let n = basis.len();
    let m = data.len();
    let mut g = DMatrix::zeros(n, n);
    let mut a = DMatrix::zeros(n, n);
    let mut psi = vec![0.0; n];
    for start in (0..m).step_by(BLOCK_ROWS) {
        let end = (start + BLOCK_ROWS).min(m);
        let rows = end - start;
        let mut px = DMatrix::zeros(rows, n);
        let mut py = DMatrix::zeros(rows, n);
        for (r, i) in (start..end).enumerate() {
            basis.eval_into(data.x_points[i].as_slice(), &mut psi);
            for k in 0..n {
                px[(r, k)] = psi[k];
            }
            basis.eval_into(data.y_points[i].as_slice(), &mut psi);
            for k in 0..n {
                py[(r, k)] = psi[k];
            }
        }
        g.gemm_tr(1.0, &px, &px, 1.0);
        a.gemm_tr(1.0, &px, &py, 1.0);
    }
    let inv = 1.0 / m as f64;
    g *= inv;
    a *= inv;
    g = (&g + g.transpose()) * 0.5;
    Ok(EdmdMatrices { g, a, m })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdFit {
    pub k: DMatrix<f64>,
    /// Numerical rank of `G`; below `N` the fit is only determined on its row space.
    pub rank: usize,
}

fn pinv_solve(g: &DMatrix<f64>, rhs: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = g.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    let eps = smax * f64::EPSILON * g.nrows().max(g.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let k = svd.solve(rhs, eps).expect("both factors were computed");
    (k, rank)
}

pub fn edmd_fit(mats: &EdmdMatrices) -> EdmdFit {
    let (k, rank) = pinv_solve(&mats.g, &mats.a);
    if rank < mats.g.nrows() {
        log::info!("EDMD Gram matrix has rank {rank} < {}", mats.g.nrows());
    }
    EdmdFit { k, rank }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Unconstrained optimum of the same weighted fit.
    pub edmd_residual: f64,
    /// Residual of the row-wise simplex projection of the unconstrained optimum.
    pub projected_residual: f64,
    pub lambda_condition: f64,
    /// Ridge added to Lambda when its Cholesky factorization failed.
    pub lambda_ridge: Option<f64>,
    pub iterations: usize,
    pub kkt: KktResiduals,
    /// Largest entry clipped to zero after the solve.
    pub clipped_mass: f64,
    pub min_entry: f64,
    pub max_row_sum_deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfApproximation {
    /// Koopman-side row-stochastic matrix.
    pub p_hat: DMatrix<f64>,
    /// `P_hat^T`.
    pub p: DMatrix<f64>,
    /// `(P - I) / dt`.
    pub m_gen: DMatrix<f64>,
    pub dt: f64,
    pub residual: f64,
    pub diagnostics: FitDiagnostics,
}

/// `X Lambda^{-1}` for a batch of right-hand sides, via Lambda's Cholesky factor.
struct LambdaSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ridge: Option<f64>,
    condition: f64,
}

impl LambdaSolver {
    fn new(lambda: &DMatrix<f64>) -> Result<Self> {
        let n = lambda.nrows();
        if lambda.ncols() != n {
            return Err(Error::dimension("Lambda columns", n, lambda.ncols()));
        }
        let sym = (lambda + lambda.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if let Some(chol) = sym.clone().cholesky() {
            return Ok(Self {
                chol,
                ridge: None,
                condition,
            });
        }
        let ridge = 1e-10 * sym.trace() / n as f64;
        let reg = &sym + DMatrix::identity(n, n) * ridge;
        log::warn!("Lambda is not numerically positive definite; adding ridge {ridge:.3e}");
        let chol = reg
            .cholesky()
            .ok_or_else(|| Error::invalid("Lambda", "not positive definite even after ridge"))?;
        Ok(Self {
            chol,
            ridge: Some(ridge),
            condition,
        })
    }

    /// `x Lambda^{-1} = (Lambda^{-1} x^T)^T` for symmetric Lambda.
    fn right_solve(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(&x.transpose()).transpose()
    }
}

pub fn nsdmd_fit(
    mats: &EdmdMatrices,
    lambda: &DMatrix<f64>,
    dt: f64,
    opts: &SolverOptions,
) -> Result<PfApproximation> {
    let n = mats.g.nrows();
    if lambda.nrows() != n {
        return Err(Error::dimension("Lambda", n, lambda.nrows()));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be positive"));
    }
    let ls = LambdaSolver::new(lambda)?;
    let g_hat = ls.right_solve(&mats.g);
    let a_hat = ls.right_solve(&mats.a);

    let (k_hat, _) = pinv_solve(&g_hat, &a_hat);
    let edmd_residual = (&g_hat * &k_hat - &a_hat).norm();
    let projected = project_rows(&k_hat);
    let projected_residual = (&g_hat * &projected - &a_hat).norm();

    let sol = solve_row_stochastic_ls(&g_hat, &a_hat, &projected, opts)?;
    let mut p_hat = sol.p;
    let mut clipped_mass: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if p_hat[(i, j)] < 0.0 {
                clipped_mass = clipped_mass.max(-p_hat[(i, j)]);
                p_hat[(i, j)] = 0.0;
            }
        }
        let s = p_hat.row(i).sum();
        p_hat.row_mut(i).scale_mut(1.0 / s);
    }
    let residual = (&g_hat * &p_hat - &a_hat).norm();
    let p = p_hat.transpose();
    let m_gen = (&p - DMatrix::identity(n, n)) / dt;
    let diagnostics = FitDiagnostics {
        edmd_residual,
        projected_residual,
        lambda_condition: ls.condition,
        lambda_ridge: ls.ridge,
        iterations: sol.iterations,
        kkt: sol.kkt,
        clipped_mass,
        min_entry: p_hat.min(),
        max_row_sum_deviation: row_sum_deviation(&p_hat),
    };
    Ok(PfApproximation {
        p_hat,
        p,
        m_gen,
        dt,
        residual,
        diagnostics,
    })
}

pub fn row_sum_deviation(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| (m.row(i).sum() - 1.0).abs())
        .fold(0.0, f64::max)
}

pub fn column_sum_max(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).sum().abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPair {
    pub m0: DMatrix<f64>,
    pub m1: DMatrix<f64>,
    pub dt: f64,
    pub fit0: PfApproximation,
    pub fit1: PfApproximation,
}

pub fn generator_pair(
    zero_data: &SnapshotSet,
    step_data: &SnapshotSet,
    dict: &RbfDictionary,
    lambda: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<GeneratorPair> {
    if zero_data.input_label != InputLabel::Zero {
        return Err(Error::invalid(
            "zero_data.input_label",
            "expected zero-input data",
        ));
    }
    if step_data.input_label != InputLabel::Step {
        return Err(Error::invalid(
            "step_data.input_label",
            "expected step-input data",
        ));
    }
    if zero_data.dt != step_data.dt {
        return Err(Error::invalid(
            "dt",
            format!(
                "zero data uses {} but step data uses {}",
                zero_data.dt, step_data.dt
            ),
        ));
    }
    if zero_data.dim() != step_data.dim() {
        return Err(Error::dimension(
            "step data",
            zero_data.dim(),
            step_data.dim(),
        ));
    }
    let dt = zero_data.dt;
    let fit0 = nsdmd_fit(&edmd_matrices(zero_data, dict)?, lambda, dt, opts)?;
    let fit1 = nsdmd_fit(&edmd_matrices(step_data, dict)?, lambda, dt, opts)?;
    Ok(pair_from_fits(fit0, fit1))
}

pub fn pair_from_fits(fit0: PfApproximation, fit1: PfApproximation) -> GeneratorPair {
    let dt = fit0.dt;
    let m0 = fit0.m_gen.clone();
    let m1 = (&fit1.p - &fit0.p) / dt;
    GeneratorPair {
        m0,
        m1,
        dt,
        fit0,
        fit1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintViolations {
    pub min_entry: f64,
    pub max_row_sum_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    #[serde(rename = "N")]
    pub n: usize,
    pub dt: f64,
    pub residual: f64,
    pub fit_method: String,
    pub constraint_violations: ConstraintViolations,
    pub diagnostics: FitDiagnostics,
    pub matrices: Vec<MatrixEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    #[serde(rename = "N")]
    pub n: usize,
    pub dt: f64,
    pub zero: FitManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<FitManifest>,
    pub matrices: Vec<MatrixEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub const GENERATOR_MANIFEST: &str = "generators.json";

fn fit_manifest(dir: &Path, prefix: &str, fit: &PfApproximation) -> Result<FitManifest> {
    let matrices = vec![io::write_matrix(dir, &format!("{prefix}_hat"), &fit.p_hat)?];
    Ok(FitManifest {
        n: fit.p.nrows(),
        dt: fit.dt,
        residual: fit.residual,
        fit_method: "nsdmd".into(),
        constraint_violations: ConstraintViolations {
            min_entry: fit.diagnostics.min_entry,
            max_row_sum_deviation: fit.diagnostics.max_row_sum_deviation,
        },
        diagnostics: fit.diagnostics.clone(),
        matrices,
    })
}

fn fit_from_manifest(dir: &Path, fm: &FitManifest) -> Result<PfApproximation> {
    let p_hat = io::read_matrix(dir, &fm.matrices[0])?;
    let n = p_hat.nrows();
    let p = p_hat.transpose();
    let m_gen = (&p - DMatrix::identity(n, n)) / fm.dt;
    Ok(PfApproximation {
        p_hat,
        p,
        m_gen,
        dt: fm.dt,
        residual: fm.residual,
        diagnostics: fm.diagnostics.clone(),
    })
}

/// Zero-input fit only, for pipelines without step data.
pub fn save_zero_fit(dir: &Path, fit0: &PfApproximation, config_hash: Option<&str>) -> Result<()> {
    let zero = fit_manifest(dir, "P0", fit0)?;
    let matrices = vec![io::write_matrix(dir, "M0", &fit0.m_gen)?];
    let manifest = GeneratorManifest {
        n: fit0.p.nrows(),
        dt: fit0.dt,
        zero,
        step: None,
        matrices,
        config_hash: config_hash.map(str::to_string),
    };
    io::write_json(&dir.join(GENERATOR_MANIFEST), &manifest)
}

impl GeneratorPair {
    pub fn save(&self, dir: &Path, config_hash: Option<&str>) -> Result<()> {
        let zero = fit_manifest(dir, "P0", &self.fit0)?;
        let step = fit_manifest(dir, "P1", &self.fit1)?;
        let matrices = vec![
            io::write_matrix(dir, "M0", &self.m0)?,
            io::write_matrix(dir, "M1", &self.m1)?,
        ];
        let manifest = GeneratorManifest {
            n: self.m0.nrows(),
            dt: self.dt,
            zero,
            step: Some(step),
            matrices,
            config_hash: config_hash.map(str::to_string),
        };
        io::write_json(&dir.join(GENERATOR_MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, GeneratorManifest)> {
        let manifest: GeneratorManifest = io::read_json(&dir.join(GENERATOR_MANIFEST))?;
        let step = manifest
            .step
            .as_ref()
            .ok_or_else(|| Error::invalid("operators", "step data missing: no M1 was fitted"))?;
        let fit0 = fit_from_manifest(dir, &manifest.zero)?;
        let fit1 = fit_from_manifest(dir, step)?;
        let m0 = io::read_matrix(dir, io::find_entry(&manifest.matrices, "M0")?)?;
        let m1 = io::read_matrix(dir, io::find_entry(&manifest.matrices, "M1")?)?;
        Ok((
            GeneratorPair {
                m0,
                m1,
                dt: manifest.dt,
                fit0,
                fit1,
            },
            manifest,
        ))
    }
}

/// Apply `P` to a coefficient vector.
pub fn propagate(fit: &PfApproximation, v: &DVector<f64>) -> DVector<f64> {
    &fit.p * v
}
