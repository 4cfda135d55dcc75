//! Gaussian RBF dictionary on a uniform grid, plus the integrals over the
//! working region `X1 = box \ B_delta` that the density program needs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::DomainBox;
use crate::error::{Error, Result};

/// How the Gaussian width is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Width {
    /// `sigma = factor * d`, with `d` the largest per-dimension grid spacing.
    Factor(f64),
    Absolute(f64),
}

impl Default for Width {
    fn default() -> Self {
        Width::Factor(0.4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfDictionary {
    /// Centers in row-major grid order, last coordinate varying fastest.
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub domain_box: DomainBox,
    pub delta: f64,
    pub per_dim_counts: Vec<usize>,
    pub grid_spacing: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(skip)]
    packed: Option<DMatrix<f64>>,
}

impl RbfDictionary {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain_box.dim()
    }

    pub fn center(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.centers[k])
    }

    /// Centers as columns of an `n x N` matrix.
    fn packed(&self) -> DMatrix<f64> {
        match &self.packed {
            Some(p) => p.clone(),
            None => pack_centers(&self.centers, self.dim()),
        }
    }

    /// Rebuild derived state after deserialization and validate.
    pub fn finalize(mut self) -> Result<Self> {
        let n = self.dim();
        if self.centers.is_empty() {
            return Err(Error::invalid("centers", "dictionary is empty"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(
                "sigma",
                format!("must be positive, got {}", self.sigma),
            ));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::invalid("delta", "must be nonnegative"));
        }
        for (k, c) in self.centers.iter().enumerate() {
            if c.len() != n {
                return Err(Error::dimension(format!("center {k}"), n, c.len()));
            }
            if !self.domain_box.contains(&DVector::from_column_slice(c)) {
                return Err(Error::invalid(
                    format!("centers[{k}]"),
                    "outside the domain box",
                ));
            }
        }
        self.packed = Some(pack_centers(&self.centers, n));
        Ok(self)
    }

    /// Basis values `psi_k(x)` for all `k`, written into `out`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let inv = -0.5 / (self.sigma * self.sigma);
        for (o, c) in out.iter_mut().zip(&self.centers) {
            let r2: f64 = c.iter().zip(x).map(|(ci, xi)| (xi - ci) * (xi - ci)).sum();
            *o = (inv * r2).exp();
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        self.eval_into(x.as_slice(), out.as_mut_slice());
        out
    }

    /// Rows are `Psi(x_i)^T`.
    pub fn eval_rows(&self, points: &[DVector<f64>]) -> DMatrix<f64> {
        let n_basis = self.len();
        let mut out = DMatrix::zeros(points.len(), n_basis);
        let mut row = vec![0.0; n_basis];
        for (i, x) in points.iter().enumerate() {
            self.eval_into(x.as_slice(), &mut row);
            for (k, v) in row.iter().enumerate() {
                out[(i, k)] = *v;
            }
        }
        out
    }

    /// Gradient of every basis function at `x`, as columns of an `n x N` matrix.
    pub fn gradients(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let psi = self.eval(x);
        let centers = self.packed();
        let mut grad = DMatrix::zeros(self.dim(), self.len());
        let s2 = self.sigma * self.sigma;
        for k in 0..self.len() {
            let col = (centers.column(k) - x) * (psi[k] / s2);
            grad.set_column(k, &col);
        }
        grad
    }

    /// Whether the width rule `d <= 3 sigma <= 1.5 d` holds in every dimension.
    pub fn width_rule_holds(&self) -> bool {
        width_rule_violations(&self.grid_spacing, self.sigma).is_empty()
    }
}

fn pack_centers(centers: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, centers.len());
    for (k, c) in centers.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            m[(i, k)] = *v;
        }
    }
    m
}

fn width_rule_violations(spacing: &[f64], sigma: f64) -> Vec<String> {
    let tol = 1e-12;
    spacing
        .iter()
        .enumerate()
        .filter(|(_, d)| 3.0 * sigma < **d * (1.0 - tol) || 3.0 * sigma > 1.5 * **d * (1.0 + tol))
        .map(|(i, d)| {
            format!(
                "width rule d <= 3 sigma <= 1.5 d violated in dimension {i}: d = {d:.6}, 3 sigma = {:.6}",
                3.0 * sigma
            )
        })
        .collect()
}

pub fn build_dictionary(
    domain_box: &DomainBox,
    per_dim_counts: &[usize],
    width: Width,
    delta: f64,
) -> Result<RbfDictionary> {
    let domain_box = DomainBox::new(domain_box.bounds.clone())?;
    let n = domain_box.dim();
    if per_dim_counts.len() != n {
        return Err(Error::dimension("per_dim_counts", n, per_dim_counts.len()));
    }
    if let Some(i) = per_dim_counts.iter().position(|c| *c < 2) {
        return Err(Error::invalid(
            format!("per_dim_counts[{i}]"),
            "need at least two centers per dimension",
        ));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid(
            "delta",
            format!("must be nonnegative, got {delta}"),
        ));
    }
    let spacing: Vec<f64> = (0..n)
        .map(|i| domain_box.width(i) / (per_dim_counts[i] - 1) as f64)
        .collect();
    let d_max = spacing.iter().copied().fold(0.0, f64::max);
    let sigma = match width {
        Width::Factor(f) => {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::invalid(
                    "sigma_factor",
                    format!("must be positive, got {f}"),
                ));
            }
            f * d_max
        }
        Width::Absolute(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(
                    "sigma",
                    format!("must be positive, got {s}"),
                ));
            }
            s
        }
    };

    let total: usize = per_dim_counts.iter().product();
    let mut centers = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        let c: Vec<f64> = (0..n)
            .map(|i| {
                if idx[i] + 1 == per_dim_counts[i] {
                    domain_box.hi(i)
                } else {
                    domain_box.lo(i) + idx[i] as f64 * spacing[i]
                }
            })
            .collect();
        centers.push(c);
        for i in (0..n).rev() {
            idx[i] += 1;
            if idx[i] < per_dim_counts[i] {
                break;
            }
            idx[i] = 0;
        }
    }

    let warnings = width_rule_violations(&spacing, sigma);
    for w in &warnings {
        log::warn!("{w}");
    }
    RbfDictionary {
        centers,
        sigma,
        domain_box,
        delta,
        per_dim_counts: per_dim_counts.to_vec(),
        grid_spacing: spacing,
        warnings,
        packed: None,
    }
    .finalize()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaForm {
    /// Exact integral of a product of two Gaussians over `R^n`.
    #[default]
    Analytic,
    /// `(pi sigma^2 / 2)^{n/2} exp(-|ci - cj|^2 / (2 sigma^2))`, kept for literal reproduction.
    Printed,
    Identity,
}

pub fn lambda_entry(form: LambdaForm, sigma: f64, dim: usize, dist2: f64) -> f64 {
    let s2 = sigma * sigma;
    match form {
        LambdaForm::Analytic => (PI * s2).powf(dim as f64 / 2.0) * (-dist2 / (4.0 * s2)).exp(),
        LambdaForm::Printed => (PI * s2 / 2.0).powf(dim as f64 / 2.0) * (-dist2 / (2.0 * s2)).exp(),
        LambdaForm::Identity => {
            if dist2 == 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn lambda_matrix(dict: &RbfDictionary, form: LambdaForm) -> DMatrix<f64> {
    let n = dict.len();
    DMatrix::from_fn(n, n, |i, j| {
        if form == LambdaForm::Identity {
            return if i == j { 1.0 } else { 0.0 };
        }
        let d2: f64 = dict.centers[i]
            .iter()
            .zip(&dict.centers[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        lambda_entry(form, dict.sigma, dict.dim(), d2)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub excludes_ball: bool,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(x))
            .sum()
    }
}

/// Fixed seed for the Monte Carlo rule so that cost data is reproducible.
const MONTE_CARLO_SEED: u64 = 0x5eed_0c0a;

/// Midpoint tensor rule over the box with nodes in the closed `delta` ball
/// dropped; seeded Monte Carlo with `per_dim_nodes^3` samples when `n >= 4`.
pub fn build_quadrature(dict: &RbfDictionary, per_dim_nodes: usize) -> Result<QuadratureRule> {
    build_quadrature_on(&dict.domain_box, dict.delta, per_dim_nodes)
}

pub fn build_quadrature_on(
    domain_box: &DomainBox,
    delta: f64,
    per_dim_nodes: usize,
) -> Result<QuadratureRule> {
    if per_dim_nodes < 2 {
        return Err(Error::invalid(
            "per_dim_nodes",
            "need at least two nodes per dimension",
        ));
    }
    let n = domain_box.dim();
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    if n <= 3 {
        let h: Vec<f64> = (0..n)
            .map(|i| domain_box.width(i) / per_dim_nodes as f64)
            .collect();
        let w: f64 = h.iter().product();
        let total = per_dim_nodes.pow(n as u32);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            let x = DVector::from_iterator(
                n,
                (0..n).map(|i| domain_box.lo(i) + (idx[i] as f64 + 0.5) * h[i]),
            );
            if delta == 0.0 || x.norm() > delta {
                nodes.push(x);
                weights.push(w);
            }
            for i in (0..n).rev() {
                idx[i] += 1;
                if idx[i] < per_dim_nodes {
                    break;
                }
                idx[i] = 0;
            }
        }
    } else {
        let count = per_dim_nodes.pow(3);
        let w = domain_box.volume() / count as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(MONTE_CARLO_SEED);
        for _ in 0..count {
            let x = domain_box.sample(&mut rng);
            if delta == 0.0 || x.norm() > delta {
                nodes.push(x);
                weights.push(w);
            }
        }
    }
    if nodes.is_empty() {
        return Err(Error::invalid(
            "delta",
            format!("the ball of radius {delta} covers every quadrature node"),
        ));
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        excludes_ball: delta > 0.0,
    })
}

/// Choice of the coefficient vector `m` of `h0 = Psi^T m`.
#[derive(Clone, Default)]
pub enum MChoice {
    #[default]
    Ones,
    /// Least-squares projection of `h0` onto the span of the basis over `X1`.
    Projected(crate::dynamics::ScalarField),
}

impl std::fmt::Debug for MChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MChoice::Ones => f.write_str("Ones"),
            MChoice::Projected(_) => f.write_str("Projected(..)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostData {
    pub d_vec: DVector<f64>,
    pub d_mat: DMatrix<f64>,
    pub c_scalar: f64,
    /// `int_{X1} psi_k` for each basis function.
    pub c_per_basis: DVector<f64>,
    pub m_vec: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub lambda_form: LambdaForm,
}

pub fn cost_data<Q>(
    dict: &RbfDictionary,
    quad: &QuadratureRule,
    q: Q,
    m_choice: &MChoice,
    lambda_form: LambdaForm,
) -> Result<CostData>
where
    Q: Fn(&DVector<f64>) -> f64,
{
    let n_basis = dict.len();
    let mut d_vec = DVector::zeros(n_basis);
    let mut c_per_basis = DVector::zeros(n_basis);
    let mut d_mat = DMatrix::zeros(n_basis, n_basis);
    let block = 1024;
    let mut rows = DMatrix::zeros(block.min(quad.len()), n_basis);
    let mut psi = vec![0.0; n_basis];
    for start in (0..quad.len()).step_by(block) {
        let end = (start + block).min(quad.len());
        if rows.nrows() != end - start {
            rows = DMatrix::zeros(end - start, n_basis);
        }
        for (r, i) in (start..end).enumerate() {
            let x = &quad.nodes[i];
            let qx = q(x);
            if !(qx >= 0.0) {
                return Err(Error::invalid(
                    "q",
                    format!("state cost must be nonnegative, got {qx} at node {i}"),
                ));
            }
            let w = quad.weights[i];
            dict.eval_into(x.as_slice(), &mut psi);
            let sw = w.sqrt();
            for k in 0..n_basis {
                d_vec[k] += w * qx * psi[k];
                c_per_basis[k] += w * psi[k];
                rows[(r, k)] = sw * psi[k];
            }
        }
        d_mat.gemm_tr(1.0, &rows, &rows, 1.0);
    }
    d_mat = (&d_mat + d_mat.transpose()) * 0.5;

    let m_vec = match m_choice {
        MChoice::Ones => DVector::from_element(n_basis, 1.0),
        MChoice::Projected(h0) => {
            let mut rhs = DVector::zeros(n_basis);
            for (x, w) in quad.nodes.iter().zip(&quad.weights) {
                dict.eval_into(x.as_slice(), &mut psi);
                let hx = h0(x);
                for k in 0..n_basis {
                    rhs[k] += w * hx * psi[k];
                }
            }
            let ridge = 1e-10 * d_mat.trace() / n_basis as f64;
            let reg = &d_mat + DMatrix::identity(n_basis, n_basis) * ridge;
            reg.cholesky()
                .ok_or_else(|| Error::invalid("m_choice", "basis Gram matrix is singular"))?
                .solve(&rhs)
        }
    };
    let c_scalar = c_per_basis.mean();
    Ok(CostData {
        d_vec,
        d_mat,
        c_scalar,
        c_per_basis,
        m_vec,
        lambda: lambda_matrix(dict, lambda_form),
        lambda_form,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_dict() -> RbfDictionary {
        let bx = DomainBox::symmetric(1, 5.0).unwrap();
        build_dictionary(&bx, &[5], Width::Absolute(1.225), 0.15).unwrap()
    }

    #[test]
    fn scalar_grid() {
        let dict = scalar_dict();
        let c: Vec<f64> = dict.centers.iter().map(|c| c[0]).collect();
        assert_eq!(c, vec![-5.0, -2.5, 0.0, 2.5, 5.0]);
        assert_eq!(dict.grid_spacing, vec![2.5]);
        assert!(dict.width_rule_holds());
    }

    #[test]
    fn benchmark_sizes() {
        let duffing = build_dictionary(
            &DomainBox::symmetric(2, 3.0).unwrap(),
            &[15, 15],
            Width::Absolute(0.21),
            0.3,
        )
        .unwrap();
        assert_eq!(duffing.len(), 225);
        let vdp = build_dictionary(
            &DomainBox::symmetric(3, 1.0).unwrap(),
            &[8, 8, 8],
            Width::Absolute(0.14),
            0.1,
        )
        .unwrap();
        assert_eq!(vdp.len(), 512);
        assert!(vdp.centers.iter().all(|c| c.iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn width_rule_violation_is_a_warning() {
        let bx = DomainBox::symmetric(1, 1.0).unwrap();
        let dict = build_dictionary(&bx, &[3], Width::Factor(1.0), 0.0).unwrap();
        assert_eq!(dict.warnings.len(), 1);
        assert!(!dict.width_rule_holds());
    }

    #[test]
    fn basis_values() {
        let bx = DomainBox::symmetric(1, 2.0).unwrap();
        let dict = build_dictionary(&bx, &[3], Width::Absolute(1.0), 0.0).unwrap();
        let psi = dict.eval(&DVector::from_element(1, 1.0));
        assert_relative_eq!(psi[1], (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(psi[2], (-0.5f64).exp(), epsilon = 1e-15);
        let at_center = dict.eval(&DVector::from_element(1, -2.0));
        assert_eq!(at_center[0], 1.0);
    }

    #[test]
    fn lambda_diagonals() {
        let bx = DomainBox::symmetric(1, 2.0).unwrap();
        let dict = build_dictionary(&bx, &[3], Width::Absolute(1.0), 0.0).unwrap();
        assert_relative_eq!(
            lambda_matrix(&dict, LambdaForm::Analytic)[(0, 0)],
            PI.sqrt(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            lambda_matrix(&dict, LambdaForm::Printed)[(0, 0)],
            1.2533141373155001,
            epsilon = 1e-12
        );
    }

    #[test]
    fn midpoint_rule_volumes() {
        let unit = DomainBox::new(vec![[0.0, 1.0]]).unwrap();
        let q = build_quadrature_on(&unit, 0.0, 10).unwrap();
        assert_relative_eq!(q.total_weight(), 1.0, epsilon = 1e-14);
        let square = DomainBox::symmetric(2, 1.0).unwrap();
        let q = build_quadrature_on(&square, 0.5, 400).unwrap();
        assert_relative_eq!(q.total_weight(), 4.0 - PI * 0.25, max_relative = 1e-3);
        assert!(q.excludes_ball);
    }

    #[test]
    fn ball_covering_box_is_rejected() {
        let square = DomainBox::symmetric(2, 1.0).unwrap();
        assert!(build_quadrature_on(&square, 2.0, 10).is_err());
    }

    #[test]
    fn cost_data_basics() {
        let dict = scalar_dict();
        let quad = build_quadrature(&dict, 400).unwrap();
        let zero = cost_data(&dict, &quad, |_| 0.0, &MChoice::Ones, LambdaForm::Analytic).unwrap();
        assert_eq!(zero.d_vec.norm(), 0.0);
        let cd = cost_data(
            &dict,
            &quad,
            |x| x.norm_squared(),
            &MChoice::Ones,
            LambdaForm::Analytic,
        )
        .unwrap();
        assert!(cd.d_vec.iter().all(|d| *d > 0.0));
        assert!((&cd.d_mat - cd.d_mat.transpose()).abs().max() <= 1e-10);
        assert_eq!(cd.m_vec, DVector::from_element(5, 1.0));
        assert!(cd.c_scalar > 0.0);
        assert!(cost_data(&dict, &quad, |_| -1.0, &MChoice::Ones, LambdaForm::Analytic).is_err());
    }

    #[test]
    fn projected_m_reproduces_basis_function() {
        let dict = scalar_dict();
        let quad = build_quadrature_on(&dict.domain_box, 0.0, 2000).unwrap();
        let d2 = dict.clone();
        let h0 = std::sync::Arc::new(move |x: &DVector<f64>| d2.eval(x)[2]);
        let cd = cost_data(
            &dict,
            &quad,
            |_| 0.0,
            &MChoice::Projected(h0),
            LambdaForm::Analytic,
        )
        .unwrap();
        let mut e = DVector::zeros(5);
        e[2] = 1.0;
        assert!((cd.m_vec - e).amax() < 1e-4);
    }

    #[test]
    fn json_round_trip() {
        let dict = scalar_dict();
        let text = serde_json::to_string(&dict).unwrap();
        let back: RbfDictionary = serde_json::from_str(&text).unwrap();
        assert_eq!(back.finalize().unwrap(), dict);
    }
}
