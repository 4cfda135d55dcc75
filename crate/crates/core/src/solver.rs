//! Structured convex solvers.
//!
//! * [`solve`] handles programs of the form
//!   `min c'z + sum_j w_j (a_j'z)^2 / (b_j'z) + sum_l k_l |r_l'z|`
//!   subject to `E z = f` and `z_i >= 0` on an index set. It is a primal
//!   log-barrier path-following method with an explicit phase-1 problem.
//! * [`solve_simplex_ls`] is a Mehrotra predictor-corrector method for a
//!   quadratic over the probability simplex.
//! * [`solve_row_stochastic_ls`] fits `min 1/2 |G P - A|_F^2` over matrices
//!   whose rows lie in the simplex, by accelerated projected gradient.
//! * [`check_kkt`] recomputes optimality residuals term by term.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid(
                "solver.tol",
                format!("must be positive, got {}", self.tol),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("solver.max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

/// Residuals of the first-order optimality conditions.
///
/// `eq_residual` and `primal_infeasibility` are absolute; `stationarity` is
/// scaled by the largest objective-gradient entry (at least 1) and
/// `complementarity` by `max(1, |objective|)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub eq_residual: f64,
    pub stationarity: f64,
    pub complementarity: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [
            self.eq_residual,
            self.stationarity,
            self.complementarity,
            self.primal_infeasibility,
            self.dual_infeasibility,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

impl fmt::Display for KktResiduals {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "eq {:.3e}, stationarity {:.3e}, complementarity {:.3e}, primal infeas {:.3e}, dual infeas {:.3e}",
            self.eq_residual,
            self.stationarity,
            self.complementarity,
            self.primal_infeasibility,
            self.dual_infeasibility
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// Lagrange multipliers for `E z = f`, `z >= 0` and the L1 terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub eq: DVector<f64>,
    /// One entry per variable; zero off the nonnegative index set.
    pub lower: DVector<f64>,
    /// Subgradient multipliers, `|l1_i| <= weight_i`.
    pub l1: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub duals: Duals,
    /// Phase-1 summary when the program was found infeasible.
    pub certificate: Option<String>,
    /// Barrier merit after every Newton step, one list per centering stage.
    pub merit_history: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredProgram {
    pub linear_cost: DVector<f64>,
    /// Rows `a_j`.
    pub persp_num: DMatrix<f64>,
    /// Rows `b_j`, nonnegative and supported on `nonneg_idx`.
    pub persp_den: DMatrix<f64>,
    pub persp_weight: DVector<f64>,
    pub l1_rows: DMatrix<f64>,
    pub l1_weight: DVector<f64>,
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
    pub nonneg_idx: Vec<usize>,
}

impl StructuredProgram {
    pub fn new(
        linear_cost: DVector<f64>,
        eq_a: DMatrix<f64>,
        eq_b: DVector<f64>,
        nonneg_idx: Vec<usize>,
    ) -> Self {
        let k = linear_cost.len();
        Self {
            linear_cost,
            persp_num: DMatrix::zeros(0, k),
            persp_den: DMatrix::zeros(0, k),
            persp_weight: DVector::zeros(0),
            l1_rows: DMatrix::zeros(0, k),
            l1_weight: DVector::zeros(0),
            eq_a,
            eq_b,
            nonneg_idx,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.linear_cost.len()
    }

    pub fn num_eq(&self) -> usize {
        self.eq_b.len()
    }

    /// Append perspective terms `w_j (num_j'z)^2 / (den_j'z)`; rows with a zero
    /// numerator contribute nothing and are dropped.
    pub fn with_perspective(
        mut self,
        num: DMatrix<f64>,
        den: DMatrix<f64>,
        weights: DVector<f64>,
    ) -> Result<Self> {
        let k = self.num_vars();
        if num.ncols() != k || den.ncols() != k {
            return Err(Error::dimension(
                "perspective rows",
                k,
                num.ncols().max(den.ncols()),
            ));
        }
        if num.nrows() != den.nrows() || weights.len() != num.nrows() {
            return Err(Error::dimension(
                "perspective terms",
                num.nrows(),
                den.nrows().min(weights.len()),
            ));
        }
        let keep: Vec<usize> = (0..num.nrows())
            .filter(|j| num.row(*j).iter().any(|v| *v != 0.0))
            .collect();
        let old = self.persp_num.nrows();
        let total = old + keep.len();
        let mut new_num = DMatrix::zeros(total, k);
        let mut new_den = DMatrix::zeros(total, k);
        let mut new_w = DVector::zeros(total);
        new_num.rows_mut(0, old).copy_from(&self.persp_num);
        new_den.rows_mut(0, old).copy_from(&self.persp_den);
        new_w.rows_mut(0, old).copy_from(&self.persp_weight);
        for (r, j) in keep.iter().enumerate() {
            new_num.row_mut(old + r).copy_from(&num.row(*j));
            new_den.row_mut(old + r).copy_from(&den.row(*j));
            new_w[old + r] = weights[*j];
        }
        self.persp_num = new_num;
        self.persp_den = new_den;
        self.persp_weight = new_w;
        Ok(self)
    }

    pub fn with_l1(mut self, rows: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        let k = self.num_vars();
        if rows.ncols() != k || rows.nrows() != weights.len() {
            return Err(Error::dimension("l1 rows", k, rows.ncols()));
        }
        let old = self.l1_rows.nrows();
        let mut new_rows = DMatrix::zeros(old + rows.nrows(), k);
        new_rows.rows_mut(0, old).copy_from(&self.l1_rows);
        new_rows.rows_mut(old, rows.nrows()).copy_from(&rows);
        let mut new_w = DVector::zeros(old + weights.len());
        new_w.rows_mut(0, old).copy_from(&self.l1_weight);
        new_w.rows_mut(old, weights.len()).copy_from(&weights);
        self.l1_rows = new_rows;
        self.l1_weight = new_w;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_vars();
        if self.eq_a.ncols() != k || self.eq_a.nrows() != self.eq_b.len() {
            return Err(Error::dimension("equality system", k, self.eq_a.ncols()));
        }
        if self
            .eq_a
            .iter()
            .chain(self.eq_b.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("eq_A", "entries must be finite"));
        }
        if self.linear_cost.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("linear_cost", "entries must be finite"));
        }
        let mut is_nonneg = vec![false; k];
        for &i in &self.nonneg_idx {
            if i >= k {
                return Err(Error::invalid(
                    "nonneg_idx",
                    format!("index {i} out of range"),
                ));
            }
            is_nonneg[i] = true;
        }
        for (j, w) in self.persp_weight.iter().enumerate() {
            if !(*w > 0.0 && w.is_finite()) {
                return Err(Error::invalid(
                    format!("perspective weight {j}"),
                    "must be positive",
                ));
            }
            let row = self.persp_den.row(j);
            let mut any_positive = false;
            for (i, b) in row.iter().enumerate() {
                if *b < 0.0 || (*b > 0.0 && !is_nonneg[i]) {
                    return Err(Error::invalid(
                        format!("perspective denominator {j}"),
                        "must be nonnegative and supported on nonnegative variables",
                    ));
                }
                any_positive |= *b > 0.0;
            }
            if !any_positive {
                return Err(Error::invalid(
                    format!("perspective denominator {j}"),
                    "is identically zero",
                ));
            }
        }
        if self.l1_weight.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("l1 weights", "must be nonnegative"));
        }
        Ok(())
    }

    /// Objective at `z`; `+inf` where a perspective denominator is not positive.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        let mut f = self.linear_cost.dot(z);
        if !self.persp_weight.is_empty() {
            let u = &self.persp_num * z;
            let s = &self.persp_den * z;
            for j in 0..u.len() {
                if s[j] <= 0.0 {
                    if u[j] == 0.0 {
                        continue;
                    }
                    return f64::INFINITY;
                }
                f += self.persp_weight[j] * u[j] * u[j] / s[j];
            }
        }
        if !self.l1_weight.is_empty() {
            let r = &self.l1_rows * z;
            f += r
                .iter()
                .zip(self.l1_weight.iter())
                .map(|(a, w)| w * a.abs())
                .sum::<f64>();
        }
        f
    }

    pub fn has_objective(&self) -> bool {
        self.linear_cost.iter().any(|c| *c != 0.0)
            || !self.persp_weight.is_empty()
            || self.l1_weight.iter().any(|w| *w > 0.0)
    }
}

/// Independent residual checker: recomputes every term from its definition.
pub fn check_kkt(prog: &StructuredProgram, z: &DVector<f64>, duals: &Duals) -> KktResiduals {
    let k = prog.num_vars();
    let mut eq_residual: f64 = 0.0;
    for e in 0..prog.num_eq() {
        let mut acc = -prog.eq_b[e];
        for i in 0..k {
            acc += prog.eq_a[(e, i)] * z[i];
        }
        eq_residual = eq_residual.max(acc.abs());
    }
    let mut is_nonneg = vec![false; k];
    let mut primal_infeasibility: f64 = 0.0;
    for &i in &prog.nonneg_idx {
        is_nonneg[i] = true;
        primal_infeasibility = primal_infeasibility.max(-z[i]);
    }

    let mut obj_grad = prog.linear_cost.clone();
    let mut objective = prog.linear_cost.dot(z);
    for j in 0..prog.persp_weight.len() {
        let mut u = 0.0;
        let mut s = 0.0;
        for i in 0..k {
            u += prog.persp_num[(j, i)] * z[i];
            s += prog.persp_den[(j, i)] * z[i];
        }
        if s <= 0.0 {
            primal_infeasibility = primal_infeasibility.max(-s);
            continue;
        }
        let w = prog.persp_weight[j];
        objective += w * u * u / s;
        for i in 0..k {
            obj_grad[i] += w
                * (2.0 * u / s * prog.persp_num[(j, i)] - u * u / (s * s) * prog.persp_den[(j, i)]);
        }
    }
    let mut grad = obj_grad.clone();
    let mut dual_infeasibility: f64 = 0.0;
    let mut gap = 0.0;
    for l in 0..prog.l1_weight.len() {
        let mut r = 0.0;
        for i in 0..k {
            r += prog.l1_rows[(l, i)] * z[i];
        }
        let kappa = prog.l1_weight[l];
        let eta = duals.l1[l];
        objective += kappa * r.abs();
        dual_infeasibility = dual_infeasibility.max(eta.abs() - kappa);
        gap += kappa * r.abs() - eta * r;
        for i in 0..k {
            grad[i] += eta * prog.l1_rows[(l, i)];
        }
    }
    for e in 0..prog.num_eq() {
        for i in 0..k {
            grad[i] += prog.eq_a[(e, i)] * duals.eq[e];
        }
    }
    for i in 0..k {
        let lam = duals.lower[i];
        if is_nonneg[i] {
            dual_infeasibility = dual_infeasibility.max(-lam);
            gap += lam * z[i];
        } else {
            dual_infeasibility = dual_infeasibility.max(lam.abs());
        }
        grad[i] -= lam;
    }
    let scale = obj_grad.amax().max(1.0);
    KktResiduals {
        eq_residual,
        stationarity: grad.amax() / scale,
        complementarity: gap.abs() / objective.abs().max(1.0),
        primal_infeasibility: primal_infeasibility.max(0.0),
        dual_infeasibility: dual_infeasibility.max(0.0),
    }
}

/// `grad F + E' nu + L1' eta - lambda`, unscaled.
fn stationarity_vector(prog: &StructuredProgram, z: &DVector<f64>, duals: &Duals) -> DVector<f64> {
    let mut grad = prog.linear_cost.clone();
    if !prog.persp_weight.is_empty() {
        let u = &prog.persp_num * z;
        let s = &prog.persp_den * z;
        for j in 0..u.len() {
            if s[j] > 0.0 {
                let ratio = u[j] / s[j];
                let w = prog.persp_weight[j];
                grad += prog.persp_num.row(j).transpose() * (2.0 * w * ratio);
                grad -= prog.persp_den.row(j).transpose() * (w * ratio * ratio);
            }
        }
    }
    if !prog.l1_weight.is_empty() {
        grad += prog.l1_rows.tr_mul(&duals.l1);
    }
    if prog.num_eq() > 0 {
        grad += prog.eq_a.tr_mul(&duals.eq);
    }
    grad - &duals.lower
}

/// Smooth barrier subproblem `min t F(x) + phi(x)` used by both phases.
trait BarrierProblem {
    fn objective(&self, x: &DVector<f64>) -> f64;
    /// `phi(x)`, or `None` outside the open domain.
    fn barrier(&self, x: &DVector<f64>) -> Option<f64>;
    /// Gradient and Hessian of `t F + phi`.
    fn derivatives(&self, x: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>);
    /// Largest step keeping the linear bounds strictly positive.
    fn max_step(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64;
    fn barrier_terms(&self) -> usize;
}

struct Phase2<'a> {
    prog: &'a StructuredProgram,
    k: usize,
}

impl Phase2<'_> {
    fn l1_slacks(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let z = x.rows(0, self.k);
        let s = x.rows(self.k, self.prog.l1_weight.len());
        let r = &self.prog.l1_rows * z;
        (s - &r, s + r)
    }
}

impl BarrierProblem for Phase2<'_> {
    fn objective(&self, x: &DVector<f64>) -> f64 {
        let z = x.rows(0, self.k).into_owned();
        let mut f = self.prog.linear_cost.dot(&z);
        if !self.prog.persp_weight.is_empty() {
            let u = &self.prog.persp_num * &z;
            let s = &self.prog.persp_den * &z;
            for j in 0..u.len() {
                f += self.prog.persp_weight[j] * u[j] * u[j] / s[j];
            }
        }
        let l = self.prog.l1_weight.len();
        f + self.prog.l1_weight.dot(&x.rows(self.k, l))
    }

    fn barrier(&self, x: &DVector<f64>) -> Option<f64> {
        let mut phi = 0.0;
        for &i in &self.prog.nonneg_idx {
            if x[i] <= 0.0 {
                return None;
            }
            phi -= x[i].ln();
        }
        if !self.prog.l1_weight.is_empty() {
            let (p, q) = self.l1_slacks(x);
            for (a, b) in p.iter().zip(q.iter()) {
                if *a <= 0.0 || *b <= 0.0 {
                    return None;
                }
                phi -= a.ln() + b.ln();
            }
        }
        if !self.prog.persp_weight.is_empty() {
            let s = &self.prog.persp_den * x.rows(0, self.k);
            if s.iter().any(|v| *v <= 0.0) {
                return None;
            }
        }
        Some(phi)
    }

    fn derivatives(&self, x: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.k;
        let l = self.prog.l1_weight.len();
        let n = k + l;
        let z = x.rows(0, k).into_owned();
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        g.rows_mut(0, k).copy_from(&(&self.prog.linear_cost * t));

        let jn = self.prog.persp_weight.len();
        if jn > 0 {
            let u = &self.prog.persp_num * &z;
            let s = &self.prog.persp_den * &z;
            let ratio = u.component_div(&s);
            let ga = self.prog.persp_weight.component_mul(&ratio) * (2.0 * t);
            let gb = self
                .prog
                .persp_weight
                .component_mul(&ratio.component_mul(&ratio))
                * (-t);
            let mut gz = self.prog.persp_num.tr_mul(&ga);
            gz.gemv_tr(1.0, &self.prog.persp_den, &gb, 1.0);
            let mut gzv = g.rows_mut(0, k);
            gzv += &gz;
            // Hessian = sum_j (2 t w_j / s_j) (a_j - ratio_j b_j)(a_j - ratio_j b_j)'
            let mut c = self.prog.persp_num.clone();
            for j in 0..jn {
                let scale = (2.0 * t * self.prog.persp_weight[j] / s[j]).sqrt();
                for i in 0..k {
                    c[(j, i)] = scale * (c[(j, i)] - ratio[j] * self.prog.persp_den[(j, i)]);
                }
            }
            let mut hz = h.view_mut((0, 0), (k, k));
            hz.gemm_tr(1.0, &c, &c, 1.0);
        }

        for &i in &self.prog.nonneg_idx {
            g[i] -= 1.0 / x[i];
            h[(i, i)] += 1.0 / (x[i] * x[i]);
        }

        if l > 0 {
            let (p, q) = self.l1_slacks(x);
            let mut rw = self.prog.l1_rows.clone();
            for li in 0..l {
                let (pi, qi) = (p[li], q[li]);
                let r = self.prog.l1_rows.row(li);
                // z-gradient of -log(s - r'z) - log(s + r'z)
                let coeff = 1.0 / pi - 1.0 / qi;
                for i in 0..k {
                    g[i] += coeff * r[i];
                }
                g[k + li] += t * self.prog.l1_weight[li] - 1.0 / pi - 1.0 / qi;
                let curv = 1.0 / (pi * pi) + 1.0 / (qi * qi);
                rw.row_mut(li).scale_mut(curv.sqrt());
                let cross = -1.0 / (pi * pi) + 1.0 / (qi * qi);
                for i in 0..k {
                    h[(i, k + li)] += cross * r[i];
                    h[(k + li, i)] += cross * r[i];
                }
                h[(k + li, k + li)] += curv;
            }
            let mut hz = h.view_mut((0, 0), (k, k));
            hz.gemm_tr(1.0, &rw, &rw, 1.0);
        }
        (g, h)
    }

    fn max_step(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
        let mut alpha = f64::INFINITY;
        for &i in &self.prog.nonneg_idx {
            if dx[i] < 0.0 {
                alpha = alpha.min(-x[i] / dx[i]);
            }
        }
        alpha
    }

    fn barrier_terms(&self) -> usize {
        self.prog.nonneg_idx.len() + 2 * self.prog.l1_weight.len()
    }
}

/// `min tau` over `(z, tau)` with `z_i + tau > 0` and `|z - z0| < radius`.
struct Phase1<'a> {
    nonneg: &'a [usize],
    z0: DVector<f64>,
    radius2: f64,
    k: usize,
}

impl BarrierProblem for Phase1<'_> {
    fn objective(&self, x: &DVector<f64>) -> f64 {
        x[self.k]
    }

    fn barrier(&self, x: &DVector<f64>) -> Option<f64> {
        let tau = x[self.k];
        let mut phi = 0.0;
        for &i in self.nonneg {
            let v = x[i] + tau;
            if v <= 0.0 {
                return None;
            }
            phi -= v.ln();
        }
        let slack = self.radius2 - (x.rows(0, self.k) - &self.z0).norm_squared();
        if slack <= 0.0 {
            return None;
        }
        Some(phi - slack.ln())
    }

    fn derivatives(&self, x: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.k;
        let tau = x[k];
        let mut g = DVector::zeros(k + 1);
        let mut h = DMatrix::zeros(k + 1, k + 1);
        g[k] = t;
        for &i in self.nonneg {
            let v = x[i] + tau;
            let d = -1.0 / v;
            let c = 1.0 / (v * v);
            g[i] += d;
            g[k] += d;
            h[(i, i)] += c;
            h[(i, k)] += c;
            h[(k, i)] += c;
            h[(k, k)] += c;
        }
        let y = x.rows(0, k) - &self.z0;
        let slack = self.radius2 - y.norm_squared();
        let inv = 1.0 / slack;
        for i in 0..k {
            g[i] += 2.0 * y[i] * inv;
            h[(i, i)] += 2.0 * inv;
        }
        let mut hz = h.view_mut((0, 0), (k, k));
        hz.ger(4.0 * inv * inv, &y, &y, 1.0);
        (g, h)
    }

    fn max_step(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
        let mut alpha = f64::INFINITY;
        for &i in self.nonneg {
            let d = dx[i] + dx[self.k];
            if d < 0.0 {
                alpha = alpha.min(-(x[i] + x[self.k]) / d);
            }
        }
        alpha
    }

    fn barrier_terms(&self) -> usize {
        self.nonneg.len() + 1
    }
}

struct Centering {
    x: DVector<f64>,
    merits: Vec<f64>,
    newton_steps: usize,
    converged: bool,
}

const NEWTON_DECREMENT_TOL: f64 = 1e-13;
/// Below this, a step that fails to halve the decrement means roundoff has won.
const NEWTON_STALL_TOL: f64 = 1e-8;
const MAX_NEWTON_PER_STAGE: usize = 60;

/// Orthonormal basis of the null space of `eq`, as columns.
fn null_space(eq: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if eq.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let gram = eq.tr_mul(eq);
    let eig = gram.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let cutoff = top * 1e-12 * n as f64;
    let keep: Vec<usize> = (0..n).filter(|i| eig.eigenvalues[*i] <= cutoff).collect();
    let mut basis = DMatrix::zeros(n, keep.len());
    for (c, i) in keep.iter().enumerate() {
        basis.set_column(c, &eig.eigenvectors.column(*i));
    }
    basis
}

/// Newton direction `dx = -N (N'HN)^{-1} N'g` restricted to the null space.
fn reduced_newton(
    g: &DVector<f64>,
    h: &DMatrix<f64>,
    basis: &DMatrix<f64>,
) -> Option<(DVector<f64>, f64)> {
    let d = basis.ncols();
    if d == 0 {
        return Some((DVector::zeros(g.len()), 0.0));
    }
    let gy = basis.tr_mul(g);
    let hn = h * basis;
    let mut hy = basis.tr_mul(&hn);
    hy = (&hy + hy.transpose()) * 0.5;
    // Symmetric Jacobi scaling; the diagonal spans many decades near the bounds.
    let floor = hy.diagonal().amax().max(f64::MIN_POSITIVE) * 1e-300;
    let sc = hy.diagonal().map(|v| 1.0 / v.max(floor).sqrt());
    let mut hs = hy;
    for j in 0..d {
        for i in 0..d {
            hs[(i, j)] *= sc[i] * sc[j];
        }
    }
    let gs = gy.component_mul(&sc);
    for attempt in 0..6 {
        let mut m = hs.clone();
        if attempt > 0 {
            let ridge = 1e-15 * 100f64.powi(attempt - 1);
            for i in 0..d {
                m[(i, i)] += ridge;
            }
        }
        if let Some(chol) = m.cholesky() {
            let dy = -chol.solve(&gs);
            if dy.iter().all(|v| v.is_finite()) {
                let decrement = -gs.dot(&dy);
                return Some((basis * dy.component_mul(&sc), decrement));
            }
        }
    }
    None
}

fn center<P: BarrierProblem>(
    prob: &P,
    x0: DVector<f64>,
    t: f64,
    basis: &DMatrix<f64>,
    budget: usize,
    stop: &dyn Fn(&DVector<f64>) -> bool,
) -> Centering {
    let mut x = x0;
    let mut merits = Vec::new();
    let mut steps = 0;
    let merit = |x: &DVector<f64>| prob.barrier(x).map(|phi| t * prob.objective(x) + phi);
    let mut current = merit(&x).expect("centering starts inside the domain");
    let mut previous = f64::INFINITY;
    loop {
        let (g, h) = prob.derivatives(&x, t);
        if steps >= budget.min(MAX_NEWTON_PER_STAGE) {
            return Centering {
                x,
                merits,
                newton_steps: steps,
                converged: false,
            };
        }
        let Some((dx, decrement)) = reduced_newton(&g, &h, basis) else {
            return Centering {
                x,
                merits,
                newton_steps: steps,
                converged: false,
            };
        };
        let stalled = decrement <= NEWTON_STALL_TOL && decrement > 0.5 * previous;
        previous = decrement;
        if decrement / 2.0 <= NEWTON_DECREMENT_TOL || stalled {
            return Centering {
                x,
                merits,
                newton_steps: steps,
                converged: true,
            };
        }
        steps += 1;
        let mut alpha = (0.99 * prob.max_step(&x, &dx)).min(1.0);
        // Close to the central path the full step is safe; merit differences
        // there are below roundoff of t F.
        let near = decrement < 0.1;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &x + &dx * alpha;
            if let Some(m) = merit(&trial) {
                if near || m <= current - 1e-4 * alpha * decrement {
                    x = trial;
                    current = m;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Centering {
                x,
                merits,
                newton_steps: steps,
                converged: false,
            };
        }
        merits.push(current);
        if stop(&x) {
            return Centering {
                x,
                merits,
                newton_steps: steps,
                converged: false,
            };
        }
    }
}

fn pseudo_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.nrows() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    let eps = smax * 1e-13 * a.nrows().max(a.ncols()) as f64;
    svd.solve(b, eps).expect("both factors were computed")
}

fn empty_duals(prog: &StructuredProgram) -> Duals {
    Duals {
        eq: DVector::zeros(prog.num_eq()),
        lower: DVector::zeros(prog.num_vars()),
        l1: DVector::zeros(prog.l1_weight.len()),
    }
}

pub fn solve(prog: &StructuredProgram, opts: &SolverOptions) -> Result<SolveResult> {
    opts.validate()?;
    prog.validate()?;
    let k = prog.num_vars();
    let tol = opts.tol;
    let mut iterations = 0usize;
    let mut history = Vec::new();

    let infeasible = |certificate: String, z: DVector<f64>, iterations: usize| SolveResult {
        objective: prog.objective(&z),
        kkt: KktResiduals::default(),
        z,
        status: SolveStatus::Infeasible,
        iterations,
        duals: empty_duals(prog),
        certificate: Some(certificate),
        merit_history: Vec::new(),
    };

    // Phase 0: consistency of the equality system.
    let z_ls = pseudo_solve(&prog.eq_a, &prog.eq_b);
    let ls_res = if prog.num_eq() > 0 {
        (&prog.eq_a * &z_ls - &prog.eq_b).amax()
    } else {
        0.0
    };
    if ls_res > tol * (1.0 + prog.eq_b.amax()) {
        return Ok(infeasible(
            format!("equality system is inconsistent: least-squares residual {ls_res:.3e}"),
            z_ls,
            0,
        ));
    }

    // Phase 1: strictly feasible point.
    let mut z = z_ls.clone();
    let min_nonneg = prog
        .nonneg_idx
        .iter()
        .map(|&i| z[i])
        .fold(f64::INFINITY, f64::min);
    let scale = 1.0 + z.amax();
    if !prog.nonneg_idx.is_empty() && !(min_nonneg > 1e-3 * scale) {
        let radius = 1e4 * scale * (k as f64).sqrt();
        let p1 = Phase1 {
            nonneg: &prog.nonneg_idx,
            z0: z_ls.clone(),
            radius2: radius * radius,
            k,
        };
        let mut y = DVector::zeros(k + 1);
        y.rows_mut(0, k).copy_from(&z_ls);
        y[k] = (-min_nonneg).max(0.0) + scale;
        let eq1 = {
            let mut m = DMatrix::zeros(prog.num_eq(), k + 1);
            m.view_mut((0, 0), (prog.num_eq(), k)).copy_from(&prog.eq_a);
            m
        };
        let basis1 = null_space(&eq1, k + 1);
        let m1 = p1.barrier_terms() as f64;
        let mut t = 1.0 / scale;
        let found = loop {
            let budget = opts.max_iter.saturating_sub(iterations);
            if budget == 0 {
                break false;
            }
            let stop = |x: &DVector<f64>| x[k] < -1e-3 * scale;
            let c = center(&p1, y, t, &basis1, budget, &stop);
            iterations += c.newton_steps;
            y = c.x;
            let tau = y[k];
            if tau < 0.0 {
                break true;
            }
            let lower = tau - m1 / t;
            if lower > tol * scale {
                return Ok(infeasible(
                    format!("phase-1 optimum tau >= {lower:.3e} > 0: no point satisfies z >= 0 and E z = f"),
                    y.rows(0, k).into_owned(),
                    iterations,
                ));
            }
            if m1 / t < 1e-3 * tol * scale {
                return Ok(infeasible(
                    format!(
                        "phase-1 optimum tau = {tau:.3e}: the feasible set has no strict interior"
                    ),
                    y.rows(0, k).into_owned(),
                    iterations,
                ));
            }
            t *= 10.0;
        };
        if !found {
            let zc = y.rows(0, k).into_owned();
            return Ok(SolveResult {
                objective: prog.objective(&zc),
                kkt: check_kkt(prog, &zc, &empty_duals(prog)),
                z: zc,
                status: SolveStatus::MaxIter,
                iterations,
                duals: empty_duals(prog),
                certificate: Some("phase-1 iteration budget exhausted".into()),
                merit_history: Vec::new(),
            });
        }
        z = y.rows(0, k).into_owned();
    }

    if !prog.has_objective() {
        let duals = empty_duals(prog);
        let kkt = check_kkt(prog, &z, &duals);
        return Ok(SolveResult {
            objective: 0.0,
            status: if kkt.within(tol) {
                SolveStatus::Optimal
            } else {
                SolveStatus::MaxIter
            },
            kkt,
            z,
            iterations,
            duals,
            certificate: None,
            merit_history: history,
        });
    }

    // Phase 2: barrier path from the interior point.
    let l = prog.l1_weight.len();
    let p2 = Phase2 { prog, k };
    let mut x = DVector::zeros(k + l);
    x.rows_mut(0, k).copy_from(&z);
    if l > 0 {
        let r = &prog.l1_rows * &z;
        for li in 0..l {
            x[k + li] = r[li].abs() + 1.0 + r[li].abs();
        }
    }
    let eq2 = {
        let mut m = DMatrix::zeros(prog.num_eq(), k + l);
        m.view_mut((0, 0), (prog.num_eq(), k)).copy_from(&prog.eq_a);
        m
    };
    let basis2 = null_space(&eq2, k + l);
    let m2 = p2.barrier_terms() as f64;
    let mut t = if m2 > 0.0 {
        initial_barrier_weight(&p2, &x, &basis2, m2)
    } else {
        1.0
    };
    let mu = 50.0;
    let mut status = SolveStatus::MaxIter;
    let mut recovered = None;
    loop {
        let budget = opts.max_iter.saturating_sub(iterations);
        if budget == 0 {
            break;
        }
        let c = center(&p2, x, t, &basis2, budget, &|_| false);
        iterations += c.newton_steps;
        x = c.x;
        history.push(c.merits);
        if x.amax() > 1e12 {
            break;
        }
        // Pushing past the first accepted gap does not help: at a perspective
        // apex the ratio of two vanishing entries loses all accuracy.
        if c.converged && (m2 == 0.0 || m2 / t <= tol * p2.objective(&x).abs().max(1.0)) {
            recovered = Some(recover_duals(prog, &p2, &x, t));
            status = SolveStatus::Optimal;
            break;
        }
        t *= mu;
    }

    let (zc, duals, kkt) = recovered.unwrap_or_else(|| recover_duals(prog, &p2, &x, t));
    if status == SolveStatus::Optimal && !kkt.within(tol) {
        status = SolveStatus::MaxIter;
    }
    Ok(SolveResult {
        objective: prog.objective(&zc),
        z: zc,
        status,
        kkt,
        iterations,
        duals,
        certificate: None,
        merit_history: history,
    })
}

/// Primal point with polished equalities and the best available multipliers
/// at the barrier weight `t`.
fn recover_duals(
    prog: &StructuredProgram,
    p2: &Phase2,
    x: &DVector<f64>,
    t: f64,
) -> (DVector<f64>, Duals, KktResiduals) {
    let k = prog.num_vars();
    let l = prog.l1_weight.len();
    let zc = polish_equalities(prog, x.rows(0, k).into_owned());
    let mut lower = DVector::zeros(k);
    for &i in &prog.nonneg_idx {
        lower[i] = 1.0 / (t * zc[i]);
    }
    let mut l1 = DVector::zeros(l);
    if l > 0 {
        let (p, q) = p2.l1_slacks(x);
        for li in 0..l {
            // Rescaled so that |eta| <= kappa holds exactly.
            let (ep, eq) = (1.0 / p[li], 1.0 / q[li]);
            l1[li] = prog.l1_weight[li] * (ep - eq) / (ep + eq);
        }
    }
    // Multipliers of E z = f: least-squares fit of the stationarity equation.
    let eq_dual = if prog.num_eq() > 0 {
        let mut target = -prog.linear_cost.clone() + &lower;
        if !prog.persp_weight.is_empty() {
            let u = &prog.persp_num * &zc;
            let sd = &prog.persp_den * &zc;
            let ratio = u.component_div(&sd);
            let ga = prog.persp_weight.component_mul(&ratio) * 2.0;
            let gb = -prog
                .persp_weight
                .component_mul(&ratio.component_mul(&ratio));
            target -= prog.persp_num.tr_mul(&ga) + prog.persp_den.tr_mul(&gb);
        }
        if l > 0 {
            target -= prog.l1_rows.tr_mul(&l1);
        }
        pseudo_solve(&prog.eq_a.transpose(), &target)
    } else {
        DVector::zeros(0)
    };
    let duals = Duals {
        eq: eq_dual,
        lower,
        l1,
    };
    let barrier_kkt = check_kkt(prog, &zc, &duals);
    // Bound multipliers as the nonnegative part of the remaining gradient.
    let residual = stationarity_vector(prog, &zc, &duals);
    let mut refined = duals.clone();
    for &i in &prog.nonneg_idx {
        refined.lower[i] = (duals.lower[i] + residual[i]).max(0.0);
    }
    let refined_kkt = check_kkt(prog, &zc, &refined);
    let mut best = if refined_kkt.max() < barrier_kkt.max() {
        (refined, refined_kkt)
    } else {
        (duals, barrier_kkt)
    };
    if let Some(active) = active_set_duals(prog, &zc) {
        let kkt = check_kkt(prog, &zc, &active);
        if kkt.max() < best.1.max() {
            best = (active, kkt);
        }
    }
    (zc, best.0, best.1)
}

/// Multipliers fitted jointly on a guessed active set: bounds with `z_i` near
/// zero and L1 terms near their kink get free multipliers, clipped to their
/// sign and box constraints afterwards; every other multiplier is fixed.
fn active_set_duals(prog: &StructuredProgram, z: &DVector<f64>) -> Option<Duals> {
    let k = prog.num_vars();
    let m = prog.num_eq();
    let l = prog.l1_weight.len();
    let cutoff = 1e-6 * z.amax().max(1.0);
    let bounds: Vec<usize> = prog
        .nonneg_idx
        .iter()
        .copied()
        .filter(|&i| z[i] < cutoff)
        .collect();
    let r = &prog.l1_rows * z;
    let kinks: Vec<usize> = (0..l).filter(|&li| r[li].abs() < cutoff).collect();
    let zero = Duals {
        eq: DVector::zeros(m),
        lower: DVector::zeros(k),
        l1: DVector::zeros(l),
    };
    let mut target = -stationarity_vector(prog, z, &zero);
    let mut l1 = DVector::zeros(l);
    for li in 0..l {
        if !kinks.contains(&li) {
            l1[li] = prog.l1_weight[li] * r[li].signum();
            target -= prog.l1_rows.row(li).transpose() * l1[li];
        }
    }
    let cols = m + bounds.len() + kinks.len();
    if cols == 0 {
        return None;
    }
    let mut jac = DMatrix::zeros(k, cols);
    jac.view_mut((0, 0), (k, m))
        .copy_from(&prog.eq_a.transpose());
    for (c, &i) in bounds.iter().enumerate() {
        jac[(i, m + c)] = -1.0;
    }
    for (c, &li) in kinks.iter().enumerate() {
        jac.column_mut(m + bounds.len() + c)
            .copy_from(&prog.l1_rows.row(li).transpose());
    }
    let sol = pseudo_solve(&jac, &target);
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut lower = DVector::zeros(k);
    for (c, &i) in bounds.iter().enumerate() {
        lower[i] = sol[m + c].max(0.0);
    }
    for (c, &li) in kinks.iter().enumerate() {
        let w = prog.l1_weight[li];
        l1[li] = sol[m + bounds.len() + c].clamp(-w, w);
    }
    Some(Duals {
        eq: sol.rows(0, m).into_owned(),
        lower,
        l1,
    })
}

/// `t` minimising the reduced centrality residual `|t grad F + grad phi|` at
/// `x`, or `m / |F(x)|` when that is not positive.
fn initial_barrier_weight<P: BarrierProblem>(
    prob: &P,
    x: &DVector<f64>,
    basis: &DMatrix<f64>,
    m: f64,
) -> f64 {
    let fallback = m / prob.objective(x).abs().max(1.0);
    let (g_barrier, _) = prob.derivatives(x, 0.0);
    let (g_one, _) = prob.derivatives(x, 1.0);
    let gf = basis.tr_mul(&(g_one - &g_barrier));
    let gb = basis.tr_mul(&g_barrier);
    let denom = gf.norm_squared();
    let t = -gf.dot(&gb) / denom;
    if denom > 0.0 && t.is_finite() && t > fallback {
        t
    } else {
        fallback
    }
}

/// Removes rounding drift from `E z = f` accumulated along the barrier path.
/// Nonnegative entries the correction would more than halve are frozen and the
/// correction is re-solved on the remaining columns.
fn polish_equalities(prog: &StructuredProgram, z: DVector<f64>) -> DVector<f64> {
    if prog.num_eq() == 0 {
        return z;
    }
    let k = prog.num_vars();
    let residual = &prog.eq_b - &prog.eq_a * &z;
    let before = residual.amax();
    let mut free: Vec<usize> = (0..k).collect();
    let mut polished = None;
    for _ in 0..8 {
        let sub = DMatrix::from_fn(prog.num_eq(), free.len(), |r, c| prog.eq_a[(r, free[c])]);
        let ds = pseudo_solve(&sub, &residual);
        let mut d = DVector::zeros(k);
        for (c, &i) in free.iter().enumerate() {
            d[i] = ds[c];
        }
        let crossing: Vec<usize> = prog
            .nonneg_idx
            .iter()
            .copied()
            .filter(|&i| z[i] + d[i] < 0.5 * z[i])
            .collect();
        if crossing.is_empty() {
            polished = Some(&z + d);
            break;
        }
        free.retain(|i| !crossing.contains(i));
        // Fall back to a shortened step if freezing keeps failing.
        let mut step: f64 = 1.0;
        for &i in &prog.nonneg_idx {
            if z[i] + d[i] < 0.0 {
                step = step.min(0.99 * z[i] / -d[i]);
            }
        }
        polished = Some(&z + d * step.max(0.0));
    }
    match polished {
        Some(p) if (&prog.eq_a * &p - &prog.eq_b).amax() < before => p,
        _ => z,
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(y: &[f64], out: &mut [f64]) {
    let mut u: Vec<f64> = y.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cumsum += uj;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if uj - candidate > 0.0 {
            theta = candidate;
        }
    }
    for (o, v) in out.iter_mut().zip(y) {
        *o = (v - theta).max(0.0);
    }
}

/// Project each row of `m` onto the simplex.
pub fn project_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let mut row = vec![0.0; m.ncols()];
    let mut proj = vec![0.0; m.ncols()];
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            row[j] = m[(i, j)];
        }
        project_simplex(&row, &mut proj);
        for j in 0..m.ncols() {
            out[(i, j)] = proj[j];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSolution {
    pub p: DVector<f64>,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

/// `min 1/2 p'Qp - rhs'p` over the probability simplex.
pub fn solve_simplex_ls(
    q: &DMatrix<f64>,
    rhs: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SimplexSolution> {
    opts.validate()?;
    let n = rhs.len();
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::dimension("simplex QP matrix", n, q.nrows()));
    }
    if n == 0 {
        return Err(Error::invalid("rhs", "empty simplex"));
    }
    let q = (q + q.transpose()) * 0.5;
    let ones = DVector::from_element(n, 1.0);
    let mut p = DVector::from_element(n, 1.0 / n as f64);
    let scale = 1.0 + q.amax() + rhs.amax();
    let mut lam = DVector::from_element(n, scale);
    let mut nu = 0.0;
    let residuals = |p: &DVector<f64>, lam: &DVector<f64>, nu: f64| {
        let rd = &q * p - rhs + &ones * nu - lam;
        let rp = p.sum() - 1.0;
        (rd, rp)
    };
    let mut iterations = 0;
    let tol = opts.tol * 1e-2;
    for _ in 0..opts.max_iter {
        let (rd, rp) = residuals(&p, &lam, nu);
        let mu = p.dot(&lam) / n as f64;
        if rd.amax() <= tol * scale && rp.abs() <= tol && mu <= tol * tol.sqrt() {
            break;
        }
        iterations += 1;
        let mut m = q.clone();
        for i in 0..n {
            m[(i, i)] += lam[i] / p[i];
        }
        let chol = match m.clone().cholesky() {
            Some(c) => c,
            None => {
                for i in 0..n {
                    m[(i, i)] += 1e-12 * scale;
                }
                m.cholesky().ok_or_else(|| Error::NotConverged {
                    iterations,
                    kkt: KktResiduals {
                        stationarity: rd.amax(),
                        eq_residual: rp.abs(),
                        ..Default::default()
                    },
                })?
            }
        };
        let x2 = chol.solve(&ones);
        let direction = |rc: &DVector<f64>| {
            let x1 = chol.solve(&(-&rd - rc.component_div(&p)));
            let dnu = (x1.sum() + rp) / x2.sum();
            let dp = &x1 - &x2 * dnu;
            let dlam = (-rc - lam.component_mul(&dp)).component_div(&p);
            (dp, dnu, dlam)
        };
        let step_len = |v: &DVector<f64>, dv: &DVector<f64>| {
            v.iter()
                .zip(dv.iter())
                .filter(|(_, d)| **d < 0.0)
                .map(|(a, d)| -a / d)
                .fold(1.0, f64::min)
        };
        let rc_aff = p.component_mul(&lam);
        let (dp_a, _, dl_a) = direction(&rc_aff);
        let ap = step_len(&p, &dp_a);
        let al = step_len(&lam, &dl_a);
        let mu_aff = (&p + &dp_a * ap).dot(&(&lam + &dl_a * al)) / n as f64;
        let sigma = (mu_aff / mu).powi(3).min(1.0);
        let rc = rc_aff + dp_a.component_mul(&dl_a) - DVector::from_element(n, sigma * mu);
        let (dp, dnu, dlam) = direction(&rc);
        let ap = (0.995 * step_len(&p, &dp)).min(1.0);
        let al = (0.995 * step_len(&lam, &dlam)).min(1.0);
        p += &dp * ap;
        nu += dnu * al;
        lam += &dlam * al;
    }
    // Clip and renormalize the interior iterate.
    let mut clean = p.map(|v| v.max(0.0));
    clean /= clean.sum();
    let g = &q * &clean - rhs;
    let gmin = g.min();
    let stationarity = clean
        .iter()
        .zip(g.iter())
        .map(|(pi, gi)| {
            if *pi > 0.0 {
                (gi - gmin).abs() * pi.min(1.0)
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    let kkt = KktResiduals {
        eq_residual: (clean.sum() - 1.0).abs(),
        stationarity: stationarity / scale,
        complementarity: p.dot(&lam) / scale,
        primal_infeasibility: 0.0,
        dual_infeasibility: 0.0,
    };
    if !kkt.within(opts.tol) {
        return Err(Error::NotConverged { iterations, kkt });
    }
    Ok(SimplexSolution {
        p: clean,
        kkt,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowStochasticSolution {
    pub p: DMatrix<f64>,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

/// Optimality residuals of a row-stochastic candidate for `min 1/2 tr(P'HP) - tr(C'P)`.
pub fn row_stochastic_kkt(
    h: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: &DMatrix<f64>,
    lipschitz: f64,
) -> KktResiduals {
    let g = h * p - c;
    let step = p - &g / lipschitz;
    let mapped = project_rows(&step);
    let scale = 1.0 + c.amax();
    let mut comp: f64 = 0.0;
    let mut eq: f64 = 0.0;
    for i in 0..p.nrows() {
        let row_g = g.row(i);
        let gmin = row_g.min();
        for j in 0..p.ncols() {
            comp = comp.max(p[(i, j)].max(0.0) * (row_g[j] - gmin));
        }
        eq = eq.max((p.row(i).sum() - 1.0).abs());
    }
    KktResiduals {
        eq_residual: eq,
        stationarity: lipschitz * (p - mapped).amax() / scale,
        complementarity: comp / scale,
        primal_infeasibility: (-p.min()).max(0.0),
        dual_infeasibility: 0.0,
    }
}

/// `min 1/2 |G P - A|_F^2` over matrices with every row in the simplex,
/// started from `p0`.
pub fn solve_row_stochastic_ls(
    g: &DMatrix<f64>,
    a: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<RowStochasticSolution> {
    opts.validate()?;
    let n = g.ncols();
    if a.nrows() != g.nrows() || p0.nrows() != n || p0.ncols() != a.ncols() {
        return Err(Error::dimension("row-stochastic fit", n, p0.nrows()));
    }
    let h = g.tr_mul(g);
    let c = g.tr_mul(a);
    let lipschitz = h
        .clone()
        .symmetric_eigenvalues()
        .max()
        .max(f64::MIN_POSITIVE);
    let inv_l = 1.0 / lipschitz;
    let mut x = project_rows(p0);
    let mut y = x.clone();
    let mut theta: f64 = 1.0;
    let mut grad = DMatrix::zeros(n, a.ncols());
    let mut iterations = 0;
    let mut kkt = row_stochastic_kkt(&h, &c, &x, lipschitz);
    while iterations < opts.max_iter {
        if kkt.within(opts.tol) {
            return Ok(RowStochasticSolution {
                p: x,
                kkt,
                iterations,
            });
        }
        for _ in 0..10 {
            iterations += 1;
            grad.gemm(1.0, &h, &y, 0.0);
            grad -= &c;
            let x_new = project_rows(&(&y - &grad * inv_l));
            let restart = (&y - &x_new).dot(&(&x_new - &x)) > 0.0;
            if restart {
                theta = 1.0;
                y = x_new.clone();
            } else {
                let theta_new = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
                y = &x_new + (&x_new - &x) * ((theta - 1.0) / theta_new);
                theta = theta_new;
            }
            x = x_new;
        }
        kkt = row_stochastic_kkt(&h, &c, &x, lipschitz);
    }
    if kkt.within(opts.tol) {
        return Ok(RowStochasticSolution {
            p: x,
            kkt,
            iterations,
        });
    }
    Err(Error::NotConverged { iterations, kkt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn opts() -> SolverOptions {
        SolverOptions {
            tol: 1e-8,
            max_iter: 300,
        }
    }

    #[test]
    fn perspective_forced_by_equalities() {
        let prog = StructuredProgram::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 2.0]),
            vec![0],
        )
        .with_perspective(
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let res = solve(&prog, &opts()).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(res.objective, 4.0, epsilon = 1e-8);
    }

    #[test]
    fn l1_forced_by_equality() {
        let prog = StructuredProgram::new(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DVector::from_element(1, -3.0),
            vec![],
        )
        .with_l1(DMatrix::identity(1, 1), DVector::from_element(1, 1.0))
        .unwrap();
        let res = solve(&prog, &opts()).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal, "{}", res.kkt);
        assert_abs_diff_eq!(res.objective, 3.0, epsilon = 1e-7);
    }

    #[test]
    fn vertex_lp() {
        let prog = StructuredProgram::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 1.0),
            vec![0, 1],
        );
        let res = solve(&prog, &opts()).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(res.objective, 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(res.z[0], 1.0, epsilon = 1e-7);
        assert!(check_kkt(&prog, &res.z, &res.duals).within(1e-8));
        for stage in &res.merit_history {
            assert!(stage.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()));
        }
    }

    #[test]
    fn infeasible_programs_are_certified() {
        let neg = StructuredProgram::new(
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, -1.0),
            vec![0, 1],
        );
        let res = solve(&neg, &opts()).unwrap();
        assert_eq!(res.status, SolveStatus::Infeasible);
        assert!(res.certificate.unwrap().contains("phase-1"));

        let inconsistent = StructuredProgram::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0, 2.0]),
            vec![],
        );
        assert_eq!(
            solve(&inconsistent, &opts()).unwrap().status,
            SolveStatus::Infeasible
        );
    }

    #[test]
    fn feasibility_returns_interior_point() {
        let prog = StructuredProgram::new(
            DVector::zeros(3),
            DMatrix::from_row_slice(1, 3, &[1.0, 1.0, -1.0]),
            DVector::from_element(1, 1.0),
            vec![0, 1],
        );
        let res = solve(&prog, &opts()).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!(res.z[0] > 0.0 && res.z[1] > 0.0);
        assert!((res.z[0] + res.z[1] - res.z[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn simplex_examples() {
        let q = DMatrix::identity(3, 3);
        let mut e1 = DVector::zeros(3);
        e1[0] = 1.0;
        let p = solve_simplex_ls(&q, &e1, &opts()).unwrap().p;
        assert!((p - &e1).amax() < 1e-7);
        let p = solve_simplex_ls(&q, &DVector::zeros(3), &opts()).unwrap().p;
        assert!((p - DVector::from_element(3, 1.0 / 3.0)).amax() < 1e-9);
    }

    #[test]
    fn projection_examples() {
        let mut out = [0.0; 3];
        project_simplex(&[0.2, 0.3, 0.5], &mut out);
        assert_eq!(out, [0.2, 0.3, 0.5]);
        project_simplex(&[2.0, 0.0, 0.0], &mut out);
        assert_eq!(out, [1.0, 0.0, 0.0]);
        project_simplex(&[0.0, 0.0, 0.0], &mut out);
        assert!(out.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn row_stochastic_identity_data() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let res =
            solve_row_stochastic_ls(&g, &g, &DMatrix::from_element(2, 2, 0.5), &opts()).unwrap();
        assert!((res.p - DMatrix::identity(2, 2)).amax() < 1e-7);
    }
}
