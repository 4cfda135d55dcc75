//! Local linear identification near the origin, LQR synthesis and the
//! density-weighted blend with the global controller.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::SnapshotSet;
use crate::error::{Error, Result};
use crate::io::{dmat, dvec};
use crate::ocp::{FeedbackLaw, GlobalController};

/// Discrete-time model `y = A x + b u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalLinearModel {
    #[serde(with = "dmat")]
    pub a: DMatrix<f64>,
    #[serde(with = "dvec")]
    pub b: DVector<f64>,
    pub dt: f64,
    pub fit_residual: f64,
    pub spectral_radius: f64,
}

impl LocalLinearModel {
    /// First-order conversion `((A - I)/dt, b/dt)`.
    pub fn continuous_pair(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.a.nrows();
        (
            (&self.a - DMatrix::identity(n, n)) / self.dt,
            &self.b / self.dt,
        )
    }
}

fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

pub fn identify_local(data: &SnapshotSet) -> Result<LocalLinearModel> {
    data.validate()?;
    let zero = data.zero_input_count();
    if zero == 0 || zero == data.len() {
        return Err(Error::invalid(
            "local data",
            "needs both zero-input and step-input pairs",
        ));
    }
    let n = data.dim();
    let m = data.len();
    // Regressor rows are [x; u], so Theta = [A b].
    let mut reg = DMatrix::zeros(n + 1, m);
    let mut y = DMatrix::zeros(n, m);
    for i in 0..m {
        reg.view_mut((0, i), (n, 1)).copy_from(&data.x_points[i]);
        reg[(n, i)] = data.inputs[i];
        y.column_mut(i).copy_from(&data.y_points[i]);
    }
    let normal = &reg * reg.transpose();
    let eig = normal.clone().symmetric_eigen();
    let (imin, lmin) = eig.eigenvalues.argmin();
    let lmax = eig.eigenvalues.max();
    if !(lmin > 1e-12 * lmax.max(f64::MIN_POSITIVE)) {
        let dir = eig.eigenvectors.column(imin);
        let names: Vec<String> = (0..=n)
            .map(|k| {
                if k < n {
                    format!("x{}", k + 1)
                } else {
                    "u".into()
                }
            })
            .zip(dir.iter())
            .filter(|(_, c)| c.abs() > 1e-6)
            .map(|(name, c)| format!("{c:+.3}*{name}"))
            .collect();
        return Err(Error::RankDeficient {
            direction: names.join(" "),
        });
    }
    let rhs = &reg * y.transpose();
    let theta_t = normal
        .cholesky()
        .ok_or_else(|| Error::RankDeficient {
            direction: "normal matrix not positive definite".into(),
        })?
        .solve(&rhs);
    let theta = theta_t.transpose();
    let a = theta.columns(0, n).into_owned();
    let b = theta.column(n).into_owned();
    let fit_residual = (&y - &theta * &reg).norm();
    let spectral_radius = spectral_radius(&a);
    Ok(LocalLinearModel {
        a,
        b,
        dt: data.dt,
        fit_residual,
        spectral_radius,
    })
}

/// Solve `A^T P + P A = -Q` by the Kronecker form (small n only).
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut big = DMatrix::zeros(n * n, n * n);
    // vec(P) column-major: index i + n*j is P[i,j].
    for i in 0..n {
        for j in 0..n {
            let row = i + n * j;
            for k in 0..n {
                // (A^T P)[i,j] = sum_k A[k,i] P[k,j]
                big[(row, k + n * j)] += a[(k, i)];
                // (P A)[i,j] = sum_k P[i,k] A[k,j]
                big[(row, i + n * k)] += a[(k, j)];
            }
        }
    }
    let rhs = DVector::from_iterator(n * n, (0..n * n).map(|idx| -q[(idx % n, idx / n)]));
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Unstabilizable("Lyapunov operator is singular".into()))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

/// Stabilizing CARE solution from the matrix sign function of the Hamiltonian.
fn care_sign(a: &DMatrix<f64>, b: &DVector<f64>, q: &DMatrix<f64>, r: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n))
        .copy_from(&(-(b * b.transpose()) / r));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let mut z = h;
    for _ in 0..100 {
        let det = z.determinant().abs();
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let c = det.powf(-1.0 / (2 * n) as f64);
        let zi = (&z * c).try_inverse()?;
        let next = (&z * c + zi) * 0.5;
        let change = (&next - &z).norm() / next.norm();
        z = next;
        if change < 1e-13 {
            break;
        }
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n))
        .copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(z.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n))
        .copy_from(&(-z.view((n, 0), (n, n))));
    let p = lhs.svd(true, true).solve(&rhs, 1e-14).ok()?;
    Some((&p + p.transpose()) * 0.5)
}

/// Eigenvalues of `A` restricted to the complement of the controllable subspace.
fn uncontrollable_abscissa(a: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    let n = a.nrows();
    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = b.clone();
    for k in 0..n {
        ctrb.set_column(k, &col);
        col = a * col;
    }
    let svd = ctrb.svd(true, false);
    let u = svd.u.expect("left vectors requested");
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > 1e-10 * smax.max(1e-300))
        .count();
    if rank == n {
        return f64::NEG_INFINITY;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|i, j| svd.singular_values[*j].total_cmp(&svd.singular_values[*i]));
    let comp = DMatrix::from_columns(
        &order[rank..]
            .iter()
            .map(|k| u.column(*k))
            .collect::<Vec<_>>(),
    );
    spectral_abscissa(&(comp.transpose() * a * &comp))
}

pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    q: &DMatrix<f64>,
    r: f64,
    p: &DMatrix<f64>,
) -> f64 {
    let pb = p * b;
    (a.transpose() * p + p * a - &pb * pb.transpose() / r + q).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LqrBranch {
    Riccati,
    /// Input does not act; the drift is locally stable and `K = 0`.
    Lyapunov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousPair {
    #[serde(with = "dmat")]
    pub a_c: DMatrix<f64>,
    #[serde(with = "dvec")]
    pub b_c: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalController {
    #[serde(rename = "K_l", with = "dvec")]
    pub k: DVector<f64>,
    #[serde(rename = "P", with = "dmat")]
    pub p: DMatrix<f64>,
    pub gamma: f64,
    pub delta: f64,
    pub dt: f64,
    pub continuous_pair: ContinuousPair,
    #[serde(rename = "Q", with = "dmat")]
    pub q: DMatrix<f64>,
    pub r: f64,
    pub riccati_residual: f64,
    pub closed_loop_abscissa: f64,
    pub branch: LqrBranch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

const NK_MAX_ITER: usize = 60;

/// Continuous-time LQR for `(A_c, b_c)`; Newton-Kleinman from a stabilizing
/// initial gain.
pub fn lqr_continuous(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    q: &DMatrix<f64>,
    r: f64,
) -> Result<(DMatrix<f64>, DVector<f64>, LqrBranch)> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::dimension("LQR data", n, b.len()));
    }
    if !(r > 0.0) {
        return Err(Error::invalid("local.r", "must be positive"));
    }
    let unc = uncontrollable_abscissa(a, b);
    if unc >= 0.0 {
        return Err(Error::Unstabilizable(format!(
            "an uncontrollable mode has real part {unc:.3e} >= 0"
        )));
    }
    let stable = spectral_abscissa(a) < 0.0;
    if b.norm() == 0.0 {
        let p = lyapunov(a, q)?;
        return Ok((p, DVector::zeros(n), LqrBranch::Lyapunov));
    }
    let mut k = if stable {
        DVector::zeros(n)
    } else {
        let p0 = care_sign(a, b, q, r).ok_or_else(|| {
            Error::Unstabilizable("Hamiltonian has eigenvalues on the imaginary axis".into())
        })?;
        p0.transpose() * b / r
    };
    if spectral_abscissa(&(a - b * k.transpose())) >= 0.0 {
        return Err(Error::Unstabilizable(
            "no stabilizing initial gain found".into(),
        ));
    }
    let mut p = DMatrix::zeros(n, n);
    for _ in 0..NK_MAX_ITER {
        let ak = a - b * k.transpose();
        let qk = q + &k * k.transpose() * r;
        let next = lyapunov(&ak, &qk)?;
        let change = (&next - &p).norm() / next.norm().max(1.0);
        p = next;
        k = &p * b / r;
        if change < 1e-15 {
            break;
        }
    }
    Ok((p, k, LqrBranch::Riccati))
}

pub fn lqr_local(
    model: &LocalLinearModel,
    q: &DMatrix<f64>,
    r: f64,
    gamma: f64,
    delta: f64,
) -> Result<LocalController> {
    if !(gamma > 0.0) || !(delta > 0.0) {
        return Err(Error::invalid(
            "local.gamma",
            "gamma and delta must be positive",
        ));
    }
    let (a_c, b_c) = model.continuous_pair();
    let (p, k, branch) = lqr_continuous(&a_c, &b_c, q, r)?;
    if p.clone().cholesky().is_none() {
        return Err(Error::Unstabilizable(
            "Riccati solution is not positive definite".into(),
        ));
    }
    let closed_loop_abscissa = spectral_abscissa(&(&a_c - &b_c * k.transpose()));
    if closed_loop_abscissa >= 0.0 {
        return Err(Error::Unstabilizable(format!(
            "closed loop has an eigenvalue with real part {closed_loop_abscissa:.3e}"
        )));
    }
    let riccati_residual = riccati_residual(&a_c, &b_c, q, r, &p);
    Ok(LocalController {
        k,
        p,
        gamma,
        delta,
        dt: model.dt,
        continuous_pair: ContinuousPair { a_c, b_c },
        q: q.clone(),
        r,
        riccati_residual,
        closed_loop_abscissa,
        branch,
        config_hash: None,
    })
}

impl LocalController {
    /// `k_l(x) = -K x`.
    pub fn control_law(&self, x: &DVector<f64>) -> f64 {
        -self.k.dot(x)
    }

    /// `max((x^T P x)^{-3} - gamma, 0)`, infinite at the origin.
    pub fn density(&self, x: &DVector<f64>) -> f64 {
        local_density(self, x)
    }

    /// `x^T P x` threshold below which the local density is positive.
    pub fn active_level(&self) -> f64 {
        (1.0 / self.gamma).cbrt()
    }
}

impl FeedbackLaw for LocalController {
    fn control(&self, x: &DVector<f64>) -> f64 {
        self.control_law(x)
    }
}

pub fn local_density(local: &LocalController, x: &DVector<f64>) -> f64 {
    let s = x.dot(&(&local.p * x));
    if s <= 0.0 {
        return f64::INFINITY;
    }
    (s.powi(-3) - local.gamma).max(0.0)
}

#[derive(Debug, Clone)]
pub struct BlendedController {
    pub local: LocalController,
    pub global: GlobalController,
}

impl BlendedController {
    /// `(lambda_local, lambda_global)`, each in `[0, 1]` and summing to 1.
    pub fn weights(&self, rho_l: f64, rho: f64) -> (f64, f64) {
        let rho = rho.max(0.0);
        if rho_l.is_infinite() || !(rho_l + rho > 0.0) {
            return (1.0, 0.0);
        }
        let wl = rho_l / (rho_l + rho);
        (wl, 1.0 - wl)
    }

    pub fn weights_at(&self, x: &DVector<f64>) -> (f64, f64) {
        self.weights(local_density(&self.local, x), self.global.density(x))
    }

    pub fn in_local_region(&self, x: &DVector<f64>) -> bool {
        local_density(&self.local, x) > 0.0
    }
}

pub fn blend(ctrl: &BlendedController, x: &DVector<f64>) -> f64 {
    let rho_l = local_density(&ctrl.local, x);
    let kl = ctrl.local.control_law(x);
    if rho_l.is_infinite() {
        return kl;
    }
    let (kg, rho) = ctrl.global.control_and_density(x);
    let (wl, wg) = ctrl.weights(rho_l, rho);
    if wg == 0.0 {
        return kl;
    }
    wl * kl + wg * kg
}

impl FeedbackLaw for BlendedController {
    fn control(&self, x: &DVector<f64>) -> f64 {
        blend(self, x)
    }
}

/// Manifest tying a blended controller to its stored parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendedManifest {
    pub global_solution: String,
    pub local_controller: String,
    pub dictionary: String,
    pub control_form: crate::ocp::ControlForm,
    pub floor_rel: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}
