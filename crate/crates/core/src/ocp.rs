//! The finite-dimensional density programs, controller recovery and
//! Monte Carlo evaluation of closed loops.
//!
//! Decision variables are `z = (v, w)` with `rho = Psi^T v` and
//! `rho_bar = Psi^T w`. The divergence identity becomes
//! `-(M0 v + M1 w) = m` on the enforced rows.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{CostData, QuadratureRule, RbfDictionary};
use crate::domain::DomainBox;
use crate::dynamics::{ControlAffineSystem, Rk4, Trajectory};
use crate::error::{Error, Result};
use crate::io::dvec;
use crate::operators::GeneratorPair;
use crate::parallel::par_map;
use crate::solver::{self, KktResiduals, SolveStatus, SolverOptions, StructuredProgram};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    #[default]
    L2,
    L1,
    Feasibility,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostForm {
    /// `sum_k omega_k (Psi(x_k)^T w)^2 / (Psi(x_k)^T v)` over quadrature nodes.
    #[default]
    Quadrature,
    /// `sum_j D_jj w_j^2 / v_j`.
    PaperDiag,
}

/// Which rows of the divergence identity become equality constraints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSelection {
    /// Drop rows of basis functions centred in the origin ball (or, if none
    /// is, the ones nearest the origin). The generators have zero column sums,
    /// so with `m > 0` the full system is inconsistent.
    #[default]
    NonAbsorbing,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcpSettings {
    pub r: f64,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub cost_form: CostForm,
    #[serde(default)]
    pub rows: RowSelection,
}

impl Default for OcpSettings {
    fn default() -> Self {
        Self {
            r: 1.0,
            norm: Norm::L2,
            cost_form: CostForm::Quadrature,
            rows: RowSelection::NonAbsorbing,
        }
    }
}

impl OcpSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::invalid(
                "ocp.r",
                format!("must be positive, got {}", self.r),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub program: StructuredProgram,
    pub settings: OcpSettings,
    pub basis_len: usize,
    pub enforced_rows: Vec<usize>,
    pub m0: DMatrix<f64>,
    pub m1: DMatrix<f64>,
    pub m_vec: DVector<f64>,
}

/// Basis indices whose centre lies within `max(delta, nearest-centre norm)` of the origin.
pub fn absorbing_rows(dict: &RbfDictionary) -> Vec<usize> {
    let norms: Vec<f64> = (0..dict.len()).map(|k| dict.center(k).norm()).collect();
    let nearest = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let radius = dict.delta.max(nearest) * (1.0 + 1e-12) + 1e-12;
    (0..dict.len()).filter(|k| norms[*k] <= radius).collect()
}

/// Basis functions whose mass neither input moves anywhere: zero columns of
/// both `M0` and `M1`. Their rows can only be met through inflow from
/// neighbours, which at the box edges is often impossible with `v >= 0`.
/// Rounding in `(P - I) / dt` leaves entries near `1e-14` on exact fixed points.
const SINK_TOL: f64 = 1e-10;

pub fn sink_rows(m0: &DMatrix<f64>, m1: &DMatrix<f64>) -> Vec<usize> {
    (0..m0.ncols())
        .filter(|&k| {
            m0.column(k)
                .iter()
                .chain(m1.column(k).iter())
                .all(|x| x.abs() <= SINK_TOL)
        })
        .collect()
}

/// Rows among `candidates` on which `-(M0 v + M1 w) = m` is inconsistent: the
/// support of every left null vector `y` of `[M0 M1]` (restricted to the
/// candidates) with `y'm != 0`. Such rows form closed classes the fitted
/// generators neither feed nor drain, typically at the box edges.
pub fn inconsistent_rows(
    m0: &DMatrix<f64>,
    m1: &DMatrix<f64>,
    m_vec: &DVector<f64>,
    candidates: &[usize],
) -> Vec<usize> {
    let (e, n) = (candidates.len(), m0.ncols());
    if e == 0 {
        return Vec::new();
    }
    let mut a = DMatrix::zeros(e, 2 * n);
    let mut b = DVector::zeros(e);
    for (r, &k) in candidates.iter().enumerate() {
        a.view_mut((r, 0), (1, n)).copy_from(&m0.row(k));
        a.view_mut((r, n), (1, n)).copy_from(&m1.row(k));
        b[r] = m_vec[k];
    }
    let svd = a.svd(true, false);
    let u = svd.u.expect("left factor was requested");
    let top = svd.singular_values.amax();
    let mut dropped = vec![false; e];
    for (c, sv) in svd.singular_values.iter().enumerate() {
        if *sv > 1e-10 * top {
            continue;
        }
        let y = u.column(c);
        if y.dot(&b).abs() <= 1e-9 * b.norm() {
            continue;
        }
        for r in 0..e {
            if y[r].abs() > 1e-8 {
                dropped[r] = true;
            }
        }
    }
    (0..e)
        .filter(|r| dropped[*r])
        .map(|r| candidates[r])
        .collect()
}

pub fn assemble(
    gen: &GeneratorPair,
    cost: &CostData,
    dict: &RbfDictionary,
    quad: &QuadratureRule,
    settings: &OcpSettings,
) -> Result<OcpProblem> {
    assemble_with(gen, cost, dict, quad, settings, &[])
}

/// Assemble and solve; if the program is infeasible, retry once without the
/// rows of sink basis functions.
pub fn assemble_and_solve(
    gen: &GeneratorPair,
    cost: &CostData,
    dict: &RbfDictionary,
    quad: &QuadratureRule,
    settings: &OcpSettings,
    opts: &SolverOptions,
    dictionary_ref: &str,
) -> Result<DensitySolution> {
    let prob = assemble(gen, cost, dict, quad, settings)?;
    let first = solve_ocp(&prob, opts, dictionary_ref);
    let sinks = sink_rows(&gen.m0, &gen.m1);
    match first {
        Err(Error::Infeasible { .. })
            if settings.rows == RowSelection::NonAbsorbing && !sinks.is_empty() =>
        {
            log::warn!(
                "program infeasible; retrying without the rows of {} sink basis functions",
                sinks.len()
            );
            let prob = assemble_with(gen, cost, dict, quad, settings, &sinks)?;
            solve_ocp(&prob, opts, dictionary_ref)
        }
        other => other,
    }
}

fn assemble_with(
    gen: &GeneratorPair,
    cost: &CostData,
    dict: &RbfDictionary,
    quad: &QuadratureRule,
    settings: &OcpSettings,
    skip: &[usize],
) -> Result<OcpProblem> {
    settings.validate()?;
    let n = dict.len();
    for (what, rows, cols) in [
        ("M0", gen.m0.nrows(), gen.m0.ncols()),
        ("M1", gen.m1.nrows(), gen.m1.ncols()),
        ("D", cost.d_mat.nrows(), cost.d_mat.ncols()),
    ] {
        if rows != n || cols != n {
            return Err(Error::dimension(
                what,
                n,
                if rows != n { rows } else { cols },
            ));
        }
    }
    if cost.d_vec.len() != n || cost.m_vec.len() != n {
        return Err(Error::dimension(
            "cost vectors",
            n,
            cost.d_vec.len().min(cost.m_vec.len()),
        ));
    }

    let enforced_rows: Vec<usize> = match settings.rows {
        RowSelection::All => (0..n).collect(),
        RowSelection::NonAbsorbing => {
            let absorbing = absorbing_rows(dict);
            let mut candidates: Vec<usize> = (0..n)
                .filter(|k| !absorbing.contains(k) && !skip.contains(k))
                .collect();
            let mut closed = Vec::new();
            loop {
                let more = inconsistent_rows(&gen.m0, &gen.m1, &cost.m_vec, &candidates);
                if more.is_empty() {
                    break;
                }
                candidates.retain(|k| !more.contains(k));
                closed.extend(more);
            }
            if !closed.is_empty() {
                log::warn!(
                    "dropping {} rows of a closed class the generators never drain: {closed:?}",
                    closed.len()
                );
            }
            candidates
        }
    };
    let e = enforced_rows.len();
    let mut eq_a = DMatrix::zeros(e, 2 * n);
    let mut eq_b = DVector::zeros(e);
    for (r, &k) in enforced_rows.iter().enumerate() {
        for j in 0..n {
            eq_a[(r, j)] = -gen.m0[(k, j)];
            eq_a[(r, n + j)] = -gen.m1[(k, j)];
        }
        eq_b[r] = cost.m_vec[k];
    }

    let mut linear = DVector::zeros(2 * n);
    if settings.norm != Norm::Feasibility {
        linear.rows_mut(0, n).copy_from(&cost.d_vec);
    }
    let mut program = StructuredProgram::new(linear, eq_a, eq_b, (0..n).collect());
    match settings.norm {
        Norm::Feasibility => {}
        Norm::L1 => {
            let mut rows = DMatrix::zeros(n, 2 * n);
            for j in 0..n {
                rows[(j, n + j)] = 1.0;
            }
            let weights = DVector::from_element(n, settings.r * cost.c_scalar);
            program = program.with_l1(rows, weights)?;
        }
        Norm::L2 => match settings.cost_form {
            CostForm::Quadrature => {
                let q = quad.len();
                let mut num = DMatrix::zeros(q, 2 * n);
                let mut den = DMatrix::zeros(q, 2 * n);
                let mut psi = vec![0.0; n];
                for (i, x) in quad.nodes.iter().enumerate() {
                    dict.eval_into(x.as_slice(), &mut psi);
                    for k in 0..n {
                        den[(i, k)] = psi[k];
                        num[(i, n + k)] = psi[k];
                    }
                }
                let weights =
                    DVector::from_iterator(q, quad.weights.iter().map(|w| settings.r * w));
                program = program.with_perspective(num, den, weights)?;
            }
            CostForm::PaperDiag => {
                let mut num = DMatrix::zeros(n, 2 * n);
                let mut den = DMatrix::zeros(n, 2 * n);
                for j in 0..n {
                    den[(j, j)] = 1.0;
                    num[(j, n + j)] = 1.0;
                }
                let weights =
                    DVector::from_iterator(n, (0..n).map(|j| settings.r * cost.d_mat[(j, j)]));
                program = program.with_perspective(num, den, weights)?;
            }
        },
    }
    program.validate()?;
    Ok(OcpProblem {
        program,
        settings: *settings,
        basis_len: n,
        enforced_rows,
        m0: gen.m0.clone(),
        m1: gen.m1.clone(),
        m_vec: cost.m_vec.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySolution {
    #[serde(with = "dvec")]
    pub v: DVector<f64>,
    #[serde(with = "dvec")]
    pub w: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    /// `max |M0 v + M1 w + m|` over the enforced rows.
    pub eq_residual: f64,
    pub norm: Norm,
    pub cost_form: CostForm,
    pub r: f64,
    pub dictionary_ref: String,
    pub enforced_rows: Vec<usize>,
    pub kkt: KktResiduals,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl DensitySolution {
    /// Recompute the divergence-identity residual from the generators.
    pub fn replay_residual(
        &self,
        m0: &DMatrix<f64>,
        m1: &DMatrix<f64>,
        m_vec: &DVector<f64>,
    ) -> f64 {
        let lhs = m0 * &self.v + m1 * &self.w + m_vec;
        self.enforced_rows
            .iter()
            .map(|k| lhs[*k].abs())
            .fold(0.0, f64::max)
    }
}

pub const EQ_TOL: f64 = 1e-6;

pub fn solve_ocp(
    prob: &OcpProblem,
    opts: &SolverOptions,
    dictionary_ref: &str,
) -> Result<DensitySolution> {
    let res = solver::solve(&prob.program, opts)?;
    if res.status == SolveStatus::Infeasible {
        return Err(Error::Infeasible {
            certificate: res
                .certificate
                .unwrap_or_else(|| "phase 1 found no interior point".into()),
        });
    }
    let n = prob.basis_len;
    let v = res.z.rows(0, n).into_owned();
    let w = res.z.rows(n, n).into_owned();
    let mut sol = DensitySolution {
        v,
        w,
        objective: res.objective,
        status: res.status,
        eq_residual: 0.0,
        norm: prob.settings.norm,
        cost_form: prob.settings.cost_form,
        r: prob.settings.r,
        dictionary_ref: dictionary_ref.to_string(),
        enforced_rows: prob.enforced_rows.clone(),
        kkt: res.kkt,
        iterations: res.iterations,
        config_hash: None,
    };
    sol.eq_residual = sol.replay_residual(&prob.m0, &prob.m1, &prob.m_vec);
    if res.status == SolveStatus::MaxIter {
        if sol.eq_residual > EQ_TOL {
            return Err(Error::NotConverged {
                iterations: res.iterations,
                kkt: res.kkt,
            });
        }
        log::warn!(
            "OCP solve hit the iteration limit; keeping the feasible iterate ({})",
            res.kkt
        );
    }
    Ok(sol)
}

/// A state-feedback law `u = k(x)`.
pub trait FeedbackLaw: Send + Sync {
    fn control(&self, x: &DVector<f64>) -> f64;
}

impl<F: Fn(&DVector<f64>) -> f64 + Send + Sync> FeedbackLaw for F {
    fn control(&self, x: &DVector<f64>) -> f64 {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlForm {
    /// `Psi(x)^T (w / v)` with element-wise division.
    #[default]
    Elementwise,
    /// `(Psi(x)^T w) / (Psi(x)^T v)`.
    FieldRatio,
}

#[derive(Debug)]
pub struct GlobalController {
    dict: Arc<RbfDictionary>,
    pub v: DVector<f64>,
    pub w: DVector<f64>,
    pub ratio: DVector<f64>,
    pub floor_eps: f64,
    pub form: ControlForm,
    clamps: AtomicUsize,
}

impl Clone for GlobalController {
    fn clone(&self) -> Self {
        Self {
            dict: Arc::clone(&self.dict),
            v: self.v.clone(),
            w: self.w.clone(),
            ratio: self.ratio.clone(),
            floor_eps: self.floor_eps,
            form: self.form,
            clamps: AtomicUsize::new(self.clamp_count()),
        }
    }
}

pub const DEFAULT_FLOOR_REL: f64 = 1e-8;

pub fn recover_controller(
    sol: &DensitySolution,
    dict: Arc<RbfDictionary>,
) -> Result<GlobalController> {
    recover_controller_with(sol, dict, ControlForm::Elementwise, DEFAULT_FLOOR_REL)
}

pub fn recover_controller_with(
    sol: &DensitySolution,
    dict: Arc<RbfDictionary>,
    form: ControlForm,
    floor_rel: f64,
) -> Result<GlobalController> {
    if sol.v.len() != dict.len() || sol.w.len() != dict.len() {
        return Err(Error::dimension(
            "density coefficients",
            dict.len(),
            sol.v.len(),
        ));
    }
    let vmax = sol.v.max();
    if !(vmax > 0.0) {
        return Err(Error::DegenerateDensity(format!(
            "largest v coefficient is {vmax}"
        )));
    }
    let floor_eps = floor_rel * vmax;
    let ratio = DVector::from_iterator(
        sol.v.len(),
        sol.v
            .iter()
            .zip(sol.w.iter())
            .map(|(v, w)| w / v.max(floor_eps)),
    );
    Ok(GlobalController {
        dict,
        v: sol.v.clone(),
        w: sol.w.clone(),
        ratio,
        floor_eps,
        form,
        clamps: AtomicUsize::new(0),
    })
}

impl GlobalController {
    pub fn dictionary(&self) -> &RbfDictionary {
        &self.dict
    }

    /// Number of evaluations that clamped the state into the domain box.
    pub fn clamp_count(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }

    fn basis_at(&self, x: &DVector<f64>) -> DVector<f64> {
        let (xc, clamped) = self.dict.domain_box.clamp(x);
        if clamped {
            self.clamps.fetch_add(1, Ordering::Relaxed);
        }
        self.dict.eval(&xc)
    }

    /// `Psi(x)^T v`.
    pub fn density(&self, x: &DVector<f64>) -> f64 {
        self.basis_at(x).dot(&self.v)
    }

    pub fn control_and_density(&self, x: &DVector<f64>) -> (f64, f64) {
        let psi = self.basis_at(x);
        let rho = psi.dot(&self.v);
        let u = match self.form {
            ControlForm::Elementwise => psi.dot(&self.ratio),
            ControlForm::FieldRatio => psi.dot(&self.w) / rho.max(self.floor_eps),
        };
        (u, rho)
    }
}

impl FeedbackLaw for GlobalController {
    fn control(&self, x: &DVector<f64>) -> f64 {
        self.control_and_density(x).0
    }
}

/// Simulated closed loop: the trajectory (up to divergence) and its running cost.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub trajectory: Trajectory,
    /// Trapezoid integral of `q(x) + r u^2`; `None` when the loop diverged.
    pub cost: Option<f64>,
    pub diverged_at: Option<f64>,
}

pub fn simulate_closed_loop<L, Q>(
    system: &ControlAffineSystem,
    law: &L,
    x0: &DVector<f64>,
    q: &Q,
    r: f64,
    horizon: f64,
    dt: f64,
) -> Result<ClosedLoop>
where
    L: FeedbackLaw + ?Sized,
    Q: Fn(&DVector<f64>) -> f64 + ?Sized,
{
    if !(horizon > 0.0) {
        return Err(Error::invalid("horizon", "must be positive"));
    }
    let rk = Rk4::new(dt)?;
    let steps = (horizon / dt).round().max(1.0) as usize;
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
    };
    let mut x = x0.clone();
    let mut cost = 0.0;
    let mut prev_running = None;
    let control = |x: &DVector<f64>, _t: f64| law.control(x);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let norm = x.norm();
        if !(norm <= rk.divergence_bound) {
            return Ok(ClosedLoop {
                trajectory: traj,
                cost: None,
                diverged_at: Some(t),
            });
        }
        let u = law.control(&x);
        let running = q(&x) + r * u * u;
        if let Some(prev) = prev_running {
            cost += 0.5 * dt * (prev + running);
        }
        prev_running = Some(running);
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.inputs.push(u);
        if k < steps {
            x = rk.step(system, &x, t, &control);
        }
    }
    let cost = cost.is_finite().then_some(cost);
    let diverged_at = cost.is_none().then(|| traj.final_time());
    Ok(ClosedLoop {
        trajectory: traj,
        cost,
        diverged_at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// h0-weighted mean over the samples that stayed bounded.
    pub mean: f64,
    /// `None` marks a divergent sample.
    pub per_sample: Vec<Option<f64>>,
    pub divergent: usize,
}

/// Weighting of the initial conditions.
pub type ScalarFn = dyn Fn(&DVector<f64>) -> f64 + Sync;

#[allow(clippy::too_many_arguments)]
pub fn evaluate_cost<L, Q>(
    law: &L,
    system: &ControlAffineSystem,
    initial_samples: &[DVector<f64>],
    h0: Option<&ScalarFn>,
    q: &Q,
    r: f64,
    horizon: f64,
    dt: f64,
) -> Result<CostEstimate>
where
    L: FeedbackLaw + ?Sized,
    Q: Fn(&DVector<f64>) -> f64 + Sync + ?Sized,
{
    let runs = par_map(initial_samples, |x0| {
        simulate_closed_loop(system, law, x0, q, r, horizon, dt)
    });
    let mut per_sample = Vec::with_capacity(runs.len());
    let (mut total, mut weight) = (0.0, 0.0);
    for (x0, run) in initial_samples.iter().zip(runs) {
        let c = run?.cost;
        if let Some(c) = c {
            let wgt = h0.map_or(1.0, |h| h(x0));
            total += wgt * c;
            weight += wgt;
        }
        per_sample.push(c);
    }
    let divergent = per_sample.iter().filter(|c| c.is_none()).count();
    let mean = if weight > 0.0 { total / weight } else { 0.0 };
    Ok(CostEstimate {
        mean,
        per_sample,
        divergent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityOutcome {
    #[serde(with = "dvec")]
    pub x0: DVector<f64>,
    /// First time the state entered the ball of radius delta.
    pub entry_time: Option<f64>,
    pub stable: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub fraction: f64,
    pub outcomes: Vec<StabilityOutcome>,
}

/// Enters `B_delta` by the horizon and never leaves it afterwards.
pub fn settles_in_ball(traj: &Trajectory, delta: f64) -> (Option<f64>, bool) {
    let entry = traj.states.iter().position(|x| x.norm() <= delta);
    let last_outside = traj.states.iter().rposition(|x| x.norm() > delta);
    let stable = match (entry, last_outside) {
        (Some(_), None) => true,
        (Some(_), Some(j)) => j + 1 < traj.len(),
        (None, _) => false,
    };
    (entry.map(|i| traj.times[i]), stable)
}

pub fn stability_from<L: FeedbackLaw + ?Sized>(
    law: &L,
    system: &ControlAffineSystem,
    initial: &[DVector<f64>],
    horizon: f64,
    dt: f64,
    delta: f64,
) -> Result<StabilityReport> {
    let zero = |_: &DVector<f64>| 0.0;
    let runs = par_map(initial, |x0| {
        simulate_closed_loop(system, law, x0, &zero, 0.0, horizon, dt)
    });
    let mut outcomes = Vec::with_capacity(initial.len());
    for (x0, run) in initial.iter().zip(runs) {
        let run = run?;
        let diverged = run.diverged_at.is_some();
        let (entry_time, stable) = settles_in_ball(&run.trajectory, delta);
        outcomes.push(StabilityOutcome {
            x0: x0.clone(),
            entry_time,
            stable: stable && !diverged,
            diverged,
        });
    }
    let fraction = if outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().filter(|o| o.stable).count() as f64 / outcomes.len() as f64
    };
    Ok(StabilityReport { fraction, outcomes })
}

pub fn sample_initial_conditions(domain: &DomainBox, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| domain.sample(&mut rng)).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn empirical_stability<L: FeedbackLaw + ?Sized>(
    law: &L,
    system: &ControlAffineSystem,
    domain: &DomainBox,
    n_samples: usize,
    horizon: f64,
    dt: f64,
    delta: f64,
    seed: u64,
) -> Result<StabilityReport> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be at least 1"));
    }
    stability_from(
        law,
        system,
        &sample_initial_conditions(domain, n_samples, seed),
        horizon,
        dt,
        delta,
    )
}
