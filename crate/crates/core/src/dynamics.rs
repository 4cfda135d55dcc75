//! Benchmark control-affine systems, a fixed-step RK4 integrator and the
//! one-step snapshot generators used to fit transfer operators.
//!
//! Every system has the form `dx/dt = f(x) + g(x) u` with a scalar input.
//! Snapshot pairs `(x_i, y_i)` are produced by a single RK4 step of length
//! `dt` under a constant input (zero or unit step).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::DomainBox;
use crate::error::{Error, Result};

pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

pub const BUILTIN_SYSTEMS: [&str; 3] = ["scalar-cubic", "duffing", "vdp3d"];

/// Default escape radius for closed-loop simulations.
pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Clone)]
pub struct ControlAffineSystem {
    name: String,
    dim: usize,
    drift: VectorField,
    input_channel: VectorField,
    drift_divergence: Option<ScalarField>,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl ControlAffineSystem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        drift: VectorField,
        input_channel: VectorField,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            drift,
            input_channel,
            drift_divergence: None,
        }
    }

    /// Attach the closed-form divergence of the drift, used by generator checks.
    pub fn with_divergence(mut self, divergence: ScalarField) -> Self {
        self.drift_divergence = Some(divergence);
        self
    }

    /// `dx/dt = a x^3 + u`.
    pub fn scalar_cubic(a: f64) -> Self {
        Self::new(
            "scalar-cubic",
            1,
            Arc::new(move |x| DVector::from_element(1, a * x[0].powi(3))),
            Arc::new(|_| DVector::from_element(1, 1.0)),
        )
        .with_divergence(Arc::new(move |x| 3.0 * a * x[0] * x[0]))
    }

    /// `dx1/dt = x2`, `dx2/dt = -x1 - x1^3 - 0.5 x2 + u`.
    pub fn duffing() -> Self {
        Self::new(
            "duffing",
            2,
            Arc::new(|x| DVector::from_vec(vec![x[1], -x[0] - x[0].powi(3) - 0.5 * x[1]])),
            Arc::new(|_| DVector::from_vec(vec![0.0, 1.0])),
        )
        .with_divergence(Arc::new(|_| -0.5))
    }

    /// Controlled three-state Van der Pol type oscillator.
    pub fn vdp3d() -> Self {
        Self::new(
            "vdp3d",
            3,
            Arc::new(|x| {
                DVector::from_vec(vec![
                    x[1],
                    -x[0] + x[1] - x[2] - x[0] * x[0] * x[1],
                    x[2] - x[2] * x[2],
                ])
            }),
            Arc::new(|_| DVector::from_vec(vec![0.0, 0.0, 0.5])),
        )
        .with_divergence(Arc::new(|x| 1.0 - x[0] * x[0] + 1.0 - 2.0 * x[2]))
    }

    /// `dx/dt = -rate x + u` in every coordinate; the input enters the first one.
    pub fn linear_decay(dim: usize, rate: f64) -> Self {
        Self::new(
            "linear-decay",
            dim,
            Arc::new(move |x| -rate * x),
            Arc::new(move |_| {
                let mut g = DVector::zeros(dim);
                g[0] = 1.0;
                g
            }),
        )
        .with_divergence(Arc::new(move |_| -rate * dim as f64))
    }

    /// Same drift, input channel replaced by zero.
    pub fn without_input(&self) -> Self {
        let dim = self.dim;
        Self {
            name: format!("{}-uncontrolled", self.name),
            input_channel: Arc::new(move |_| DVector::zeros(dim)),
            ..self.clone()
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn input_channel(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.input_channel)(x)
    }

    pub fn vector_field(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        let mut dx = self.drift(x);
        if u != 0.0 {
            dx.axpy(u, &self.input_channel(x), 1.0);
        }
        dx
    }

    /// Divergence of the drift; central differences when no closed form was attached.
    pub fn drift_divergence(&self, x: &DVector<f64>) -> f64 {
        if let Some(div) = &self.drift_divergence {
            return div(x);
        }
        let jac = self.drift_jacobian(x);
        jac.trace()
    }

    pub fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim;
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (self.drift(&xp) - self.drift(&xm)) / (2.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }
}

pub fn builtin_system(name: &str) -> Result<ControlAffineSystem> {
    match name {
        "scalar-cubic" => Ok(ControlAffineSystem::scalar_cubic(0.5)),
        "duffing" => Ok(ControlAffineSystem::duffing()),
        "vdp3d" => Ok(ControlAffineSystem::vdp3d()),
        other => Err(Error::UnknownSystem {
            name: other.to_string(),
            valid: BUILTIN_SYSTEMS.to_vec(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds at least x0")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory holds at least t0")
    }
}

/// Classical fixed-step fourth-order Runge-Kutta on the closed loop.
#[derive(Debug, Clone, Copy)]
pub struct Rk4 {
    pub dt: f64,
    pub divergence_bound: f64,
}

impl Rk4 {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        Ok(Self {
            dt,
            divergence_bound: DEFAULT_DIVERGENCE_BOUND,
        })
    }

    pub fn with_divergence_bound(mut self, bound: f64) -> Self {
        self.divergence_bound = bound;
        self
    }

    pub fn step<C>(
        &self,
        sys: &ControlAffineSystem,
        x: &DVector<f64>,
        t: f64,
        control: &C,
    ) -> DVector<f64>
    where
        C: Fn(&DVector<f64>, f64) -> f64 + ?Sized,
    {
        let h = self.dt;
        let field = |x: &DVector<f64>, t: f64| sys.vector_field(x, control(x, t));
        let k1 = field(x, t);
        let k2 = field(&(x + &k1 * (0.5 * h)), t + 0.5 * h);
        let k3 = field(&(x + &k2 * (0.5 * h)), t + 0.5 * h);
        let k4 = field(&(x + &k3 * h), t + h);
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// One step under a constant input.
    pub fn step_constant(
        &self,
        sys: &ControlAffineSystem,
        x: &DVector<f64>,
        u: f64,
    ) -> DVector<f64> {
        self.step(sys, x, 0.0, &|_: &DVector<f64>, _: f64| u)
    }

    pub fn integrate<C>(
        &self,
        sys: &ControlAffineSystem,
        x0: &DVector<f64>,
        control: &C,
        t_final: f64,
    ) -> Result<Trajectory>
    where
        C: Fn(&DVector<f64>, f64) -> f64 + ?Sized,
    {
        if x0.len() != sys.dim() {
            return Err(Error::dimension("initial state", sys.dim(), x0.len()));
        }
        if !(t_final >= self.dt) {
            return Err(Error::invalid(
                "t_final",
                format!("must be at least dt = {}, got {t_final}", self.dt),
            ));
        }
        let steps = (t_final / self.dt).round().max(1.0) as usize;
        let mut times = Vec::with_capacity(steps + 1);
        let mut states = Vec::with_capacity(steps + 1);
        let mut inputs = Vec::with_capacity(steps + 1);
        let mut x = x0.clone();
        for k in 0..=steps {
            let t = k as f64 * self.dt;
            let norm = x.norm();
            if !norm.is_finite() || norm > self.divergence_bound {
                return Err(Error::Divergence { time: t, norm });
            }
            inputs.push(control(&x, t));
            times.push(t);
            states.push(x.clone());
            if k < steps {
                x = self.step(sys, &x, t, control);
            }
        }
        Ok(Trajectory {
            times,
            states,
            inputs,
        })
    }
}

pub fn integrate<C>(
    system: &ControlAffineSystem,
    x0: &DVector<f64>,
    control: &C,
    t_final: f64,
    dt: f64,
) -> Result<Trajectory>
where
    C: Fn(&DVector<f64>, f64) -> f64 + ?Sized,
{
    Rk4::new(dt)?.integrate(system, x0, control, t_final)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputLabel {
    Zero,
    Step,
    /// Leading block under zero input followed by a unit-step block.
    Mixed,
}

impl InputLabel {
    pub fn constant_input(self) -> Option<f64> {
        match self {
            InputLabel::Zero => Some(0.0),
            InputLabel::Step => Some(1.0),
            InputLabel::Mixed => None,
        }
    }
}

/// Paired one-step snapshots `y_i = s_dt(x_i)` under the recorded inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub x_points: Vec<DVector<f64>>,
    pub y_points: Vec<DVector<f64>>,
    /// Input applied over each step; all 0 or all 1 unless the label is `Mixed`.
    pub inputs: Vec<f64>,
    pub dt: f64,
    pub input_label: InputLabel,
    pub domain_box: DomainBox,
    pub seed: u64,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.x_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain_box.dim()
    }

    /// Number of leading zero-input pairs.
    pub fn zero_input_count(&self) -> usize {
        self.inputs.iter().take_while(|u| **u == 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_points.is_empty() {
            return Err(Error::invalid("snapshots", "at least one pair is required"));
        }
        if self.x_points.len() != self.y_points.len() || self.inputs.len() != self.x_points.len() {
            return Err(Error::dimension(
                "snapshot pairs",
                self.x_points.len(),
                self.y_points.len().min(self.inputs.len()),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        let n = self.dim();
        for (i, (x, y)) in self.x_points.iter().zip(&self.y_points).enumerate() {
            if x.len() != n || y.len() != n {
                return Err(Error::dimension(
                    format!("snapshot {i}"),
                    n,
                    x.len().max(y.len()),
                ));
            }
            if !self.domain_box.contains(x) {
                return Err(Error::invalid(
                    format!("x_points[{i}]"),
                    "lies outside the domain box",
                ));
            }
        }
        Ok(())
    }
}

/// Uniform i.i.d. initial conditions in the box, each advanced by one RK4 step.
pub fn generate_snapshots(
    system: &ControlAffineSystem,
    domain_box: &DomainBox,
    count: usize,
    dt: f64,
    input_label: InputLabel,
    seed: u64,
) -> Result<SnapshotSet> {
    let domain_box = DomainBox::new(domain_box.bounds.clone())?;
    if domain_box.dim() != system.dim() {
        return Err(Error::dimension(
            "domain box",
            system.dim(),
            domain_box.dim(),
        ));
    }
    if count == 0 {
        return Err(Error::invalid("M", "at least one snapshot is required"));
    }
    let u = input_label
        .constant_input()
        .ok_or_else(|| Error::invalid("input_label", "mixed labels come from local snapshots"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<_> = (0..count).map(|_| domain_box.sample(&mut rng)).collect();
    snapshots_at(system, xs, dt, input_label, domain_box, seed).map(|mut s| {
        s.inputs = vec![u; count];
        s
    })
}

/// Advance caller-chosen points, e.g. to share x-locations between the zero
/// and step datasets.
pub fn snapshots_at(
    system: &ControlAffineSystem,
    x_points: Vec<DVector<f64>>,
    dt: f64,
    input_label: InputLabel,
    domain_box: DomainBox,
    seed: u64,
) -> Result<SnapshotSet> {
    let rk = Rk4::new(dt)?;
    let u = input_label
        .constant_input()
        .ok_or_else(|| Error::invalid("input_label", "expected zero or step"))?;
    let y_points = x_points
        .iter()
        .map(|x| rk.step_constant(system, x, u))
        .collect();
    let set = SnapshotSet {
        inputs: vec![u; x_points.len()],
        x_points,
        y_points,
        dt,
        input_label,
        domain_box,
        seed,
    };
    set.validate()?;
    Ok(set)
}

/// Pairs sampled uniformly in the ball of `radius` about the origin: the first
/// `zero_count` under zero input and the rest under a unit step.
pub fn generate_local_snapshots(
    system: &ControlAffineSystem,
    radius: f64,
    count: usize,
    zero_count: usize,
    dt: f64,
    seed: u64,
) -> Result<SnapshotSet> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(
            "radius",
            format!("must be positive, got {radius}"),
        ));
    }
    if zero_count == 0 || zero_count >= count {
        return Err(Error::invalid(
            "L",
            format!("need 0 < L < M, got L = {zero_count}, M = {count}"),
        ));
    }
    let n = system.dim();
    let rk = Rk4::new(dt)?;
    let bounding = DomainBox::symmetric(n, radius)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_points = Vec::with_capacity(count);
    while x_points.len() < count {
        let x = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-radius..radius)));
        if x.norm() < radius {
            x_points.push(x);
        }
    }
    let inputs: Vec<f64> = (0..count)
        .map(|i| if i < zero_count { 0.0 } else { 1.0 })
        .collect();
    let y_points = x_points
        .iter()
        .zip(&inputs)
        .map(|(x, u)| rk.step_constant(system, x, *u))
        .collect();
    let set = SnapshotSet {
        x_points,
        y_points,
        inputs,
        dt,
        input_label: InputLabel::Mixed,
        domain_box: bounding,
        seed,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn builtin_coefficients() {
        let cubic = builtin_system("scalar-cubic").unwrap();
        assert_abs_diff_eq!(cubic.drift(&DVector::from_element(1, 2.0))[0], 4.0);
        let duffing = builtin_system("duffing").unwrap();
        assert_eq!(duffing.drift(&DVector::zeros(2)), DVector::zeros(2));
        let vdp = builtin_system("vdp3d").unwrap();
        let g = vdp.input_channel(&DVector::from_vec(vec![0.3, -0.2, 0.7]));
        assert_eq!(g.as_slice(), &[0.0, 0.0, 0.5]);
    }

    #[test]
    fn unknown_system_lists_valid_names() {
        let err = builtin_system("lorenz").unwrap_err().to_string();
        for name in BUILTIN_SYSTEMS {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn builtin_drifts_vanish_at_origin() {
        for name in BUILTIN_SYSTEMS {
            let sys = builtin_system(name).unwrap();
            assert_eq!(sys.drift(&DVector::zeros(sys.dim())).norm(), 0.0, "{name}");
        }
    }

    #[test]
    fn closed_form_divergence_matches_differences() {
        let x = DVector::from_vec(vec![0.4, -0.3, 0.2]);
        let vdp = ControlAffineSystem::vdp3d();
        let fd = vdp.drift_jacobian(&x).trace();
        assert_abs_diff_eq!(vdp.drift_divergence(&x), fd, epsilon = 1e-6);
    }

    #[test]
    fn equilibrium_stays_put() {
        let sys = ControlAffineSystem::scalar_cubic(0.5);
        let traj = integrate(
            &sys,
            &DVector::zeros(1),
            &|_: &DVector<f64>, _: f64| 0.0,
            3.0,
            0.01,
        )
        .unwrap();
        assert!(traj.states.iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn linear_flow_matches_exponential() {
        let sys = ControlAffineSystem::linear_decay(1, 1.0);
        let traj = integrate(
            &sys,
            &DVector::from_element(1, 1.0),
            &|_: &DVector<f64>, _: f64| 0.0,
            1.0,
            0.01,
        )
        .unwrap();
        assert_abs_diff_eq!(traj.final_state()[0], (-1.0f64).exp(), epsilon = 1e-6);
        assert!((traj.final_time() - 1.0).abs() <= 0.01);
    }

    #[test]
    fn divergence_is_reported_with_time() {
        let sys = ControlAffineSystem::scalar_cubic(0.5);
        let err = integrate(
            &sys,
            &DVector::from_element(1, 3.0),
            &|_: &DVector<f64>, _: f64| 0.0,
            5.0,
            0.001,
        )
        .unwrap_err();
        match err {
            // x' = a x^3 from x0 blows up at 1/(2 a x0^2) = 1/9
            Error::Divergence { time, .. } => assert!(time > 0.105 && time < 0.113, "{time}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let sys = ControlAffineSystem::duffing();
        let zero = |_: &DVector<f64>, _: f64| 0.0;
        assert!(integrate(&sys, &DVector::zeros(2), &zero, 1.0, 0.0).is_err());
        assert!(integrate(&sys, &DVector::zeros(2), &zero, 0.001, 0.01).is_err());
        assert!(integrate(&sys, &DVector::zeros(3), &zero, 1.0, 0.01).is_err());
        let degenerate = DomainBox {
            bounds: vec![[1.0, 1.0], [0.0, 1.0]],
        };
        assert!(generate_snapshots(&sys, &degenerate, 10, 0.01, InputLabel::Zero, 0).is_err());
        assert!(generate_local_snapshots(&sys, 0.1, 10, 10, 0.01, 0).is_err());
        assert!(generate_local_snapshots(&sys, 0.0, 10, 5, 0.01, 0).is_err());
    }

    #[test]
    fn local_snapshots_split_inputs() {
        let sys = ControlAffineSystem::scalar_cubic(0.5);
        let set = generate_local_snapshots(&sys, 0.05, 40, 20, 0.01, 3).unwrap();
        assert_eq!(set.zero_input_count(), 20);
        assert_eq!(set.inputs.iter().filter(|u| **u == 1.0).count(), 20);
        for ((x, y), u) in set.x_points.iter().zip(&set.y_points).zip(&set.inputs) {
            assert!(x.norm() < 0.05);
            let predicted = 0.01 * (0.5 * x[0].powi(3) + u);
            assert_abs_diff_eq!(y[0] - x[0], predicted, epsilon = 1e-6);
        }
    }
}
