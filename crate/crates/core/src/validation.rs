//! Closed-form oracles and consistency checks against the data-driven pipeline.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{lambda_matrix, LambdaForm, QuadratureRule, RbfDictionary};
use crate::dynamics::{ControlAffineSystem, Trajectory};
use crate::error::Result;
use crate::io::write_bytes;
use crate::ocp::{simulate_closed_loop, FeedbackLaw};
use crate::parallel::par_map;

/// Optimal control of `x' = a x^3 + u` with running cost `x^2 + u^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticOracle {
    pub a: f64,
}

pub fn scalar_oracle(a: f64) -> AnalyticOracle {
    AnalyticOracle { a }
}

impl AnalyticOracle {
    pub fn system_name(&self) -> &'static str {
        "scalar-cubic"
    }

    /// `u*(x) = -a x^3 - x sqrt(a^2 x^4 + 1)`.
    pub fn optimal_control(&self, x: f64) -> f64 {
        let a = self.a;
        -a * x.powi(3) - x * (a * a * x.powi(4) + 1.0).sqrt()
    }

    /// `V'(x) = 2 a x^3 + 2 x sqrt(a^2 x^4 + 1)`, so that `u* = -V'/2`.
    pub fn value_derivative(&self, x: f64) -> f64 {
        -2.0 * self.optimal_control(x)
    }

    /// `V(x) = a x^4 / 2 + x^2 sqrt(a^2 x^4 + 1) / 2 + asinh(a x^2) / (2a)`, `V(0) = 0`.
    pub fn value_function(&self, x: f64) -> f64 {
        let a = self.a;
        let x2 = x * x;
        let s = (a * a * x2 * x2 + 1.0).sqrt();
        let tail = if a == 0.0 {
            x2 / 2.0
        } else {
            (a * x2).asinh() / (2.0 * a)
        };
        a * x2 * x2 / 2.0 + x2 * s / 2.0 + tail
    }

    /// `x^2 + u*^2 + V'(x) (a x^3 + u*)`, zero for the exact solution.
    pub fn hjb_residual(&self, x: f64) -> f64 {
        let u = self.optimal_control(x);
        x * x + u * u + self.value_derivative(x) * (self.a * x.powi(3) + u)
    }
}

impl FeedbackLaw for AnalyticOracle {
    fn control(&self, x: &DVector<f64>) -> f64 {
        self.optimal_control(x[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub x0: f64,
    /// `None` when the loop diverged.
    pub cost_analytic: Option<f64>,
    pub cost_datadriven: Option<f64>,
    pub cost_ratio: Option<f64>,
    pub sup_state_gap: Option<f64>,
    pub analytic_diverged: bool,
    pub datadriven_diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    /// Sum of data-driven costs over the sum of analytic costs.
    pub cost_ratio: Option<f64>,
    pub min_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
    pub max_gap: Option<f64>,
    pub horizon: f64,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonRun {
    pub report: ComparisonReport,
    pub analytic: Vec<Trajectory>,
    pub datadriven: Vec<Trajectory>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 && num == 0.0 {
        1.0
    } else {
        num / den
    }
}

pub fn compare_scalar<L: FeedbackLaw + ?Sized>(
    law: &L,
    oracle: &AnalyticOracle,
    system: &ControlAffineSystem,
    x0_set: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<ComparisonRun> {
    if system.dim() != 1 {
        return Err(crate::error::Error::dimension(
            "compare_scalar system",
            1,
            system.dim(),
        ));
    }
    let q = |x: &DVector<f64>| x.norm_squared();
    let runs = par_map(x0_set, |x0| {
        let start = DVector::from_element(1, *x0);
        let an = simulate_closed_loop(system, oracle, &start, &q, 1.0, horizon, dt)?;
        let dd = simulate_closed_loop(system, law, &start, &q, 1.0, horizon, dt)?;
        Ok::<_, crate::error::Error>((an, dd))
    });
    let mut rows = Vec::with_capacity(x0_set.len());
    let mut analytic = Vec::with_capacity(x0_set.len());
    let mut datadriven = Vec::with_capacity(x0_set.len());
    for (x0, run) in x0_set.iter().zip(runs) {
        let (an, dd) = run?;
        let analytic_diverged = an.diverged_at.is_some();
        let datadriven_diverged = dd.diverged_at.is_some();
        let sup_state_gap = (!analytic_diverged && !datadriven_diverged).then(|| {
            an.trajectory
                .states
                .iter()
                .zip(&dd.trajectory.states)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0, f64::max)
        });
        let cost_ratio = match (an.cost, dd.cost) {
            (Some(a), Some(d)) => Some(ratio(d, a)),
            _ => None,
        };
        rows.push(ComparisonRow {
            x0: *x0,
            cost_analytic: an.cost,
            cost_datadriven: dd.cost,
            cost_ratio,
            sup_state_gap,
            analytic_diverged,
            datadriven_diverged,
        });
        analytic.push(an.trajectory);
        datadriven.push(dd.trajectory);
    }
    let all_ok = rows.iter().all(|r| r.cost_ratio.is_some());
    let (cost_ratio, min_ratio, max_ratio, max_gap) = if all_ok && !rows.is_empty() {
        let sa: f64 = rows.iter().filter_map(|r| r.cost_analytic).sum();
        let sd: f64 = rows.iter().filter_map(|r| r.cost_datadriven).sum();
        let ratios = rows.iter().filter_map(|r| r.cost_ratio);
        (
            Some(ratio(sd, sa)),
            Some(ratios.clone().fold(f64::INFINITY, f64::min)),
            Some(ratios.fold(f64::NEG_INFINITY, f64::max)),
            Some(
                rows.iter()
                    .filter_map(|r| r.sup_state_gap)
                    .fold(0.0, f64::max),
            ),
        )
    } else {
        (None, None, None, None)
    };
    let report = ComparisonReport {
        rows,
        cost_ratio,
        min_ratio,
        max_ratio,
        max_gap,
        horizon,
        dt,
    };
    Ok(ComparisonRun {
        report,
        analytic,
        datadriven,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

/// `summary.csv` with one row per x0 and `traj_<i>.csv` with both closed loops.
pub fn write_comparison_csvs(dir: &Path, run: &ComparisonRun) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "x0",
        "cost_analytic",
        "cost_datadriven",
        "cost_ratio",
        "sup_state_gap",
    ])?;
    for r in &run.report.rows {
        wtr.write_record([
            format!("{:?}", r.x0),
            opt(r.cost_analytic),
            opt(r.cost_datadriven),
            opt(r.cost_ratio),
            opt(r.sup_state_gap),
        ])?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| crate::error::Error::io(dir, e.into_error()))?;
    write_bytes(&dir.join("summary.csv"), &bytes)?;
    for (i, (an, dd)) in run.analytic.iter().zip(&run.datadriven).enumerate() {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record([
            "t",
            "x_analytic",
            "u_analytic",
            "x_datadriven",
            "u_datadriven",
        ])?;
        for k in 0..an.len().max(dd.len()) {
            let t = an
                .times
                .get(k)
                .or(dd.times.get(k))
                .copied()
                .unwrap_or_default();
            wtr.write_record([
                format!("{t:?}"),
                opt(an.states.get(k).map(|x| x[0])),
                opt(an.inputs.get(k).copied()),
                opt(dd.states.get(k).map(|x| x[0])),
                opt(dd.inputs.get(k).copied()),
            ])?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| crate::error::Error::io(dir, e.into_error()))?;
        write_bytes(&dir.join(format!("traj_{i:03}.csv")), &bytes)?;
    }
    Ok(())
}

/// `-div(f psi_k)(x) = -(div f) psi_k + (f . (x - c_k)) psi_k / sigma^2`.
pub fn analytic_generator(
    system: &ControlAffineSystem,
    dict: &RbfDictionary,
    x: &DVector<f64>,
    k: usize,
) -> f64 {
    let f = system.drift(x);
    let c = dict.center(k);
    let psi = (-(x - &c).norm_squared() / (2.0 * dict.sigma * dict.sigma)).exp();
    -system.drift_divergence(x) * psi + f.dot(&(x - c)) * psi / (dict.sigma * dict.sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheck {
    pub max_relative_error: f64,
    /// `None` for basis functions excluded from the comparison.
    pub per_basis: Vec<Option<f64>>,
}

/// Relative L2 error over `grid` between `Psi^T (M0 e_k)` and the analytic
/// generator, for every basis function whose mass inside the box is at least
/// `1e-3` of its total and, with `interior_only`, whose centre is off the box faces.
pub fn generator_check(
    m0: &DMatrix<f64>,
    system: &ControlAffineSystem,
    dict: &RbfDictionary,
    grid: &[DVector<f64>],
    interior_only: bool,
) -> GeneratorCheck {
    let n = dict.len();
    let psi_grid: Vec<DVector<f64>> = grid.iter().map(|x| dict.eval(x)).collect();
    let bx = &dict.domain_box;
    let mut per_basis = Vec::with_capacity(n);
    for k in 0..n {
        let c = dict.center(k);
        let on_face = (0..bx.dim()).any(|i| {
            let tol = 1e-9 * bx.width(i);
            (c[i] - bx.lo(i)).abs() < tol || (c[i] - bx.hi(i)).abs() < tol
        });
        let mass_inside: f64 = (0..bx.dim())
            .map(|i| {
                let s = dict.sigma * std::f64::consts::SQRT_2;
                0.5 * (erf((bx.hi(i) - c[i]) / s) - erf((bx.lo(i) - c[i]) / s))
            })
            .product();
        if mass_inside < 1e-3 || (interior_only && on_face) {
            per_basis.push(None);
            continue;
        }
        let col = m0.column(k);
        let (mut num, mut den) = (0.0, 0.0);
        for (x, psi) in grid.iter().zip(&psi_grid) {
            let approx = psi.dot(&col);
            let exact = analytic_generator(system, dict, x, k);
            num += (approx - exact).powi(2);
            den += exact * exact;
        }
        per_basis.push(Some(if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        }));
    }
    let max_relative_error = per_basis.iter().flatten().copied().fold(0.0, f64::max);
    GeneratorCheck {
        max_relative_error,
        per_basis,
    }
}

/// Abramowitz-Stegun 7.1.26, absolute error below 1.5e-7.
fn erf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736
                + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let y = 1.0 - poly * (-x * x).exp();
    if x >= 0.0 {
        y
    } else {
        -y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaConsistency {
    /// Worst relative deviation of the checked form from quadrature over interior pairs.
    pub max_relative_deviation: f64,
    pub pairs_checked: usize,
}

/// Compare `lambda_matrix(dict, form)` entrywise with a quadrature of
/// `psi_i psi_j`, over pairs whose centres are at least `4 sigma` inside the box.
pub fn lambda_consistency(
    dict: &RbfDictionary,
    form: LambdaForm,
    quad: &QuadratureRule,
) -> LambdaConsistency {
    lambda_consistency_of(dict, &lambda_matrix(dict, form), quad)
}

pub fn lambda_consistency_of(
    dict: &RbfDictionary,
    lambda: &DMatrix<f64>,
    quad: &QuadratureRule,
) -> LambdaConsistency {
    let n = dict.len();
    let bx = &dict.domain_box;
    let margin = 4.0 * dict.sigma;
    let interior: Vec<usize> = (0..n)
        .filter(|k| {
            let c = dict.center(*k);
            (0..bx.dim())
                .all(|i| c[i] - bx.lo(i) >= margin - 1e-12 && bx.hi(i) - c[i] >= margin - 1e-12)
        })
        .collect();
    let mut numeric = DMatrix::<f64>::zeros(n, n);
    let mut psi = vec![0.0; n];
    for (x, w) in quad.nodes.iter().zip(&quad.weights) {
        dict.eval_into(x.as_slice(), &mut psi);
        for &i in &interior {
            for &j in &interior {
                numeric[(i, j)] += w * psi[i] * psi[j];
            }
        }
    }
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for &i in &interior {
        for &j in &interior {
            // Entries below 1e-6 of the diagonal are dominated by quadrature noise.
            if numeric[(i, j)] < 1e-6 * numeric[(i, i)] {
                continue;
            }
            worst = worst.max(((lambda[(i, j)] - numeric[(i, j)]) / numeric[(i, j)]).abs());
            pairs += 1;
        }
    }
    LambdaConsistency {
        max_relative_deviation: worst,
        pairs_checked: pairs,
    }
}
