//! Experiment configuration and the file-backed pipeline stages behind the CLI.
//!
//! Layout under `output_dir`:
//! `data/{zero,step,local}.csv`, `operators/` (dictionary, generators, cost
//! data), `solution/` (density solution, local and blended controllers),
//! `simulate/` and `compare/`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dictionary::{
    build_dictionary, build_quadrature, cost_data, lambda_matrix, CostData, LambdaForm, MChoice,
    QuadratureRule, RbfDictionary, Width,
};
use crate::domain::DomainBox;
use crate::dynamics::{
    builtin_system, generate_local_snapshots, generate_snapshots, snapshots_at,
    ControlAffineSystem, InputLabel, Rk4, SnapshotSet,
};
use crate::error::{Error, Result};
use crate::io::{self, MatrixEntry};
use crate::local_control::{
    identify_local, lqr_local, BlendedController, BlendedManifest, LocalController,
};
use crate::ocp::{
    assemble_and_solve, recover_controller_with, sample_initial_conditions, settles_in_ball,
    simulate_closed_loop, ControlForm, CostForm, DensitySolution, Norm, OcpSettings, RowSelection,
    DEFAULT_FLOOR_REL, EQ_TOL,
};
use crate::operators::{
    column_sum_max, edmd_matrices, generator_pair, nsdmd_fit, row_sum_deviation, save_zero_fit,
    GeneratorManifest, GeneratorPair, GENERATOR_MANIFEST,
};
use crate::parallel::par_map;
use crate::solver::SolverOptions;
use crate::validation::{
    compare_scalar, lambda_consistency_of, scalar_oracle, write_comparison_csvs, ComparisonReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryConfig {
    pub per_dim_counts: Vec<usize>,
    /// Absolute width; takes precedence over `sigma_factor`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_factor: Option<f64>,
    pub delta: f64,
    #[serde(default)]
    pub lambda_form: LambdaForm,
}

impl DictionaryConfig {
    pub fn width(&self) -> Width {
        match (self.sigma, self.sigma_factor) {
            (Some(s), _) => Width::Absolute(s),
            (None, Some(f)) => Width::Factor(f),
            (None, None) => Width::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "M_local")]
    pub m_local: usize,
    #[serde(rename = "L_local")]
    pub l_local: usize,
    /// Defaults to the dictionary's delta.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_radius: Option<f64>,
    pub dt: f64,
    pub seed: u64,
    /// Reuse the zero-input sample locations for the step-input data. With
    /// independent samples `M1 = (P1 - P0)/dt` is dominated by sampling noise.
    #[serde(default = "default_true")]
    pub share_points: bool,
}

/// State cost `q(x) = sum_i w_i x_i^2` (unit weights by default) or zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum QSpec {
    Quadratic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    Zero,
}

impl Default for QSpec {
    fn default() -> Self {
        QSpec::Quadratic { weights: None }
    }
}

impl QSpec {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            QSpec::Zero => 0.0,
            QSpec::Quadratic { weights: None } => x.norm_squared(),
            QSpec::Quadratic { weights: Some(w) } => {
                x.iter().zip(w).map(|(xi, wi)| wi * xi * xi).sum()
            }
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_nodes() -> usize {
    40
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR_REL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpConfig {
    pub r: f64,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub cost_form: CostForm,
    #[serde(default)]
    pub rows: RowSelection,
    #[serde(default)]
    pub q: QSpec,
    /// Per-dimension nodes of the rule used for `d`, `D`, `c` and the perspective cost.
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
    #[serde(default)]
    pub control_form: ControlForm,
    #[serde(default = "default_floor")]
    pub floor_rel: f64,
}

impl OcpConfig {
    pub fn settings(&self) -> OcpSettings {
        OcpSettings {
            r: self.r,
            norm: self.norm,
            cost_form: self.cost_form,
            rows: self.rows,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    /// Defaults to the identity.
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    /// Defaults to the dictionary's delta.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Defaults to `ocp.r`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Explicit initial conditions; otherwise `samples` uniform draws from `sample_box`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Defaults to the domain box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_box: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub seed: u64,
    /// Radius of the ball a stable trajectory must settle in; defaults to delta.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ball_radius: Option<f64>,
    #[serde(default)]
    pub stability_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub ratio_range: [f64; 2],
    pub max_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub system: String,
    pub domain_box: Vec<[f64; 2]>,
    pub dictionary: DictionaryConfig,
    pub data: DataConfig,
    pub ocp: OcpConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub local: LocalConfig,
    pub simulate: SimulateConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
    pub output_dir: PathBuf,
}

fn check(cond: bool, field: &str, reason: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(field, reason))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `dotted.path=value` overrides (value parsed as JSON, else taken as
    /// a string) on top of the file contents, then validate.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value = io::read_json(path)?;
        for ov in overrides {
            let (key, raw) = ov.split_once('=').ok_or_else(|| {
                Error::invalid("override", format!("`{ov}` is not of the form key=value"))
            })?;
            let parsed = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| Error::invalid(key, "path does not lead through objects"))?;
                slot = obj
                    .entry(part.to_string())
                    .or_insert(serde_json::Value::Null);
            }
            *slot = parsed;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sys = builtin_system(&self.system)?;
        let bx = DomainBox::new(self.domain_box.clone())?;
        let n = sys.dim();
        check(
            bx.dim() == n,
            "domain_box",
            format!("{} needs {n} dimensions, got {}", self.system, bx.dim()),
        )?;

        let d = &self.dictionary;
        check(
            d.per_dim_counts.len() == n,
            "dictionary.per_dim_counts",
            format!("needs {n} entries"),
        )?;
        for (i, c) in d.per_dim_counts.iter().enumerate() {
            check(
                *c >= 2,
                &format!("dictionary.per_dim_counts[{i}]"),
                "must be at least 2",
            )?;
        }
        if let Some(s) = d.sigma {
            check(positive(s), "dictionary.sigma", "must be positive")?;
        }
        if let Some(f) = d.sigma_factor {
            check(positive(f), "dictionary.sigma_factor", "must be positive")?;
        }
        check(
            d.delta > 0.0 && d.delta < bx.max_corner_norm(),
            "dictionary.delta",
            "must be positive and leave part of the box",
        )?;

        let data = &self.data;
        check(data.m >= 1, "data.M", "must be at least 1")?;
        check(
            data.l_local > 0 && data.l_local < data.m_local,
            "data.L_local",
            "need 0 < L_local < M_local",
        )?;
        check(positive(data.dt), "data.dt", "must be positive")?;
        if let Some(r) = data.local_radius {
            check(positive(r), "data.local_radius", "must be positive")?;
        }

        let o = &self.ocp;
        check(positive(o.r), "ocp.r", "must be positive")?;
        check(
            o.quadrature_nodes >= 2,
            "ocp.quadrature_nodes",
            "must be at least 2",
        )?;
        check(
            o.floor_rel > 0.0 && o.floor_rel < 1.0,
            "ocp.floor_rel",
            "must lie in (0, 1)",
        )?;
        if let QSpec::Quadratic { weights: Some(w) } = &o.q {
            check(w.len() == n, "ocp.q.weights", format!("needs {n} entries"))?;
            check(
                w.iter().all(|v| *v >= 0.0 && v.is_finite()),
                "ocp.q.weights",
                "must be nonnegative",
            )?;
        }
        self.solver.validate()?;

        if let Some(q) = &self.local.q {
            check(
                q.len() == n && q.iter().all(|r| r.len() == n),
                "local.Q",
                format!("must be {n}x{n}"),
            )?;
        }
        if let Some(g) = self.local.gamma {
            check(positive(g), "local.gamma", "must be positive")?;
        }
        if let Some(r) = self.local.r {
            check(positive(r), "local.r", "must be positive")?;
        }

        let s = &self.simulate;
        check(positive(s.horizon), "simulate.horizon", "must be positive")?;
        check(
            positive(s.dt) && s.dt <= s.horizon,
            "simulate.dt",
            "must be positive and at most the horizon",
        )?;
        match (&s.x0, s.samples) {
            (Some(x0), _) => {
                for (i, x) in x0.iter().enumerate() {
                    check(
                        x.len() == n,
                        &format!("simulate.x0[{i}]"),
                        format!("needs {n} entries"),
                    )?;
                }
            }
            (None, Some(k)) => check(k >= 1, "simulate.samples", "must be at least 1")?,
            (None, None) => return Err(Error::invalid("simulate", "set either x0 or samples")),
        }
        if let Some(sb) = &s.sample_box {
            let sb = DomainBox::new(sb.clone())?;
            check(
                sb.dim() == n,
                "simulate.sample_box",
                format!("needs {n} dimensions"),
            )?;
        }
        check(
            (0.0..=1.0).contains(&s.stability_threshold),
            "simulate.stability_threshold",
            "must lie in [0, 1]",
        )?;
        if let Some(r) = s.ball_radius {
            check(positive(r), "simulate.ball_radius", "must be positive")?;
        }
        if let Some(c) = &self.compare {
            check(n == 1, "compare", "only defined for the scalar system")?;
            check(
                positive(c.horizon) && positive(c.dt) && c.dt <= c.horizon,
                "compare.dt",
                "need 0 < dt <= horizon",
            )?;
            check(
                c.ratio_range[0] <= c.ratio_range[1],
                "compare.ratio_range",
                "lower bound exceeds upper bound",
            )?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn system(&self) -> Result<ControlAffineSystem> {
        builtin_system(&self.system)
    }

    pub fn domain(&self) -> Result<DomainBox> {
        DomainBox::new(self.domain_box.clone())
    }

    pub fn paths(&self) -> Paths {
        Paths::new(&self.output_dir)
    }

    pub fn dictionary(&self) -> Result<RbfDictionary> {
        build_dictionary(
            &self.domain()?,
            &self.dictionary.per_dim_counts,
            self.dictionary.width(),
            self.dictionary.delta,
        )
    }

    pub fn initial_conditions(&self) -> Result<Vec<DVector<f64>>> {
        let s = &self.simulate;
        if let Some(x0) = &s.x0 {
            return Ok(x0.iter().map(|x| DVector::from_column_slice(x)).collect());
        }
        let bx = match &s.sample_box {
            Some(b) => DomainBox::new(b.clone())?,
            None => self.domain()?,
        };
        Ok(sample_initial_conditions(
            &bx,
            s.samples.unwrap_or(1),
            s.seed,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub data: PathBuf,
    pub operators: PathBuf,
    pub solution: PathBuf,
    pub simulate: PathBuf,
    pub compare: PathBuf,
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Self {
        Self {
            data: root.join("data"),
            operators: root.join("operators"),
            solution: root.join("solution"),
            simulate: root.join("simulate"),
            compare: root.join("compare"),
            root: root.to_path_buf(),
        }
    }

    pub fn zero_data(&self) -> PathBuf {
        self.data.join("zero.csv")
    }

    pub fn step_data(&self) -> PathBuf {
        self.data.join("step.csv")
    }

    pub fn local_data(&self) -> PathBuf {
        self.data.join("local.csv")
    }

    pub fn dictionary(&self) -> PathBuf {
        self.operators.join("dictionary.json")
    }

    pub fn cost(&self) -> PathBuf {
        self.operators.join("cost.json")
    }

    pub fn density_solution(&self) -> PathBuf {
        self.solution.join("density_solution.json")
    }

    pub fn local_controller(&self) -> PathBuf {
        self.solution.join("local_controller.json")
    }

    pub fn blended(&self) -> PathBuf {
        self.solution.join("blended_controller.json")
    }
}

pub fn gen_data(cfg: &PipelineConfig) -> Result<(SnapshotSet, SnapshotSet, SnapshotSet)> {
    let sys = cfg.system()?;
    let bx = cfg.domain()?;
    let d = &cfg.data;
    let hash = cfg.hash();
    let zero = generate_snapshots(&sys, &bx, d.m, d.dt, InputLabel::Zero, d.seed)?;
    let step = if d.share_points {
        snapshots_at(
            &sys,
            zero.x_points.clone(),
            d.dt,
            InputLabel::Step,
            bx.clone(),
            d.seed,
        )?
    } else {
        generate_snapshots(
            &sys,
            &bx,
            d.m,
            d.dt,
            InputLabel::Step,
            d.seed.wrapping_add(1),
        )?
    };
    let radius = d.local_radius.unwrap_or(cfg.dictionary.delta);
    let local = generate_local_snapshots(
        &sys,
        radius,
        d.m_local,
        d.l_local,
        d.dt,
        d.seed.wrapping_add(2),
    )?;
    let paths = cfg.paths();
    io::write_snapshots(&paths.zero_data(), &zero, Some(&hash))?;
    io::write_snapshots(&paths.step_data(), &step, Some(&hash))?;
    io::write_snapshots(&paths.local_data(), &local, Some(&hash))?;
    Ok((zero, step, local))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryFile {
    #[serde(flatten)]
    pub dictionary: RbfDictionary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn save_dictionary(path: &Path, dict: &RbfDictionary, hash: Option<&str>) -> Result<()> {
    io::write_json(
        path,
        &DictionaryFile {
            dictionary: dict.clone(),
            config_hash: hash.map(str::to_string),
        },
    )
}

pub fn load_dictionary(path: &Path) -> Result<(RbfDictionary, Option<String>)> {
    let f: DictionaryFile = io::read_json(path)?;
    Ok((f.dictionary.finalize()?, f.config_hash))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostManifest {
    pub lambda_form: LambdaForm,
    pub c_scalar: f64,
    pub quadrature_nodes: usize,
    pub matrices: Vec<MatrixEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn save_cost(dir: &Path, cost: &CostData, nodes: usize, hash: Option<&str>) -> Result<()> {
    let matrices = vec![
        io::write_matrix(dir, "Lambda", &cost.lambda)?,
        io::write_matrix(dir, "D", &cost.d_mat)?,
        io::write_vector(dir, "d", &cost.d_vec)?,
        io::write_vector(dir, "m", &cost.m_vec)?,
        io::write_vector(dir, "c", &cost.c_per_basis)?,
    ];
    let manifest = CostManifest {
        lambda_form: cost.lambda_form,
        c_scalar: cost.c_scalar,
        quadrature_nodes: nodes,
        matrices,
        config_hash: hash.map(str::to_string),
    };
    io::write_json(&dir.join("cost.json"), &manifest)
}

pub fn load_cost(dir: &Path) -> Result<(CostData, CostManifest)> {
    let man: CostManifest = io::read_json(&dir.join("cost.json"))?;
    let get = |name: &str| io::read_matrix(dir, io::find_entry(&man.matrices, name)?);
    let getv = |name: &str| io::read_vector(dir, io::find_entry(&man.matrices, name)?);
    let cost = CostData {
        d_vec: getv("d")?,
        d_mat: get("D")?,
        c_scalar: man.c_scalar,
        c_per_basis: getv("c")?,
        m_vec: getv("m")?,
        lambda: get("Lambda")?,
        lambda_form: man.lambda_form,
    };
    Ok((cost, man))
}

pub fn quadrature(cfg: &PipelineConfig, dict: &RbfDictionary) -> Result<QuadratureRule> {
    build_quadrature(dict, cfg.ocp.quadrature_nodes)
}

/// Fit both generators (or only `M0` when step data is absent, which is then
/// reported as an error after the zero-input fit has been written).
pub fn fit(cfg: &PipelineConfig) -> Result<GeneratorPair> {
    let paths = cfg.paths();
    let hash = cfg.hash();
    let dict = cfg.dictionary()?;
    let (zero, _) = io::read_snapshots(&paths.zero_data())?;
    if zero.dim() != dict.dim() {
        return Err(Error::dimension("zero-input data", dict.dim(), zero.dim()));
    }
    let quad = quadrature(cfg, &dict)?;
    let q = cfg.ocp.q.clone();
    let cost = cost_data(
        &dict,
        &quad,
        |x: &DVector<f64>| q.eval(x),
        &MChoice::Ones,
        cfg.dictionary.lambda_form,
    )?;
    save_dictionary(&paths.dictionary(), &dict, Some(&hash))?;
    save_cost(
        &paths.operators,
        &cost,
        cfg.ocp.quadrature_nodes,
        Some(&hash),
    )?;

    let step_path = paths.step_data();
    if !step_path.exists() {
        let fit0 = nsdmd_fit(
            &edmd_matrices(&zero, &dict)?,
            &cost.lambda,
            zero.dt,
            &cfg.solver,
        )?;
        save_zero_fit(&paths.operators, &fit0, Some(&hash))?;
        return Err(Error::invalid(
            "operators",
            format!(
                "step data missing ({}); wrote M0 only, M1 cannot be fitted",
                step_path.display()
            ),
        ));
    }
    let (step, _) = io::read_snapshots(&step_path)?;
    let pair = generator_pair(&zero, &step, &dict, &cost.lambda, &cfg.solver)?;
    pair.save(&paths.operators, Some(&hash))?;
    Ok(pair)
}

#[derive(Debug, Clone)]
pub struct SolveOutputs {
    pub solution: DensitySolution,
    pub local: LocalController,
}

pub fn solve(cfg: &PipelineConfig) -> Result<SolveOutputs> {
    let paths = cfg.paths();
    let hash = cfg.hash();
    let (dict, _) = load_dictionary(&paths.dictionary())?;
    let (pair, _) = GeneratorPair::load(&paths.operators)?;
    let (cost, _) = load_cost(&paths.operators)?;
    let quad = quadrature(cfg, &dict)?;
    let mut solution = assemble_and_solve(
        &pair,
        &cost,
        &dict,
        &quad,
        &cfg.ocp.settings(),
        &cfg.solver,
        "../operators/dictionary.json",
    )?;
    solution.config_hash = Some(hash.clone());
    io::write_json(&paths.density_solution(), &solution)?;

    let (local_data, _) = io::read_snapshots(&paths.local_data())?;
    let model = identify_local(&local_data)?;
    let n = dict.dim();
    let q = match &cfg.local.q {
        Some(rows) => DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()),
        None => DMatrix::identity(n, n),
    };
    let r = cfg.local.r.unwrap_or(cfg.ocp.r);
    let delta = cfg.dictionary.delta;
    let gamma = cfg.local.gamma.unwrap_or(delta);
    let mut local = lqr_local(&model, &q, r, gamma, delta)?;
    local.config_hash = Some(hash.clone());
    io::write_json(&paths.local_controller(), &local)?;
    io::write_json(
        &paths.blended(),
        &BlendedManifest {
            global_solution: "density_solution.json".into(),
            local_controller: "local_controller.json".into(),
            dictionary: "../operators/dictionary.json".into(),
            control_form: cfg.ocp.control_form,
            floor_rel: cfg.ocp.floor_rel,
            config_hash: Some(hash),
        },
    )?;
    Ok(SolveOutputs { solution, local })
}

pub fn load_blended(paths: &Paths) -> Result<BlendedController> {
    let man: BlendedManifest = io::read_json(&paths.blended())?;
    let (dict, _) = load_dictionary(&paths.solution.join(&man.dictionary))?;
    let solution: DensitySolution = io::read_json(&paths.solution.join(&man.global_solution))?;
    let local: LocalController = io::read_json(&paths.solution.join(&man.local_controller))?;
    let global =
        recover_controller_with(&solution, Arc::new(dict), man.control_form, man.floor_rel)?;
    Ok(BlendedController { local, global })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub x0: Vec<f64>,
    pub file: String,
    pub cost: Option<f64>,
    pub diverged_at: Option<f64>,
    /// First time the blend gave the local controller positive weight.
    pub local_entry_time: Option<f64>,
    pub ball_entry_time: Option<f64>,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub trajectories: Vec<TrajectorySummary>,
    pub stability_fraction: f64,
    pub stability_threshold: f64,
    pub mean_cost: Option<f64>,
    pub divergent: usize,
    pub ball_radius: f64,
    pub clamp_count: usize,
    pub config_hash: String,
}

pub fn simulate(cfg: &PipelineConfig) -> Result<SimulationReport> {
    let paths = cfg.paths();
    let ctrl = load_blended(&paths)?;
    let sys = cfg.system()?;
    let x0s = cfg.initial_conditions()?;
    let s = &cfg.simulate;
    let radius = s.ball_radius.unwrap_or(cfg.dictionary.delta);
    let q = cfg.ocp.q.clone();
    let qf = |x: &DVector<f64>| q.eval(x);
    let runs = par_map(&x0s, |x0| {
        simulate_closed_loop(&sys, &ctrl, x0, &qf, cfg.ocp.r, s.horizon, s.dt)
    });
    let mut trajectories = Vec::with_capacity(x0s.len());
    for (i, (x0, run)) in x0s.iter().zip(runs).enumerate() {
        let run = run?;
        let file = format!("traj_{i:03}.csv");
        io::write_trajectory(&paths.simulate.join(&file), &run.trajectory)?;
        let (ball_entry_time, settled) = settles_in_ball(&run.trajectory, radius);
        let local_entry_time = run
            .trajectory
            .states
            .iter()
            .position(|x| ctrl.in_local_region(x))
            .map(|k| run.trajectory.times[k]);
        trajectories.push(TrajectorySummary {
            x0: x0.iter().copied().collect(),
            file,
            cost: run.cost,
            diverged_at: run.diverged_at,
            local_entry_time,
            ball_entry_time,
            stable: settled && run.diverged_at.is_none(),
        });
    }
    let stable = trajectories.iter().filter(|t| t.stable).count();
    let costs: Vec<f64> = trajectories.iter().filter_map(|t| t.cost).collect();
    let report = SimulationReport {
        stability_fraction: stable as f64 / trajectories.len().max(1) as f64,
        stability_threshold: s.stability_threshold,
        mean_cost: (!costs.is_empty()).then(|| costs.iter().sum::<f64>() / costs.len() as f64),
        divergent: trajectories
            .iter()
            .filter(|t| t.diverged_at.is_some())
            .count(),
        trajectories,
        ball_radius: radius,
        clamp_count: ctrl.global.clamp_count(),
        config_hash: cfg.hash(),
    };
    io::write_json(&paths.simulate.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOutcome {
    pub report: ComparisonReport,
    pub within_thresholds: bool,
    pub ratio_range: [f64; 2],
    pub max_gap: f64,
    pub config_hash: String,
}

pub fn compare_analytic(cfg: &PipelineConfig) -> Result<CompareOutcome> {
    let c = cfg
        .compare
        .as_ref()
        .ok_or_else(|| Error::invalid("compare", "section missing from config"))?;
    let sys = cfg.system()?;
    if cfg.system != "scalar-cubic" {
        return Err(Error::invalid(
            "system",
            "compare-analytic needs scalar-cubic",
        ));
    }
    gen_data(cfg)?;
    fit(cfg)?;
    solve(cfg)?;
    let ctrl = load_blended(&cfg.paths())?;
    // Recover a from the drift at x = 1.
    let a = sys.drift(&DVector::from_element(1, 1.0))[0];
    let run = compare_scalar(&ctrl, &scalar_oracle(a), &sys, &c.x0, c.horizon, c.dt)?;
    let within = run.report.rows.iter().all(|r| {
        r.cost_ratio
            .is_some_and(|q| q >= c.ratio_range[0] && q <= c.ratio_range[1])
            && r.sup_state_gap.is_some_and(|g| g <= c.max_gap)
    });
    let dir = &cfg.paths().compare;
    write_comparison_csvs(dir, &run)?;
    let outcome = CompareOutcome {
        report: run.report,
        within_thresholds: within,
        ratio_range: c.ratio_range,
        max_gap: c.max_gap,
        config_hash: cfg.hash(),
    };
    io::write_json(&dir.join("report.json"), &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub failures: Vec<String>,
    pub checks: Vec<CheckItem>,
}

struct Checks {
    items: Vec<CheckItem>,
}

impl Checks {
    fn push(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        let status = if ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        self.items.push(CheckItem {
            name: name.into(),
            status,
            detail: detail.into(),
        });
    }

    fn skip(&mut self, name: &str, detail: impl Into<String>) {
        self.items.push(CheckItem {
            name: name.into(),
            status: CheckStatus::Skip,
            detail: detail.into(),
        });
    }

    fn error(&mut self, name: &str, err: &Error) {
        self.push(name, false, err.to_string());
    }
}

const LAMBDA_CHECK_NODES: usize = 200;

fn check_snapshots(
    ch: &mut Checks,
    name: &str,
    path: &Path,
    sys: &ControlAffineSystem,
    hashes: &mut Vec<(String, Option<String>)>,
) {
    if !path.exists() {
        ch.skip(name, format!("{} not found", path.display()));
        return;
    }
    match io::read_snapshots(path) {
        Err(e) => ch.error(name, &e),
        Ok((set, meta)) => {
            hashes.push((name.into(), meta.config_hash));
            let rk = match Rk4::new(set.dt) {
                Ok(rk) => rk,
                Err(e) => return ch.error(name, &e),
            };
            let worst = set
                .x_points
                .iter()
                .zip(&set.y_points)
                .zip(&set.inputs)
                .map(|((x, y), u)| (rk.step_constant(sys, x, *u) - y).amax())
                .fold(0.0, f64::max);
            ch.push(
                name,
                worst <= 1e-12,
                format!(
                    "{} pairs, worst one-step replay error {worst:.3e}",
                    set.len()
                ),
            );
        }
    }
}

/// Re-verify every stored artifact's invariants.
pub fn check_outputs(cfg: &PipelineConfig) -> Result<CheckReport> {
    let paths = cfg.paths();
    let sys = cfg.system()?;
    let mut ch = Checks { items: Vec::new() };
    let mut hashes: Vec<(String, Option<String>)> = Vec::new();

    check_snapshots(&mut ch, "data.zero", &paths.zero_data(), &sys, &mut hashes);
    check_snapshots(&mut ch, "data.step", &paths.step_data(), &sys, &mut hashes);
    check_snapshots(
        &mut ch,
        "data.local",
        &paths.local_data(),
        &sys,
        &mut hashes,
    );

    let dict = if paths.dictionary().exists() {
        match load_dictionary(&paths.dictionary()) {
            Ok((d, h)) => {
                hashes.push(("dictionary".into(), h));
                let inside = (0..d.len()).all(|k| d.domain_box.contains(&d.center(k)));
                ch.push(
                    "dictionary.centers_in_box",
                    inside,
                    format!("{} centers", d.len()),
                );
                Some(d)
            }
            Err(e) => {
                ch.error("dictionary", &e);
                None
            }
        }
    } else {
        ch.skip("dictionary", "not found");
        None
    };

    let gens = if paths.operators.join(GENERATOR_MANIFEST).exists() {
        match io::read_json::<GeneratorManifest>(&paths.operators.join(GENERATOR_MANIFEST)) {
            Err(e) => {
                ch.error("operators", &e);
                None
            }
            Ok(man) => {
                hashes.push(("operators".into(), man.config_hash.clone()));
                let mut fits = vec![("P0", &man.zero)];
                if let Some(step) = &man.step {
                    fits.push(("P1", step));
                }
                for (label, fm) in fits {
                    match io::read_matrix(&paths.operators, &fm.matrices[0]) {
                        Err(e) => ch.error(&format!("operators.{label}"), &e),
                        Ok(p_hat) => {
                            let min = p_hat.min();
                            ch.push(
                                &format!("operators.{label}.nonnegative"),
                                min >= -1e-9,
                                format!("min entry {min:.3e}"),
                            );
                            let dev = row_sum_deviation(&p_hat);
                            ch.push(
                                &format!("operators.{label}.row_stochastic"),
                                dev <= 1e-8,
                                format!("max row-sum deviation {dev:.3e}"),
                            );
                        }
                    }
                }
                match GeneratorPair::load(&paths.operators) {
                    Ok((pair, _)) => {
                        let tol = 1e-8 / pair.dt;
                        let (c0, c1) = (column_sum_max(&pair.m0), column_sum_max(&pair.m1));
                        ch.push(
                            "operators.M0.column_sums",
                            c0 <= tol,
                            format!("{c0:.3e} (tol {tol:.1e})"),
                        );
                        ch.push(
                            "operators.M1.column_sums",
                            c1 <= tol,
                            format!("{c1:.3e} (tol {tol:.1e})"),
                        );
                        let n = pair.m0.nrows();
                        let m0_ref = (&pair.fit0.p - DMatrix::identity(n, n)) / pair.dt;
                        let gap = (&m0_ref - &pair.m0).amax();
                        ch.push(
                            "operators.M0.matches_P0",
                            gap <= 1e-9 / pair.dt,
                            format!("{gap:.3e}"),
                        );
                        Some(pair)
                    }
                    Err(e) => {
                        ch.error("operators.pair", &e);
                        None
                    }
                }
            }
        }
    } else {
        ch.skip("operators", "not found");
        None
    };

    let cost = if paths.cost().exists() {
        match load_cost(&paths.operators) {
            Err(e) => {
                ch.error("cost", &e);
                None
            }
            Ok((cost, man)) => {
                hashes.push(("cost".into(), man.config_hash.clone()));
                let asym = (&cost.d_mat - cost.d_mat.transpose()).amax();
                ch.push("cost.D.symmetric", asym <= 1e-10, format!("{asym:.3e}"));
                let lmin = cost.lambda.clone().symmetric_eigenvalues().min();
                ch.push(
                    "cost.Lambda.psd",
                    lmin > -1e-10,
                    format!("smallest eigenvalue {lmin:.3e}"),
                );
                if let Some(d) = &dict {
                    let expected = lambda_matrix(d, man.lambda_form);
                    let dev = (&expected - &cost.lambda).amax() / expected.amax();
                    ch.push(
                        "cost.Lambda.matches_form",
                        dev <= 1e-12,
                        format!("relative deviation {dev:.3e} from the declared form"),
                    );
                    match crate::dictionary::build_quadrature_on(
                        &d.domain_box,
                        0.0,
                        LAMBDA_CHECK_NODES,
                    ) {
                        Ok(fine) => {
                            let lc = lambda_consistency_of(d, &cost.lambda, &fine);
                            if lc.pairs_checked == 0 {
                                ch.skip(
                                    "cost.Lambda.quadrature",
                                    "no centres far enough inside the box",
                                );
                            } else if man.lambda_form == LambdaForm::Analytic {
                                ch.push(
                                    "cost.Lambda.quadrature",
                                    lc.max_relative_deviation <= 0.01,
                                    format!(
                                        "{} interior pairs, worst deviation {:.3e}",
                                        lc.pairs_checked, lc.max_relative_deviation
                                    ),
                                );
                            } else {
                                ch.skip(
                                    "cost.Lambda.quadrature",
                                    format!(
                                        "{:?} form deviates from quadrature by {:.3e}",
                                        man.lambda_form, lc.max_relative_deviation
                                    ),
                                );
                            }
                        }
                        Err(e) => ch.error("cost.Lambda.quadrature", &e),
                    }
                }
                Some(cost)
            }
        }
    } else {
        ch.skip("cost", "not found");
        None
    };

    if paths.density_solution().exists() {
        match io::read_json::<DensitySolution>(&paths.density_solution()) {
            Err(e) => ch.error("solution", &e),
            Ok(sol) => {
                hashes.push(("solution".into(), sol.config_hash.clone()));
                ch.push(
                    "solution.v_nonnegative",
                    sol.v.min() >= -1e-8,
                    format!("min v {:.3e}", sol.v.min()),
                );
                if let (Some(pair), Some(cost)) = (&gens, &cost) {
                    let res = sol.replay_residual(&pair.m0, &pair.m1, &cost.m_vec);
                    ch.push(
                        "solution.divergence_identity",
                        res <= EQ_TOL,
                        format!("replayed residual {res:.3e}"),
                    );
                }
                if let Some(d) = &dict {
                    match quadrature(cfg, d) {
                        Ok(quad) => {
                            let worst = quad
                                .nodes
                                .iter()
                                .map(|x| d.eval(x).dot(&sol.v))
                                .fold(f64::INFINITY, f64::min);
                            ch.push(
                                "solution.density_nonnegative",
                                worst >= -1e-6,
                                format!("min rho on nodes {worst:.3e}"),
                            );
                        }
                        Err(e) => ch.error("solution.density_nonnegative", &e),
                    }
                }
            }
        }
    } else {
        ch.skip("solution", "not found");
    }

    if paths.local_controller().exists() {
        match io::read_json::<LocalController>(&paths.local_controller()) {
            Err(e) => ch.error("local", &e),
            Ok(local) => {
                hashes.push(("local".into(), local.config_hash.clone()));
                let sym = (&local.p - local.p.transpose()).amax();
                let pd = local.p.clone().cholesky().is_some();
                ch.push(
                    "local.P_spd",
                    sym <= 1e-10 && pd,
                    format!("asymmetry {sym:.3e}, cholesky {pd}"),
                );
                let cp = &local.continuous_pair;
                let res = crate::local_control::riccati_residual(
                    &cp.a_c, &cp.b_c, &local.q, local.r, &local.p,
                );
                ch.push("local.riccati_residual", res <= 1e-8, format!("{res:.3e}"));
                let acl = &cp.a_c - &cp.b_c * local.k.transpose();
                let abscissa = acl
                    .complex_eigenvalues()
                    .iter()
                    .map(|l| l.re)
                    .fold(f64::NEG_INFINITY, f64::max);
                ch.push(
                    "local.closed_loop_hurwitz",
                    abscissa < 0.0,
                    format!("spectral abscissa {abscissa:.3e}"),
                );
            }
        }
    } else {
        ch.skip("local", "not found");
    }

    let present: Vec<&(String, Option<String>)> = hashes.iter().collect();
    if present.is_empty() {
        ch.push(
            "artifacts.present",
            false,
            format!("nothing found under {}", paths.root.display()),
        );
    } else {
        let expected = cfg.hash();
        let bad: Vec<&str> = present
            .iter()
            .filter(|(_, h)| h.as_deref() != Some(expected.as_str()))
            .map(|(n, _)| n.as_str())
            .collect();
        ch.push(
            "artifacts.config_hash",
            bad.is_empty(),
            if bad.is_empty() {
                format!("{} artifacts carry {expected}", present.len())
            } else {
                format!("mismatched: {}", bad.join(", "))
            },
        );
    }

    let failures: Vec<String> = ch
        .items
        .iter()
        .filter(|c| c.status == CheckStatus::Fail)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    let report = CheckReport {
        passed: failures.is_empty(),
        failures,
        checks: ch.items,
    };
    io::write_json(&paths.root.join("check_report.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(dir: &Path) -> PipelineConfig {
        serde_json::from_value(serde_json::json!({
            "system": "scalar-cubic",
            "domain_box": [[-5.0, 5.0]],
            "dictionary": {"per_dim_counts": [5], "sigma": 1.225, "delta": 0.15},
            "data": {"M": 300, "M_local": 60, "L_local": 30, "dt": 0.01, "seed": 3},
            "ocp": {"r": 1.0, "quadrature_nodes": 100},
            "simulate": {"horizon": 2.0, "dt": 0.01, "x0": [[1.0], [-2.0]]},
            "output_dir": dir,
        }))
        .unwrap()
    }

    #[test]
    fn config_round_trips_and_hashes() {
        let cfg = tiny_config(Path::new("/tmp/x"));
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.data.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = tiny_config(Path::new("/tmp/x"));
        cfg.data.l_local = 0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("data.L_local"), "{msg}");
        let mut cfg = tiny_config(Path::new("/tmp/x"));
        cfg.dictionary.per_dim_counts = vec![5, 5];
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("dictionary.per_dim_counts"));
    }

    #[test]
    fn overrides_apply_before_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let path = dir.path().join("cfg.json");
        io::write_json(&path, &cfg).unwrap();
        let back =
            PipelineConfig::load_with_overrides(&path, &["ocp.r=2.5".into(), "ocp.norm=l1".into()])
                .unwrap();
        assert_eq!(back.ocp.r, 2.5);
        assert_eq!(back.ocp.norm, Norm::L1);
        assert!(PipelineConfig::load_with_overrides(&path, &["ocp.r=-1".into()]).is_err());
    }
}
