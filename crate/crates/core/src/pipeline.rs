//! End-to-end run: load a problem, solve it, smooth the potentials, build
//! the Monge–Ampère map and the transport dynamics, compile the velocity
//! field into a neural ODE, and measure how far the compiled flow lands
//! from the exact and the reference dynamics.
//!
//! Every stage failure carries the stage it came from. Output is a
//! directory of JSON and CSV files with no timestamps, so a rerun with the
//! same configuration reproduces it byte for byte.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{build_endpoint_densities, evolve, uniform_times, DynamicsFields, EvolvedDensity};
use crate::error::{Result, UotError};
use crate::grid::Grid;
use crate::io::{self, FieldFile, TidyRow, TrajectoryRow};
use crate::metrics::{dbl_distance, tail_rate, DiscreteMeasure};
use crate::monge_ampere::{self, ma_residual, ExternalMaSolver, FileExchangeSolver, MaResidual, MapExchange, MonotoneMap};
use crate::neural::compile::{
    compile, dynamics_constants, dynamics_field, CompileConfig, CompileReport, Compiled, DynamicsConstants, FieldSource,
};
use crate::neural::flow::{gronwall_bound, neural_ode_flow};
use crate::neural::hermite::Truncation;
use crate::neural::mollify::{mollify_to_tolerance, Boundary};
use crate::neural::nai::{Activation, NaiKernel};
use crate::reference::{solve_reference, ReferenceSolution};
use crate::sinkhorn::{compute_params, run, RunOutput};
use crate::uot::{DualPotentials, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Spec,
    Solve,
    Smooth,
    MongeAmpere,
    Dynamics,
    Compile,
    Flow,
    Reference,
    Metrics,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("stage {stage}: {error}")]
pub struct StageError {
    pub stage: Stage,
    pub error: UotError,
}

impl StageError {
    pub fn is_numerical(&self) -> bool {
        self.error.is_numerical()
    }
}

trait Tag<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> Tag<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "PUOT_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub spec: PathBuf,
    pub out_dir: PathBuf,
    /// Overrides the problem file's δ.
    pub delta: Option<f64>,
    /// Iteration count `L`.
    pub iters: usize,
    /// L² tolerance for smoothing the potentials.
    pub eps0: f64,
    /// Field error budget for the neural compile.
    pub eps1: f64,
    /// Horizon `T` in time units.
    pub horizon: f64,
    /// Number of equal time intervals at which the dynamics are reported.
    pub time_stamps: usize,
    /// RK4 steps per reporting interval for the neural flow.
    pub flow_substeps: usize,
    pub activation: Activation,
    pub truncation: Truncation,
    pub undamped_bound: bool,
    pub tensor_ma: bool,
    pub external_ma: Option<PathBuf>,
    pub compile: bool,
    pub reference: bool,
    pub reference_tol: f64,
    /// Accepted and recorded; the pipeline draws no random numbers.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spec: PathBuf::new(),
            out_dir: PathBuf::from("out"),
            delta: None,
            iters: 300,
            eps0: 0.01,
            eps1: 0.1,
            horizon: 1.0,
            time_stamps: 4,
            flow_substeps: 16,
            activation: Activation::Relu,
            truncation: Truncation::Fejer,
            undamped_bound: false,
            tensor_ma: true,
            external_ma: None,
            compile: true,
            reference: true,
            reference_tol: 1e-12,
            seed: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(UotError::Format(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| UotError::Format(format!("{key}: '{v}': {e}")))
}

impl RunConfig {
    /// Sets one field from its textual form. Keys match the field names;
    /// `L` and `T` are accepted as aliases of `iters` and `horizon`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "spec" => self.spec = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "delta" => self.delta = Some(parse_num(key, v)?),
            "iters" | "L" => self.iters = parse_num(key, v)?,
            "eps0" => self.eps0 = parse_num(key, v)?,
            "eps1" => self.eps1 = parse_num(key, v)?,
            "horizon" | "T" => self.horizon = parse_num(key, v)?,
            "time_stamps" => self.time_stamps = parse_num(key, v)?,
            "flow_substeps" => self.flow_substeps = parse_num(key, v)?,
            "activation" => self.activation = Activation::parse(v)?,
            "truncation" => {
                self.truncation = match v {
                    "fejer" => Truncation::Fejer,
                    "plain" => Truncation::Plain,
                    _ => return Err(UotError::Format(format!("truncation: expected fejer or plain, got '{v}'"))),
                }
            }
            "undamped_bound" => self.undamped_bound = parse_bool(key, v)?,
            "tensor_ma" => self.tensor_ma = parse_bool(key, v)?,
            "external_ma" => self.external_ma = Some(PathBuf::from(v)),
            "compile" => self.compile = parse_bool(key, v)?,
            "reference" => self.reference = parse_bool(key, v)?,
            "reference_tol" => self.reference_tol = parse_num(key, v)?,
            "seed" => self.seed = Some(parse_num(key, v)?),
            other => return Err(UotError::Format(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Relative paths
    /// are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UotError::Format(format!("line {}: expected 'key = value'", no + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.spec = base.join(&cfg.spec);
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.external_ma = cfg.external_ma.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&io::read_text(path)?, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies the output-directory override from the environment.
    pub fn with_env_out_dir(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
        self
    }

    /// The configuration in the same `key = value` format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("spec", self.spec.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        if let Some(d) = self.delta {
            kv("delta", d.to_string());
        }
        kv("iters", self.iters.to_string());
        kv("eps0", self.eps0.to_string());
        kv("eps1", self.eps1.to_string());
        kv("horizon", self.horizon.to_string());
        kv("time_stamps", self.time_stamps.to_string());
        kv("flow_substeps", self.flow_substeps.to_string());
        kv("activation", self.activation.name().to_string());
        kv(
            "truncation",
            if self.truncation == Truncation::Plain { "plain" } else { "fejer" }.to_string(),
        );
        kv("undamped_bound", self.undamped_bound.to_string());
        kv("tensor_ma", self.tensor_ma.to_string());
        if let Some(p) = &self.external_ma {
            kv("external_ma", p.display().to_string());
        }
        kv("compile", self.compile.to_string());
        kv("reference", self.reference.to_string());
        kv("reference_tol", self.reference_tol.to_string());
        if let Some(seed) = self.seed {
            kv("seed", seed.to_string());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eps0", self.eps0),
            ("eps1", self.eps1),
            ("horizon", self.horizon),
            ("reference_tol", self.reference_tol),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(UotError::InvalidParameter(format!("{k} = {v} must be positive")));
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(UotError::InvalidParameter(format!("delta = {d} must be positive")));
            }
        }
        if self.iters < 1 || self.time_stamps < 1 || self.flow_substeps < 1 {
            return Err(UotError::InvalidParameter(
                "iters, time_stamps and flow_substeps must be at least 1".into(),
            ));
        }
        if !self.spec.is_file() {
            return Err(UotError::Io(format!("{}: spec file not found", self.spec.display())));
        }
        if let Some(p) = self.external_ma.as_ref().filter(|p| !p.is_file()) {
            return Err(UotError::Io(format!("{}: external map not found", p.display())));
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        uniform_times(self.horizon, self.time_stamps)
    }
}

/// Problem from the spec file with the configured δ override.
pub fn load_spec(cfg: &RunConfig) -> StageResult<ProblemSpec> {
    cfg.validate().at(Stage::Config)?;
    let spec = io::load_problem(&cfg.spec).at(Stage::Spec)?;
    match cfg.delta {
        Some(d) => ProblemSpec::new(spec.f, spec.g, spec.cost, d).at(Stage::Spec),
        None => Ok(spec),
    }
}

pub fn solve_stage(spec: &ProblemSpec, cfg: &RunConfig) -> Result<RunOutput> {
    let mut params = compute_params(spec)?;
    params.l_max = cfg.iters;
    params.undamped_bound = cfg.undamped_bound;
    run(spec, &params, cfg.iters)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingReport {
    pub width_k1: f64,
    pub width_k2: f64,
    pub l2_k1: f64,
    pub l2_k2: f64,
}

/// Mollifies both potentials to within `eps0` in L². The boundary
/// treatment renormalizes, so constant potentials stay constant.
pub fn smooth_duals(spec: &ProblemSpec, duals: &DualPotentials, eps0: f64) -> Result<(DualPotentials, SmoothingReport)> {
    let m1 = mollify_to_tolerance(&spec.f.grid, &duals.k1, eps0, Boundary::Renormalize)?;
    let m2 = mollify_to_tolerance(&spec.g.grid, &duals.k2, eps0, Boundary::Renormalize)?;
    let rep = SmoothingReport {
        width_k1: m1.width,
        width_k2: m2.width,
        l2_k1: m1.l2_distance,
        l2_k2: m2.l2_distance,
    };
    let mut out = duals.clone();
    out.k1_tilde = Some(m1.values);
    out.k2_tilde = Some(m2.values);
    out.smoothing_width = Some(m1.width.min(m2.width));
    Ok((out, rep))
}

pub fn monge_ampere_stage(spec: &ProblemSpec, kx: &[f64], ky: &[f64], cfg: &RunConfig) -> Result<MonotoneMap> {
    let (src, tgt) = (&spec.f.grid, &spec.g.grid);
    if let Some(path) = &cfg.external_ma {
        FileExchangeSolver { path: path.clone() }.solve(src, kx, tgt, ky)
    } else if src.dim() == 1 {
        monge_ampere::solve_1d(src, kx, tgt, ky)
    } else if cfg.tensor_ma {
        monge_ampere::solve_tensor(src, kx, tgt, ky)
    } else {
        Err(UotError::Unsupported("d >= 2 needs the tensor solver or an external map".into()))
    }
}

/// Transport dynamics built from one set of potentials and a coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsBundle {
    pub f_bar: Vec<f64>,
    pub g_bar: Vec<f64>,
    pub fields: DynamicsFields,
    pub evolved: EvolvedDensity,
    pub ma: MaResidual,
}

pub fn dynamics_stage(
    spec: &ProblemSpec,
    coupling: &crate::uot::Coupling,
    duals: &DualPotentials,
    cfg: &RunConfig,
) -> StageResult<DynamicsBundle> {
    let (f_bar, g_bar) = build_endpoint_densities(coupling, duals).at(Stage::Dynamics)?;
    let map = monge_ampere_stage(spec, &coupling.kx, &coupling.ky, cfg).at(Stage::MongeAmpere)?;
    let ma = ma_residual(&map, &coupling.kx, &coupling.ky);
    let (k1, k2) = duals.smoothed();
    let fields = DynamicsFields::new(cfg.horizon, map, k1.to_vec(), k2.to_vec()).at(Stage::Dynamics)?;
    let evolved = evolve(&fields, &f_bar, &cfg.times()).at(Stage::Dynamics)?;
    Ok(DynamicsBundle {
        f_bar,
        g_bar,
        fields,
        evolved,
        ma,
    })
}

pub fn compile_config(cfg: &RunConfig, dim: usize) -> Result<CompileConfig> {
    let mut cc = CompileConfig::new(cfg.eps1, dim);
    cc.kernel = NaiKernel::shipped(cfg.activation)?;
    cc.truncation = cfg.truncation;
    Ok(cc)
}

pub fn constants_of(spec: &ProblemSpec, dynb: &DynamicsBundle, cfg: &RunConfig) -> Result<DynamicsConstants> {
    let vol_max = spec.vol_f().max(spec.vol_g());
    dynamics_constants(&dynb.fields, &cfg.times(), spec.delta, vol_max, spec.e_sup())
}

pub fn compile_stage(spec: &ProblemSpec, dynb: &DynamicsBundle, cfg: &RunConfig) -> Result<(Compiled, DynamicsConstants)> {
    let consts = constants_of(spec, dynb, cfg)?;
    let field = dynamics_field(&dynb.fields);
    let src = FieldSource {
        dim: spec.f.grid.dim(),
        horizon: cfg.horizon,
        field: &field,
        lipschitz: consts.lipschitz,
        min_det: consts.min_det,
        source_radius: consts.source_radius,
        endpoint_radius: consts.endpoint_radius,
        field_sup: consts.field_sup,
    };
    Ok((compile(&src, &compile_config(cfg, src.dim)?)?, consts))
}

/// Neural-ODE characteristics from every source center, sampled at the
/// reporting stamps: `points[m][i]`.
pub fn neural_characteristics(compiled: &Compiled, source: &Grid, cfg: &RunConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    let steps = cfg.time_stamps * cfg.flow_substeps;
    let mut out = vec![Vec::with_capacity(source.len()); cfg.time_stamps + 1];
    for x in source.points() {
        let tr = neural_ode_flow(&compiled.network, &x, cfg.horizon, steps)?;
        for (m, slot) in out.iter_mut().enumerate() {
            slot.push(tr.points[m * cfg.flow_substeps].clone());
        }
    }
    Ok(out)
}

/// Jacobian determinant of a sampled map by finite differences between
/// neighbouring characteristics (one-sided at the ends of each axis).
pub fn sampled_jacobian_det(source: &Grid, moved: &[Vec<f64>], flat: usize) -> f64 {
    let d = source.dim();
    let idx = source.multi_index(flat);
    let mut jac = DMatrix::<f64>::identity(d, d);
    for k in 0..d {
        let n = source.axes[k].n;
        if n < 2 {
            continue;
        }
        let (lo, hi) = if idx[k] == 0 {
            (0, 1)
        } else if idx[k] + 1 == n {
            (n - 2, n - 1)
        } else {
            (idx[k] - 1, idx[k] + 1)
        };
        let (mut a, mut b) = (idx.clone(), idx.clone());
        a[k] = lo;
        b[k] = hi;
        let span = (hi - lo) as f64 * source.axes[k].h();
        let (pa, pb) = (&moved[source.flat_index(&a)], &moved[source.flat_index(&b)]);
        for r in 0..d {
            jac[(r, k)] = (pb[r] - pa[r]) / span;
        }
    }
    jac.determinant()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub kkt_res: f64,
    pub certificate: f64,
    pub sqrt_r: f64,
    /// Per-step ratio fitted to the tail of the step-norm series.
    pub step_ratio: Option<f64>,
    pub step_ratio_r2: Option<f64>,
    pub gap_nonmonotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummary {
    pub ma_residual_sup: f64,
    pub ma_residual_interior: f64,
    pub h: f64,
    pub map_monotone: bool,
    /// `‖f − f̄‖_{L²}` and `‖g − ḡ‖_{L²}`.
    pub f_bar_l2: f64,
    pub g_bar_l2: f64,
    /// `‖μ_T − ḡ‖_{L¹}` after resampling onto the target grid.
    pub endpoint_l1: f64,
    pub masses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    /// Largest distance between a neural and an exact characteristic at
    /// each stamp.
    pub sup_error: Vec<f64>,
    /// Grönwall envelope from the measured sup field error and `𝔏`.
    pub envelope: Vec<f64>,
    pub within_envelope: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAt {
    pub t: f64,
    /// Compiled flow against the exact dynamics of the same run.
    pub dbl_proxy: Option<f64>,
    /// Compiled flow (exact dynamics when not compiled) against the
    /// reference dynamics.
    pub dbl_reference: Option<f64>,
    pub exact: bool,
    pub mass: f64,
    pub mass_reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub solve: SolveSummary,
    pub smoothing: SmoothingReport,
    pub dynamics: DynamicsSummary,
    pub constants: Option<DynamicsConstants>,
    pub compile: Option<CompileReport>,
    pub flow: Option<FlowSummary>,
    pub reference_iterations: Option<usize>,
    pub metrics: Vec<MetricAt>,
}

/// Everything a run produced, kept in memory.
pub struct PipelineOutput {
    pub config: RunConfig,
    pub spec: ProblemSpec,
    pub run: RunOutput,
    pub duals: DualPotentials,
    pub dynamics: DynamicsBundle,
    pub compiled: Option<Compiled>,
    pub neural_points: Option<Vec<Vec<Vec<f64>>>>,
    pub reference: Option<(ReferenceSolution, DynamicsBundle)>,
    pub report: PipelineReport,
}

pub fn solve_summary(run: &RunOutput, spec: &ProblemSpec) -> Result<SolveSummary> {
    let last = run
        .diagnostics
        .records
        .last()
        .ok_or_else(|| UotError::InternalError("no iterations recorded".into()))?;
    let params = compute_params(spec)?;
    let steps: Vec<f64> = run.diagnostics.records.iter().map(|r| r.step_norm).collect();
    let fit = tail_rate(&steps, 1e-13).ok();
    Ok(SolveSummary {
        iterations: run.diagnostics.records.len(),
        primal: last.primal,
        dual: last.dual,
        gap: last.gap,
        kkt_res: last.kkt_res,
        certificate: last.certificate,
        sqrt_r: params.r.sqrt(),
        step_ratio: fit.map(|f| f.0),
        step_ratio_r2: fit.map(|f| f.1),
        gap_nonmonotone: run.diagnostics.gap_nonmonotone,
    })
}

fn dynamics_summary(spec: &ProblemSpec, d: &DynamicsBundle) -> DynamicsSummary {
    let last = d.evolved.times.len() - 1;
    let mu_t = d.evolved.to_eulerian(last, &d.fields, &spec.g.grid);
    DynamicsSummary {
        ma_residual_sup: d.ma.sup,
        ma_residual_interior: d.ma.interior_sup,
        h: d.ma.h,
        map_monotone: d.fields.map.is_monotone(),
        f_bar_l2: spec.f.grid.l2_dist(&spec.f.values, &d.f_bar),
        g_bar_l2: spec.g.grid.l2_dist(&spec.g.values, &d.g_bar),
        endpoint_l1: spec.g.grid.l1_dist(&mu_t, &d.g_bar),
        masses: d.evolved.masses.clone(),
    }
}

/// Runs every stage and returns the in-memory products.
pub fn run_pipeline(cfg: &RunConfig) -> StageResult<PipelineOutput> {
    let spec = load_spec(cfg)?;
    let run = solve_stage(&spec, cfg).at(Stage::Solve)?;
    let (duals, smoothing) = smooth_duals(&spec, &run.duals, cfg.eps0).at(Stage::Smooth)?;
    let dynamics = dynamics_stage(&spec, &run.coupling, &duals, cfg)?;
    let times = cfg.times();

    let (compiled, constants) = if cfg.compile {
        let (c, k) = compile_stage(&spec, &dynamics, cfg).at(Stage::Compile)?;
        (Some(c), Some(k))
    } else {
        (None, None)
    };
    let neural_points = match &compiled {
        Some(c) => Some(neural_characteristics(c, &spec.f.grid, cfg).at(Stage::Flow)?),
        None => None,
    };
    let flow = match (&compiled, &neural_points, &constants) {
        (Some(c), Some(np), Some(k)) => {
            let sup_error: Vec<f64> = np
                .iter()
                .zip(&dynamics.evolved.points)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
                        .fold(0.0, f64::max)
                })
                .collect();
            let envelope: Vec<f64> = times.iter().map(|&t| gronwall_bound(c.report.total_linf, k.lipschitz, t)).collect();
            let within_envelope = sup_error.iter().zip(&envelope).all(|(e, b)| *e <= b * (1.0 + 1e-9) + 1e-12);
            Some(FlowSummary {
                sup_error,
                envelope,
                within_envelope,
            })
        }
        _ => None,
    };

    let reference = if cfg.reference {
        let sol = solve_reference(&spec, cfg.reference_tol, 2_000_000).at(Stage::Reference)?;
        let dynb = dynamics_stage(&spec, &sol.coupling, &sol.duals, cfg)?;
        Some((sol, dynb))
    } else {
        None
    };

    let mut metrics = Vec::with_capacity(times.len());
    for (m, &t) in times.iter().enumerate() {
        let exact = DiscreteMeasure::from_evolved(&dynamics.evolved, m);
        let approx = match &neural_points {
            Some(np) => DiscreteMeasure {
                points: np[m].clone(),
                weights: exact.weights.clone(),
            },
            None => exact.clone(),
        };
        let dbl_proxy = match &neural_points {
            Some(_) => Some(dbl_distance(&approx, &exact).at(Stage::Metrics)?),
            None => None,
        };
        let refm = reference.as_ref().map(|(_, d)| DiscreteMeasure::from_evolved(&d.evolved, m));
        let dbl_reference = match &refm {
            Some(r) => Some(dbl_distance(&approx, r).at(Stage::Metrics)?),
            None => None,
        };
        let exact_flag = dbl_proxy.iter().chain(&dbl_reference).all(|r| r.exact);
        metrics.push(MetricAt {
            t,
            dbl_proxy: dbl_proxy.map(|r| r.value),
            dbl_reference: dbl_reference.map(|r| r.value),
            exact: exact_flag,
            mass: approx.total_mass(),
            mass_reference: refm.map(|r| r.total_mass()),
        });
    }

    let report = PipelineReport {
        solve: solve_summary(&run, &spec).at(Stage::Solve)?,
        smoothing,
        dynamics: dynamics_summary(&spec, &dynamics),
        constants,
        compile: compiled.as_ref().map(|c| c.report.clone()),
        flow,
        reference_iterations: reference.as_ref().map(|(s, _)| s.iterations),
        metrics,
    };
    Ok(PipelineOutput {
        config: cfg.clone(),
        spec,
        run,
        duals,
        dynamics,
        compiled,
        neural_points,
        reference,
        report,
    })
}

/// Rows of the exact characteristics: `characteristic` is the source index.
pub fn exact_trajectory_rows(d: &DynamicsBundle) -> Vec<TrajectoryRow> {
    let ev = &d.evolved;
    let mut rows = vec![];
    for (m, &t) in ev.times.iter().enumerate() {
        for i in 0..ev.initial.len() {
            rows.push(TrajectoryRow {
                t,
                characteristic: i,
                x: ev.points[m][i].clone(),
                mu: ev.density[m][i],
                mass_factor: ev.mass_factor[m][i],
            });
        }
    }
    rows
}

/// Rows of the neural characteristics; densities use the sampled Jacobian
/// of the neural flow and the exact mass factor.
pub fn neural_trajectory_rows(d: &DynamicsBundle, points: &[Vec<Vec<f64>>]) -> Vec<TrajectoryRow> {
    let ev = &d.evolved;
    let mut rows = vec![];
    for (m, &t) in ev.times.iter().enumerate() {
        for i in 0..ev.initial.len() {
            let det = sampled_jacobian_det(&ev.source, &points[m], i);
            rows.push(TrajectoryRow {
                t,
                characteristic: i,
                x: points[m][i].clone(),
                mu: ev.initial[i] * ev.mass_factor[m][i] / det,
                mass_factor: ev.mass_factor[m][i],
            });
        }
    }
    rows
}

fn metric_rows(report: &PipelineReport) -> Vec<TidyRow> {
    let mut rows = vec![];
    for m in &report.metrics {
        let mut push = |series: &str, v: Option<f64>| {
            if let Some(value) = v {
                rows.push(TidyRow {
                    series: series.into(),
                    t: m.t,
                    value,
                });
            }
        };
        push("dbl_proxy", m.dbl_proxy);
        push("dbl_reference", m.dbl_reference);
        push("mass", Some(m.mass));
        push("mass_reference", m.mass_reference);
    }
    if let Some(f) = &report.flow {
        for ((t, e), b) in report.metrics.iter().map(|m| m.t).zip(&f.sup_error).zip(&f.envelope) {
            rows.push(TidyRow {
                series: "flow_sup_error".into(),
                t,
                value: *e,
            });
            rows.push(TidyRow {
                series: "gronwall_envelope".into(),
                t,
                value: *b,
            });
        }
    }
    rows
}

/// Files of a solve-only run.
pub fn write_solve_outputs(dir: &Path, spec: &ProblemSpec, run: &RunOutput) -> Result<()> {
    io::write_text(&dir.join("duals.json"), &io::to_json(&run.duals)?)?;
    FieldFile::new(&spec.f.grid, &run.duals.k1, None).write(&dir.join("k1.json"))?;
    FieldFile::new(&spec.g.grid, &run.duals.k2, None).write(&dir.join("k2.json"))?;
    io::write_text(&dir.join("coupling.json"), &io::to_json(&run.coupling)?)?;
    io::write_text(&dir.join("iterations.csv"), &io::iterations_csv(&run.diagnostics.records)?)?;
    let cert: Vec<TidyRow> = run
        .diagnostics
        .records
        .iter()
        .map(|r| TidyRow {
            series: "certificate".into(),
            t: r.n as f64,
            value: r.certificate,
        })
        .collect();
    io::write_text(&dir.join("certificate.csv"), &io::tidy_csv(&cert)?)
}

/// Files describing the dynamics of a run.
pub fn write_dynamics_outputs(dir: &Path, spec: &ProblemSpec, duals: &DualPotentials, d: &DynamicsBundle) -> Result<()> {
    io::write_text(&dir.join("duals_smoothed.json"), &io::to_json(duals)?)?;
    io::write_text(&dir.join("map.json"), &io::to_json(&MapExchange::from_map(&d.fields.map))?)?;
    FieldFile::new(&spec.f.grid, &d.f_bar, None).write(&dir.join("f_bar.json"))?;
    FieldFile::new(&spec.g.grid, &d.g_bar, None).write(&dir.join("g_bar.json"))?;
    io::write_text(&dir.join("trajectories.csv"), &io::trajectory_csv(&exact_trajectory_rows(d))?)
}

impl PipelineOutput {
    /// Writes the bundle into `config.out_dir`.
    pub fn write_bundle(&self) -> StageResult<()> {
        let dir = &self.config.out_dir;
        let write = || -> Result<()> {
            io::write_text(&dir.join("config.txt"), &self.config.to_text())?;
            write_solve_outputs(dir, &self.spec, &self.run)?;
            write_dynamics_outputs(dir, &self.spec, &self.duals, &self.dynamics)?;
            if let (Some(c), Some(np)) = (&self.compiled, &self.neural_points) {
                io::write_text(&dir.join("neural_field.json"), &c.params.to_json()?)?;
                io::write_text(
                    &dir.join("neural_trajectories.csv"),
                    &io::trajectory_csv(&neural_trajectory_rows(&self.dynamics, np))?,
                )?;
            }
            if let Some((_, rd)) = &self.reference {
                io::write_text(
                    &dir.join("reference_trajectories.csv"),
                    &io::trajectory_csv(&exact_trajectory_rows(rd))?,
                )?;
            }
            io::write_text(&dir.join("metrics.csv"), &io::tidy_csv(&metric_rows(&self.report))?)?;
            io::write_text(&dir.join("report.json"), &io::to_json(&self.report)?)
        };
        write().at(Stage::Output)
    }
}
