//! Experiment configs, orchestration, diagnostics gates, artifacts and plot data.
//!
//! A run directory always receives `config.toml` (normalized echo of the input),
//! `diagnostics.json` and `summary.txt`; the rest depends on the experiment kind.
//! Output is a pure function of the config, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupled::{solve_system_distributional_with, solve_system_with, uniqueness_experiment, SolutionPair, SystemConfig, SystemOperators};
use crate::elliptic::{principal_eigenpair, DiscreteOperator};
use crate::field::{CoefficientPreset, GridFunction};
use crate::mesh::{fmt_f64, MeshSpec};
use crate::singular::{
    build_subsolution, continuation_solve, interior_positivity, linfty_cap, local_h1, subsolution_constant, verify_barrier, ConvergenceTrace,
    Regime, RegimeParams, RegularizationSchedule,
};
use crate::variational::{fit_boundary_exponent, hardy_quotient, saddle_test, unboundedness_probe, write_saddle_csv};
use crate::{Error, Result};

/// Environment variable holding the worker count for sweeps and parallel trials.
pub const WORKERS_ENV: &str = "SINGSYS_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Single,
    Coupled,
    Sweep,
    Refinement,
    Saddle,
    Uniqueness,
    Distributional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Energy scheme for gamma < 3, distributional beyond.
    #[default]
    Auto,
    Distributional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub gamma: f64,
    pub r: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "one")]
    pub dimension: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "identity")]
    pub a: String,
    #[serde(default = "identity")]
    pub m: String,
    /// Constant frozen potential for `single` runs.
    #[serde(default = "one_f")]
    pub v: f64,
    /// Cutoff of the coupling map; defaults to twice `c0`.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_outer_tol")]
    pub outer_tol: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default)]
    pub eps_ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub margins: Option<Vec<f64>>,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_resolution() -> usize {
    257
}
fn identity() -> String {
    "identity".into()
}
fn default_outer_tol() -> f64 {
    1e-8
}
fn default_max_outer() -> usize {
    500
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub gammas: Vec<f64>,
    pub rs: Vec<f64>,
    pub resolutions: Vec<usize>,
    pub n_schedules: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticOptions {
    /// Boundary layer width for exponent fits.
    pub layer: f64,
    /// Interior region `{d >= margin}` for the positivity gate.
    pub positivity_margin: f64,
    pub saddle_directions: usize,
    pub t_max: f64,
    pub trials: usize,
    pub hardy_limit: f64,
    pub energy_change: f64,
}

impl Default for DiagnosticOptions {
    fn default() -> Self {
        Self {
            layer: 0.05,
            positivity_margin: 0.1,
            saddle_directions: 200,
            t_max: 1024.0,
            trials: 5,
            hardy_limit: 4.05,
            energy_change: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub schedule: RegularizationSchedule,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default)]
    pub diagnostics: DiagnosticOptions,
}

/// One point of a sweep or refinement study.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub gamma: f64,
    pub r: f64,
    pub resolution: usize,
    pub sched: RegularizationSchedule,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn params_for(&self, gamma: f64, r: f64) -> Result<RegimeParams> {
        match self.problem.scheme {
            Scheme::Auto => RegimeParams::new(gamma, r),
            Scheme::Distributional => RegimeParams::distributional(gamma, r),
        }
    }

    /// Base point, or the full grid of sweep points for `sweep`, or the resolution ladder
    /// for `refinement`.
    pub fn points(&self) -> Vec<Point> {
        let p = &self.problem;
        let base = Point {
            gamma: p.gamma,
            r: p.r,
            resolution: p.resolution,
            sched: self.schedule.clone(),
        };
        match self.kind {
            ExperimentKind::Sweep => {
                let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
                let gammas = or(&self.sweep.gammas, p.gamma);
                let rs = or(&self.sweep.rs, p.r);
                let res = if self.sweep.resolutions.is_empty() { vec![p.resolution] } else { self.sweep.resolutions.clone() };
                let scheds = if self.sweep.n_schedules.is_empty() {
                    vec![self.schedule.n_values.clone()]
                } else {
                    self.sweep.n_schedules.clone()
                };
                let mut out = Vec::new();
                for &gamma in &gammas {
                    for &r in &rs {
                        for &resolution in &res {
                            for ns in &scheds {
                                let mut sched = self.schedule.clone();
                                sched.n_values = ns.clone();
                                out.push(Point { gamma, r, resolution, sched });
                            }
                        }
                    }
                }
                out
            }
            ExperimentKind::Refinement => self
                .sweep
                .resolutions
                .iter()
                .map(|&resolution| Point { resolution, ..base.clone() })
                .collect(),
            _ => vec![base],
        }
    }

    pub fn system_config(&self, pt: &Point, seed: u64) -> Result<SystemConfig> {
        let p = &self.problem;
        let mut cfg = SystemConfig::new(self.params_for(pt.gamma, pt.r)?, MeshSpec::unit(p.dimension, pt.resolution));
        cfg.sched = pt.sched.clone();
        cfg.sigma = p.sigma.unwrap_or(2.0 * cfg.sched.c0);
        cfg.outer_tol = p.outer_tol;
        cfg.max_outer = p.max_outer;
        cfg.a = p.a.clone();
        cfg.m = p.m.clone();
        cfg.seed = seed;
        if let Some(e) = &p.eps_ladder {
            cfg.eps_ladder = e.clone();
        }
        if let Some(m) = &p.margins {
            cfg.margins = m.clone();
        }
        Ok(cfg)
    }

    /// Checks every point before anything is solved. All failures come back as
    /// [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: String| Error::Config(msg);
        let p = &self.problem;
        if !(p.dimension == 1 || p.dimension == 2) {
            return Err(cfg_err(format!("dimension must be 1 or 2, got {}", p.dimension)));
        }
        for preset in [&p.a, &p.m] {
            CoefficientPreset::parse(preset).map_err(|e| cfg_err(e.to_string()))?;
        }
        if !(p.v >= 0.0 && p.v.is_finite()) {
            return Err(cfg_err(format!("frozen potential v must be nonnegative, got {}", p.v)));
        }
        let d = &self.diagnostics;
        if !(d.layer > 0.0 && d.layer < 0.5) || !(d.positivity_margin > 0.0) {
            return Err(cfg_err("diagnostics.layer must lie in (0, 0.5) and positivity_margin must be positive".into()));
        }
        match self.kind {
            ExperimentKind::Refinement if self.sweep.resolutions.len() < 2 => {
                return Err(cfg_err("refinement needs at least 2 entries in sweep.resolutions".into()));
            }
            ExperimentKind::Uniqueness if d.trials < 2 => {
                return Err(cfg_err("uniqueness needs diagnostics.trials >= 2".into()));
            }
            ExperimentKind::Saddle if d.saddle_directions == 0 || !(d.t_max >= 2.0) => {
                return Err(cfg_err("saddle needs saddle_directions >= 1 and t_max >= 2".into()));
            }
            _ => {}
        }
        for (i, pt) in self.points().iter().enumerate() {
            let params = self.params_for(pt.gamma, pt.r).map_err(|e| {
                cfg_err(format!(
                    "point {i} (gamma = {}, r = {}) violates the admissibility rule \
                     (energy regimes: 0 < gamma < 3 and r > max(0, 1 - gamma); \
                     distributional: gamma >= 1 and r > 0): {e}",
                    pt.gamma, pt.r
                ))
            })?;
            let cfg = self.system_config(pt, self.seed)?;
            cfg.validate().map_err(|e| cfg_err(format!("point {i}: {e}")))?;
            MeshSpec::unit(p.dimension, pt.resolution).build().map_err(|e| cfg_err(format!("point {i}: {e}")))?;
            if self.kind == ExperimentKind::Saddle && !(params.gamma < 1.0 && params.r >= 1.0) {
                return Err(cfg_err(format!(
                    "saddle runs need gamma < 1 and r >= 1, got gamma = {}, r = {}",
                    params.gamma, params.r
                )));
            }
            if self.kind == ExperimentKind::Distributional && params.regime != Regime::Distributional {
                return Err(cfg_err(format!(
                    "distributional runs need gamma >= 3 or scheme = \"distributional\", got gamma = {}",
                    params.gamma
                )));
            }
        }
        Ok(())
    }
}

/// Reads and validates a config file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Preset names accepted in `problem.a` and `problem.m`.
pub fn list_presets() -> Vec<&'static str> {
    CoefficientPreset::NAMES.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateStatus {
    Pass,
    Fail,
    NotApplicable,
}

impl GateStatus {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Fail => "fail",
            Self::NotApplicable => "n/a",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub status: GateStatus,
    pub value: Option<f64>,
    pub tolerance: Option<f64>,
    /// The property the gate checks, or `plumbing` for solver bookkeeping.
    pub anchor: String,
}

impl Gate {
    fn upper(name: &str, value: f64, tol: f64, anchor: &str) -> Self {
        Self {
            name: name.into(),
            status: if value <= tol { GateStatus::Pass } else { GateStatus::Fail },
            value: Some(value),
            tolerance: Some(tol),
            anchor: anchor.into(),
        }
    }

    fn check(name: &str, ok: bool, value: f64, tol: f64, anchor: &str) -> Self {
        Self {
            name: name.into(),
            status: if ok { GateStatus::Pass } else { GateStatus::Fail },
            value: Some(value),
            tolerance: Some(tol),
            anchor: anchor.into(),
        }
    }

    fn na(name: &str, value: Option<f64>, anchor: &str) -> Self {
        Self {
            name: name.into(),
            status: GateStatus::NotApplicable,
            value,
            tolerance: None,
            anchor: anchor.into(),
        }
    }
}

pub const ANCHOR_CAP: &str = "sup bound u <= min(|v|^(1/(1-r-gamma)), C0)";
pub const ANCHOR_POSITIVITY: &str = "u > 0 on compact subsets";
pub const ANCHOR_BARRIER: &str = "subsolution c3 phi1^tau - 1/n lies below u";
pub const ANCHOR_EXPONENT: &str = "boundary decay u ~ d^(2/(gamma+1))";
pub const ANCHOR_ENERGY: &str = "uniform H1 bound for gamma < 3";
pub const ANCHOR_LOCAL: &str = "local H1 bound away from the boundary";
pub const ANCHOR_HARDY: &str = "Hardy inequality, 1D constant 4";
pub const ANCHOR_SADDLE: &str = "J(u,z) <= J(u,v) <= J(w,v)";
pub const ANCHOR_PROBE: &str = "J unbounded above and below";
pub const ANCHOR_UNIQUENESS: &str = "uniqueness for r >= 1";
pub const ANCHOR_EPS: &str = "(u - eps)^+ has finite energy";
pub const PLUMBING: &str = "plumbing";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub kind: ExperimentKind,
    pub gates: Vec<Gate>,
    pub details: BTreeMap<String, serde_json::Value>,
}

impl DiagnosticsReport {
    fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            gates: Vec::new(),
            details: BTreeMap::new(),
        }
    }

    fn detail(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.details.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.status != GateStatus::Fail)
    }

    pub fn failing(&self) -> Vec<&Gate> {
        self.gates.iter().filter(|g| g.status == GateStatus::Fail).collect()
    }

    /// Fixed-width table of all gates.
    pub fn table(&self) -> String {
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into());
        let width = self.gates.iter().map(|g| g.name.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:<6}  {:>13}  {:>13}  anchor", "gate", "status", "value", "tolerance");
        for g in &self.gates {
            let _ = writeln!(
                out,
                "{:<width$}  {:<6}  {:>13}  {:>13}  {}",
                g.name,
                g.status.label(),
                fmt(g.value),
                fmt(g.tolerance),
                g.anchor
            );
        }
        let _ = writeln!(out, "overall: {}", if self.passed() { "pass" } else { "fail" });
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: DiagnosticsReport,
}

/// Thread pool sized by [`WORKERS_ENV`], or rayon's default when unset.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got 0")));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

/// Parses `config_path` and runs it into its `output_dir` (relative paths resolve
/// against the working directory).
pub fn run(config_path: &Path) -> Result<RunOutcome> {
    let cfg = validate_config(config_path)?;
    let dir = cfg.output_dir.clone();
    run_config(&cfg, &dir)
}

/// Runs a validated config into `dir`.
pub fn run_config(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let pool = worker_pool()?;
    let report = pool.install(|| match cfg.kind {
        ExperimentKind::Single => run_single(cfg, dir),
        ExperimentKind::Coupled => run_coupled(cfg, dir),
        ExperimentKind::Sweep => run_sweep(cfg, dir),
        ExperimentKind::Refinement => run_refinement(cfg, dir),
        ExperimentKind::Saddle => run_saddle(cfg, dir),
        ExperimentKind::Uniqueness => run_uniqueness(cfg, dir),
        ExperimentKind::Distributional => run_distributional(cfg, dir),
    })?;
    finish(dir, &report)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        report,
    })
}

fn finish(dir: &Path, report: &DiagnosticsReport) -> Result<()> {
    std::fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(report)? + "\n")?;
    std::fs::write(dir.join("summary.txt"), report.table())?;
    Ok(())
}

/// Gates shared by every kind that produces a `u`: cap, positivity, barrier, exponent
/// fit, Hardy quotient.
fn solution_gates(
    rep: &mut DiagnosticsReport,
    prefix: &str,
    u: &GridFunction,
    v_linf: f64,
    op_a: &DiscreteOperator,
    params: &RegimeParams,
    sched: &RegularizationSchedule,
    opts: &DiagnosticOptions,
) -> Result<()> {
    let name = |s: &str| format!("{prefix}{s}");
    let cap = match params.regime {
        Regime::Distributional => sched.c0,
        _ => linfty_cap(v_linf, params, sched.c0)?,
    };
    rep.gates.push(Gate::upper(&name("cap"), u.max() - cap, 1e-10, ANCHOR_CAP));

    let pos = interior_positivity(u, opts.positivity_margin)?;
    rep.gates.push(Gate::check(&name("positivity"), pos > 0.0, pos, 0.0, ANCHOR_POSITIVITY));

    if params.gamma > 1.0 {
        let eig = principal_eigenpair(op_a, 1e-10)?;
        let c3 = subsolution_constant(&eig, op_a.beta(), v_linf, params)?;
        let w = build_subsolution(&eig, c3, sched.final_n(), params);
        let b = verify_barrier(u, &w, params.tau(), 10.0 * sched.inner_tol)?;
        rep.gates.push(Gate::upper(&name("barrier"), b.violation_fraction, 0.0, ANCHOR_BARRIER));
        rep.detail(&name("barrier"), &b)?;
    } else {
        rep.gates.push(Gate::na(&name("barrier"), None, ANCHOR_BARRIER));
    }

    match fit_boundary_exponent(u, opts.layer) {
        Ok(fit) => {
            let rel = (fit.tau_fit - params.tau()).abs() / params.tau();
            rep.detail(&name("exponent_fit"), fit)?;
            if params.gamma > 1.0 {
                rep.gates.push(Gate::check(&name("exponent_fit"), rel <= 0.1 && fit.r2 >= 0.98, rel, 0.1, ANCHOR_EXPONENT));
            } else {
                rep.gates.push(Gate::na(&name("exponent_fit"), Some(rel), ANCHOR_EXPONENT));
            }
        }
        Err(Error::TooFewNodes { .. }) => rep.gates.push(Gate::na(&name("exponent_fit"), None, ANCHOR_EXPONENT)),
        Err(e) => return Err(e),
    }

    let q = hardy_quotient(u)?;
    if u.mesh().dimension() == 1 {
        rep.gates.push(Gate::upper(&name("hardy"), q, opts.hardy_limit, ANCHOR_HARDY));
    } else {
        rep.gates.push(Gate::na(&name("hardy"), Some(q), ANCHOR_HARDY));
    }
    Ok(())
}

fn energy_gate(rep: &mut DiagnosticsReport, prefix: &str, trace: &ConvergenceTrace, params: &RegimeParams, tol: f64) {
    let change = trace.h1_relative_change();
    let name = format!("{prefix}energy_bound");
    match (params.regime, change) {
        (Regime::Distributional, c) | (_, c @ None) => rep.gates.push(Gate::na(&name, c, ANCHOR_ENERGY)),
        (_, Some(c)) => rep.gates.push(Gate::upper(&name, c, tol, ANCHOR_ENERGY)),
    }
}

fn outer_gate(rep: &mut DiagnosticsReport, prefix: &str, pair: &SolutionPair, cfg: &SystemConfig) {
    let last = pair.outer.last().map(|s| s.du.max(s.dv)).unwrap_or(f64::INFINITY);
    rep.gates.push(Gate::upper(&format!("{prefix}outer_convergence"), last, cfg.outer_tol, PLUMBING));
}

fn run_single(cfg: &ExperimentConfig, dir: &Path) -> Result<DiagnosticsReport> {
    let pt = &cfg.points()[0];
    let sys = cfg.system_config(pt, cfg.seed)?;
    let ops = sys.operators()?;
    let v = GridFunction::constant(&ops.mesh, cfg.problem.v);
    let (u, trace) = match sys.params.regime {
        Regime::Distributional => distributional_continuation(&ops.a, &v, &sys.params, &sys.sched)?,
        _ => continuation_solve(&ops.a, &v, &sys.params, &sys.sched)?,
    };
    let mut rep = DiagnosticsReport::new(cfg.kind);
    solution_gates(&mut rep, "", &u, v.linf(), &ops.a, &sys.params, &sys.sched, &cfg.diagnostics)?;
    energy_gate(&mut rep, "", &trace, &sys.params, cfg.diagnostics.energy_change);
    rep.detail("norms", u.norms())?;
    rep.detail("trace_warning", &trace.warning)?;
    u.write_csv(&dir.join("u.csv"))?;
    v.write_csv(&dir.join("v.csv"))?;
    ops.mesh.write_nodes_csv(&dir.join("nodes.csv"))?;
    trace.write_csv(&dir.join("trace.csv"))?;
    Ok(rep)
}

/// Continuation along the schedule with the distributional scheme.
fn distributional_continuation(
    op: &DiscreteOperator,
    v: &GridFunction,
    params: &RegimeParams,
    sched: &RegularizationSchedule,
) -> Result<(GridFunction, ConvergenceTrace)> {
    let mut trace = ConvergenceTrace::default();
    let mut prev: Option<GridFunction> = None;
    for &n in &sched.n_values {
        let sol = crate::singular::solve_regularized_distributional(op, v, n, params, sched, prev.as_ref())?;
        let l2_diff = prev.as_ref().map(|p| sol.u.l2_distance(p)).transpose()?;
        trace.steps.push(crate::singular::TraceStep {
            n,
            linf: sol.u.linf(),
            h1: sol.u.h1_seminorm(),
            l2_diff,
            inner_iters: sol.iterations,
            residual: sol.residual,
        });
        prev = Some(sol.u);
    }
    Ok((prev.expect("schedule is nonempty"), trace))
}

fn solve_pair(sys: &SystemConfig, ops: &SystemOperators) -> Result<SolutionPair> {
    match sys.params.regime {
        Regime::Distributional => solve_system_distributional_with(sys, ops),
        _ => solve_system_with(sys, ops, None),
    }
}

fn pair_gates(rep: &mut DiagnosticsReport, prefix: &str, pair: &SolutionPair, sys: &SystemConfig, ops: &SystemOperators, opts: &DiagnosticOptions) -> Result<()> {
    solution_gates(rep, prefix, &pair.u, pair.v.linf(), &ops.a, &sys.params, &sys.sched, opts)?;
    outer_gate(rep, prefix, pair, sys);
    match &pair.distributional {
        Some(d) => {
            let eps = d.eps_change.iter().cloned().fold(0.0, f64::max);
            let local = d.local_change.iter().cloned().fold(0.0, f64::max);
            rep.gates.push(Gate::upper(&format!("{prefix}eps_stabilization"), eps, d.stabilization_tol, ANCHOR_EPS));
            rep.gates.push(Gate::upper(&format!("{prefix}local_energy"), local, d.stabilization_tol, ANCHOR_LOCAL));
            rep.gates.push(Gate::na(&format!("{prefix}energy_bound"), None, ANCHOR_ENERGY));
        }
        None => energy_gate(rep, prefix, &pair.continuation, &sys.params, opts.energy_change),
    }
    rep.detail(&format!("{prefix}summary"), &pair.summary)?;
    Ok(())
}

fn run_coupled(cfg: &ExperimentConfig, dir: &Path) -> Result<DiagnosticsReport> {
    let sys = cfg.system_config(&cfg.points()[0], cfg.seed)?;
    let ops = sys.operators()?;
    let pair = solve_pair(&sys, &ops)?;
    let mut rep = DiagnosticsReport::new(cfg.kind);
    pair_gates(&mut rep, "", &pair, &sys, &ops, &cfg.diagnostics)?;
    pair.save(dir, &sys, &rep)?;
    Ok(rep)
}

fn run_distributional(cfg: &ExperimentConfig, dir: &Path) -> Result<DiagnosticsReport> {
    let sys = cfg.system_config(&cfg.points()[0], cfg.seed)?;
    let ops = sys.operators()?;
    let pair = solve_system_distributional_with(&sys, &ops)?;
    let mut rep = DiagnosticsReport::new(cfg.kind);
    pair_gates(&mut rep, "", &pair, &sys, &ops, &cfg.diagnostics)?;
    pair.save(dir, &sys, &rep)?;
    if let Some(d) = &pair.distributional {
        write_distributional_csv(d, &dir.join("distributional.csv"))?;
        std::fs::write(dir.join("distributional.json"), serde_json::to_string_pretty(d)? + "\n")?;
    }
    Ok(rep)
}

fn write_distributional_csv(d: &crate::coupled::DistributionalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["n".to_string(), "u_linf".into(), "v_linf".into(), "h1".into()];
    header.extend(d.eps_ladder.iter().map(|e| format!("eps_h1_{e}")));
    header.extend(d.margins.iter().map(|m| format!("local_h1_{m}")));
    w.write_record(&header)?;
    for s in &d.steps {
        let mut row = vec![fmt_f64(s.n), fmt_f64(s.u_linf), fmt_f64(s.v_linf), fmt_f64(s.h1)];
        row.extend(s.eps_h1.iter().map(|x| fmt_f64(*x)));
        row.extend(s.local_h1.iter().map(|x| fmt_f64(*x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<DiagnosticsReport> {
    let points = cfg.points();
    let results: Vec<Result<(DiagnosticsReport, SolutionPair)>> = points
        .par_iter()
        .enumerate()
        .map(|(i, pt)| {
            let sys = cfg.system_config(pt, cfg.seed.wrapping_add(i as u64))?;
            let ops = sys.operators()?;
            let pair = solve_pair(&sys, &ops)?;
            let mut rep = DiagnosticsReport::new(ExperimentKind::Coupled);
            pair_gates(&mut rep, "", &pair, &sys, &ops, &cfg.diagnostics)?;
            pair.save(&dir.join(format!("point_{i:03}")), &sys, &rep)?;
            Ok((rep, pair))
        })
        .collect();
    let mut rep = DiagnosticsReport::new(cfg.kind);
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["point", "gamma", "r", "resolution", "n_final", "tau_expected", "tau_fit", "h1", "iterations", "status"])?;
    for (i, (pt, res)) in points.iter().zip(results).enumerate() {
        let (sub, pair) = res?;
        let tau_fit = sub
            .details
            .get("exponent_fit")
            .and_then(|v| v.get("tau_fit"))
            .and_then(|v| v.as_f64());
        w.write_record([
            format!("point_{i:03}"),
            fmt_f64(pt.gamma),
            fmt_f64(pt.r),
            pt.resolution.to_string(),
            fmt_f64(pt.sched.final_n()),
            fmt_f64(2.0 / (pt.gamma + 1.0)),
            tau_fit.map(fmt_f64).unwrap_or_default(),
            fmt_f64(pair.summary.u_h1),
            pair.outer.len().to_string(),
            if sub.passed() { "pass".into() } else { "fail".into() },
        ])?;
        for mut g in sub.gates {
            g.name = format!("point_{i:03}/{}", g.name);
            rep.gates.push(g);
        }
    }
    w.flush()?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub resolution: usize,
    pub h: f64,
    pub h1: f64,
    pub local_h1: f64,
    pub u_linf: f64,
    /// Relative H1 change over the last two continuation steps (energy regimes).
    pub continuation_change: Option<f64>,
}

/// Relative change between the last two entries.
fn last_change(xs: &[f64]) -> f64 {
    let k = xs.len();
    (xs[k - 1] - xs[k - 2]).abs() / xs[k - 1].abs().max(f64::MIN_POSITIVE)
}

fn run_refinement(cfg: &ExperimentConfig, dir: &Path) -> Result<DiagnosticsReport> {
    let points = cfg.points();
    let margin = cfg.problem.margins.as_ref().and_then(|m| m.last().copied()).unwrap_or(0.2);
    let rows: Vec<Result<RefinementRow>> = points
        .par_iter()
        .map(|pt| {
            let sys = cfg.system_config(pt, cfg.seed)?;
            let ops = sys.operators()?;
            let pair = solve_pair(&sys, &ops)?;
            Ok(RefinementRow {
                resolution: pt.resolution,
                h: ops.mesh.h(),
                h1: pair.u.h1_seminorm(),
                local_h1: local_h1(&pair.u, margin),
                u_linf: pair.u.linf(),
                continuation_change: pair.continuation.h1_relative_change(),
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(dir.join("refinement.csv"))?;
    w.write_record(["resolution", "h", "h1", "local_h1", "u_linf"])?;
    for r in &rows {
        w.write_record([r.resolution.to_string(), fmt_f64(r.h), fmt_f64(r.h1), fmt_f64(r.local_h1), fmt_f64(r.u_linf)])?;
    }
    w.flush()?;
    let params = cfg.params_for(cfg.problem.gamma, cfg.problem.r)?;
    let tol = cfg.diagnostics.energy_change;
    let h1: Vec<f64> = rows.iter().map(|r| r.h1).collect();
    let local: Vec<f64> = rows.iter().map(|r| r.local_h1).collect();
    let mut rep = DiagnosticsReport::new(cfg.kind);
    let local_change = last_change(&local);
    rep.gates.push(Gate::upper("local_energy", local_change, tol, ANCHOR_LOCAL));
    match params.regime {
        Regime::Distributional => {
            let growing = h1.windows(2).all(|p| p[1] > p[0]);
            rep.gates.push(Gate::check("global_energy_growth", growing, last_change(&h1), 0.0, ANCHOR_ENERGY));
        }
        _ => {
            rep.gates.push(Gate::upper("energy_bound", last_change(&h1), tol, ANCHOR_ENERGY));
            let cont = rows.last().and_then(|r| r.continuation_change).unwrap_or(f64::INFINITY);
            rep.gates.push(Gate::upper("continuation_energy", cont, tol, ANCHOR_ENERGY));
        }
    }
    rep.detail("rows", &rows)?;
    rep.detail("local_margin", margin)?;
    Ok(rep)
}

fn run_saddle(cfg: &ExperimentConfig, dir: &Path) -> Result<DiagnosticsReport> {
    let sys = cfg.system_config(&cfg.points()[0], cfg.seed)?;
    let ops = sys.operators()?;
    let pair = solve_system_with(&sys, &ops, None)?;
    let opts = &cfg.diagnostics;
    let (saddle, samples) = saddle_test(&pair, &ops.a, &ops.m, opts.saddle_directions, cfg.seed)?;
    let probe = unboundedness_probe(&pair, &ops.a, &ops.m, opts.t_max)?;
    let mut rep = DiagnosticsReport::new(cfg.kind);
    outer_gate(&mut rep, "", &pair, &sys);
    rep.gates.push(Gate::upper("saddle", saddle.violations.len() as f64, 0.0, ANCHOR_SADDLE));
    let err = probe.growth_rel_error.max(probe.decay_rel_error);
    rep.gates.push(Gate::check("unboundedness", probe.passed(0.02), err, 0.02, ANCHOR_PROBE));
    rep.detail("saddle", &saddle)?;
    rep.detail("probe", &probe)?;
    pair.save(dir, &sys, &rep)?;
    write_saddle_csv(&samples, &dir.join("saddle_samples.csv"))?;
    Ok(rep)
}

fn run_uniqueness(cfg: &ExperimentConfig, dir: &Path) -> Result<DiagnosticsReport> {
    let sys = cfg.system_config(&cfg.points()[0], cfg.seed)?;
    let u = uniqueness_experiment(&sys, cfg.diagnostics.trials)?;
    let mut rep = DiagnosticsReport::new(cfg.kind);
    let dist = u.max_u_distance.max(u.max_v_distance);
    rep.gates.push(match u.passed {
        Some(ok) => Gate::check("uniqueness", ok, dist, u.threshold, ANCHOR_UNIQUENESS),
        None => Gate::na("uniqueness", Some(dist), ANCHOR_UNIQUENESS),
    });
    std::fs::write(dir.join("uniqueness.json"), u.to_json()? + "\n")?;
    rep.detail("uniqueness", &u)?;
    Ok(rep)
}

fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::Config(format!("{}: missing column {column}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let s = rec.get(idx).unwrap_or("");
        out.push(s.parse::<f64>().map_err(|e| Error::Config(format!("{}: bad value {s:?}: {e}", path.display())))?);
    }
    Ok(out)
}

fn has_columns(path: &Path, cols: &[&str]) -> bool {
    csv::Reader::from_path(path)
        .and_then(|mut r| r.headers().cloned())
        .map(|h| cols.iter().all(|c| h.iter().any(|x| x == *c)))
        .unwrap_or(false)
}

/// Emits tidy plot tables next to a completed run: `boundary_layer.csv` (d,u,log_d,log_u),
/// `continuation_curve.csv` (n,H1) and `saddle_curves.csv` (direction_id,t,J), whichever
/// the run supports. Sweep directories are processed point by point.
pub fn emit_plot_data(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.join("diagnostics.json").is_file() || !dir.join("config.toml").is_file() && !dir.join("config.json").is_file() {
        return Err(Error::IncompleteRun(dir.to_path_buf()));
    }
    let mut written = Vec::new();
    if dir.join("u.csv").is_file() && dir.join("nodes.csv").is_file() {
        let d = read_column(&dir.join("nodes.csv"), "dist")?;
        let u = read_column(&dir.join("u.csv"), "value")?;
        if d.len() != u.len() {
            return Err(Error::IncompleteRun(dir.to_path_buf()));
        }
        let mut rows: Vec<(f64, f64)> = d.into_iter().zip(u).filter(|(d, u)| *d > 0.0 && *u > 0.0).collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let path = dir.join("boundary_layer.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["d", "u", "log_d", "log_u"])?;
        for (d, u) in rows {
            w.write_record([fmt_f64(d), fmt_f64(u), fmt_f64(d.ln()), fmt_f64(u.ln())])?;
        }
        w.flush()?;
        written.push(path);
    }
    for name in ["continuation.csv", "trace.csv", "distributional.csv"] {
        let src = dir.join(name);
        if src.is_file() && has_columns(&src, &["n", "h1"]) {
            let n = read_column(&src, "n")?;
            let h1 = read_column(&src, "h1")?;
            let path = dir.join("continuation_curve.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["n", "H1"])?;
            for (n, h) in n.into_iter().zip(h1) {
                w.write_record([fmt_f64(n), fmt_f64(h)])?;
            }
            w.flush()?;
            written.push(path);
            break;
        }
    }
    let samples = dir.join("saddle_samples.csv");
    if samples.is_file() {
        let rows = crate::variational::read_saddle_csv(&samples)?;
        let path = dir.join("saddle_curves.csv");
        write_saddle_csv(&rows, &path)?;
        written.push(path);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("point_")))
        .collect();
    subdirs.sort();
    for sub in subdirs {
        written.extend(emit_plot_data(&sub)?);
    }
    if written.is_empty() {
        return Err(Error::IncompleteRun(dir.to_path_buf()));
    }
    Ok(written)
}
