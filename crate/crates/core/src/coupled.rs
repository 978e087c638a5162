//! The coupled system, solved by alternating the two equations: the linear `v`-equation
//! `K_M v = T_sigma(u)^r` and the regularized `u`-equation with `v` frozen.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elliptic::{assemble, DiscreteOperator};
use crate::error::{Error, Result};
use crate::field::{CoefficientField, GridFunction};
use crate::mesh::{fmt_f64, Mesh, MeshSpec};
use crate::singular::{
    continuation_solve, linfty_cap, local_h1, solve_regularized, solve_regularized_distributional,
    ConvergenceTrace, Regime, RegimeParams, RegularizationSchedule, RegularizedSolution,
};

const LINEAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub params: RegimeParams,
    /// Truncation level of `T_sigma` in the `v`-equation source; must exceed `sched.c0`.
    pub sigma: f64,
    pub outer_tol: f64,
    pub max_outer: usize,
    pub sched: RegularizationSchedule,
    pub mesh: MeshSpec,
    /// Coefficient preset of the `u`-equation.
    pub a: String,
    /// Coefficient preset of the `v`-equation.
    pub m: String,
    pub seed: u64,
    /// Levels `eps` for the `(u - eps)^+` energies of the distributional scheme.
    #[serde(default = "default_eps_ladder")]
    pub eps_ladder: Vec<f64>,
    /// Margins of the interior regions `{d >= margin}` used for local energies.
    #[serde(default = "default_margins")]
    pub margins: Vec<f64>,
}

fn default_eps_ladder() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}

fn default_margins() -> Vec<f64> {
    vec![0.1, 0.2]
}

impl SystemConfig {
    pub fn new(params: RegimeParams, mesh: MeshSpec) -> Self {
        let sched = RegularizationSchedule::default();
        Self {
            params,
            sigma: 2.0 * sched.c0,
            outer_tol: 1e-8,
            max_outer: 500,
            sched,
            mesh,
            a: "identity".into(),
            m: "identity".into(),
            seed: 0,
            eps_ladder: default_eps_ladder(),
            margins: default_margins(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.sched.validate()?;
        if !(self.sigma > self.sched.c0) {
            return Err(Error::InvalidArgument(format!(
                "sigma = {} must exceed c0 = {}",
                self.sigma, self.sched.c0
            )));
        }
        if !(self.outer_tol > 0.0) || self.max_outer == 0 {
            return Err(Error::InvalidArgument("outer_tol and max_outer must be positive".into()));
        }
        if self.eps_ladder.iter().chain(&self.margins).any(|x| !(*x > 0.0)) {
            return Err(Error::InvalidArgument("eps ladder and margins must be positive".into()));
        }
        Ok(())
    }

    pub fn operators(&self) -> Result<SystemOperators> {
        let mesh = Arc::new(self.mesh.build()?);
        let a = assemble(&CoefficientField::preset(&self.a, &mesh)?)?;
        let m = assemble(&CoefficientField::preset(&self.m, &mesh)?)?;
        Ok(SystemOperators { mesh, a, m })
    }
}

#[derive(Debug, Clone)]
pub struct SystemOperators {
    pub mesh: Arc<Mesh>,
    pub a: DiscreteOperator,
    pub m: DiscreteOperator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub du: f64,
    pub dv: f64,
    pub inner_iters: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub u_linf: f64,
    pub v_linf: f64,
    pub u_h1: f64,
    pub v_h1: f64,
    /// Relative residual of `K_M v = u^r` at the returned pair.
    pub v_residual: f64,
    pub inner_residual: f64,
    pub outer_iterations: usize,
    /// Cap `b` implied by the final `v`.
    pub cap: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionalStep {
    pub n: f64,
    pub u_linf: f64,
    pub v_linf: f64,
    pub h1: f64,
    /// One entry per margin.
    pub local_h1: Vec<f64>,
    /// `|(u - eps)^+|_H1`, one entry per level.
    pub eps_h1: Vec<f64>,
    pub outer_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionalReport {
    pub eps_ladder: Vec<f64>,
    pub margins: Vec<f64>,
    pub steps: Vec<DistributionalStep>,
    /// Relative change over the last two steps, per level.
    pub eps_change: Vec<f64>,
    /// Relative change over the last two steps, per margin.
    pub local_change: Vec<f64>,
    pub stabilization_tol: f64,
    pub eps_stable: bool,
    pub local_stable: bool,
    /// Largest `|u|_inf + |v|_inf` along the schedule.
    pub linf_bound: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SolutionPair {
    pub u: GridFunction,
    pub v: GridFunction,
    pub params: RegimeParams,
    /// Outer alternation history; for the distributional scheme, all steps over the schedule.
    pub outer: Vec<OuterStep>,
    /// Continuation record of the starting iterate (energy regimes).
    pub continuation: ConvergenceTrace,
    pub summary: PairSummary,
    pub distributional: Option<DistributionalReport>,
}

fn relative_change(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        0.0
    } else {
        (b - a).abs() / a.abs().max(b.abs())
    }
}

fn v_source(u: &GridFunction, sigma: f64, r: f64) -> GridFunction {
    u.map(|x| x.clamp(0.0, sigma).powf(r))
}

/// Relative residual of `K_M v = u^r`.
pub fn v_equation_residual(op_m: &DiscreteOperator, u: &GridFunction, v: &GridFunction, r: f64) -> f64 {
    op_m.relative_residual(v, &u.map(|x| x.max(0.0).powf(r)))
}

struct Alternation {
    u: GridFunction,
    v: GridFunction,
    steps: Vec<OuterStep>,
    residual: f64,
}

fn alternate(
    cfg: &SystemConfig,
    ops: &SystemOperators,
    mut u: GridFunction,
    mut v: Option<GridFunction>,
    single: impl Fn(&GridFunction, &GridFunction) -> Result<RegularizedSolution>,
) -> Result<Alternation> {
    let r = cfg.params.r;
    let mut steps = Vec::new();
    let (mut du, mut dv) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..cfg.max_outer {
        let v_new = ops.m.solve_linear(&v_source(&u, cfg.sigma, r), LINEAR_TOL)?;
        let sol = single(&v_new, &u)?;
        du = sol.u.l2_distance(&u)?;
        dv = match &v {
            Some(prev) => v_new.l2_distance(prev)?,
            None => f64::INFINITY,
        };
        steps.push(OuterStep {
            du,
            dv,
            inner_iters: sol.iterations,
            residual: sol.residual,
        });
        u = sol.u;
        v = Some(v_new);
        if du < cfg.outer_tol && dv < cfg.outer_tol {
            let residual = steps.last().map_or(0.0, |s| s.residual);
            return Ok(Alternation {
                u,
                v: v.expect("set above"),
                steps,
                residual,
            });
        }
    }
    Err(Error::OuterNonConvergence {
        iterations: cfg.max_outer,
        du,
        dv,
    })
}

fn summarize(cfg: &SystemConfig, ops: &SystemOperators, alt: &Alternation, outer_iterations: usize) -> Result<PairSummary> {
    let max_u = alt.u.max();
    if max_u >= cfg.sigma {
        return Err(Error::CutoffActive {
            sigma: cfg.sigma,
            max_u,
        });
    }
    let cap = match cfg.params.regime {
        Regime::Distributional => cfg.sched.c0,
        _ => linfty_cap(alt.v.linf(), &cfg.params, cfg.sched.c0)?,
    };
    Ok(PairSummary {
        u_linf: alt.u.linf(),
        v_linf: alt.v.linf(),
        u_h1: alt.u.h1_seminorm(),
        v_h1: alt.v.h1_seminorm(),
        v_residual: v_equation_residual(&ops.m, &alt.u, &alt.v, cfg.params.r),
        inner_residual: alt.residual,
        outer_iterations,
        cap,
        sigma: cfg.sigma,
    })
}

/// Energy-regime solve starting from the `v = 0` continuation solution.
pub fn solve_system(cfg: &SystemConfig) -> Result<SolutionPair> {
    cfg.validate()?;
    let ops = cfg.operators()?;
    solve_system_with(cfg, &ops, None)
}

/// Energy-regime solve on prebuilt operators, optionally from a given first iterate `u`.
pub fn solve_system_with(cfg: &SystemConfig, ops: &SystemOperators, init: Option<&GridFunction>) -> Result<SolutionPair> {
    cfg.validate()?;
    if cfg.params.regime == Regime::Distributional {
        return Err(Error::Regime(
            "solve_system needs an energy regime; use the distributional solver".into(),
        ));
    }
    let params = cfg.params;
    let (u0, continuation) = match init {
        Some(u) => (u.clone(), ConvergenceTrace::default()),
        None => continuation_solve(&ops.a, &GridFunction::zeros(&ops.mesh), &params, &cfg.sched)?,
    };
    let n = cfg.sched.final_n();
    let alt = alternate(cfg, ops, u0, None, |v, warm| {
        solve_regularized(&ops.a, v, n, &params, &cfg.sched, Some(warm))
    })?;
    let summary = summarize(cfg, ops, &alt, alt.steps.len())?;
    Ok(SolutionPair {
        u: alt.u,
        v: alt.v,
        params,
        outer: alt.steps,
        continuation,
        summary,
        distributional: None,
    })
}

/// The distributional scheme: a full alternation at every `n` of the schedule, warm-started
/// from the previous `n`, with local and truncated energies recorded per step.
pub fn solve_system_distributional(cfg: &SystemConfig) -> Result<SolutionPair> {
    cfg.validate()?;
    let ops = cfg.operators()?;
    solve_system_distributional_with(cfg, &ops)
}

pub fn solve_system_distributional_with(cfg: &SystemConfig, ops: &SystemOperators) -> Result<SolutionPair> {
    cfg.validate()?;
    if cfg.params.regime != Regime::Distributional {
        return Err(Error::Regime(format!(
            "the distributional solver needs the distributional regime, got {}",
            cfg.params.regime.name()
        )));
    }
    let params = cfg.params;
    let zero = GridFunction::zeros(&ops.mesh);
    let first = cfg.sched.n_values[0];
    let mut u = solve_regularized_distributional(&ops.a, &zero, first, &params, &cfg.sched, None)?.u;
    let mut v: Option<GridFunction> = None;
    let mut outer = Vec::new();
    let mut steps = Vec::new();
    let mut last: Option<Alternation> = None;
    for &n in &cfg.sched.n_values {
        let alt = alternate(cfg, ops, u, v, |v, warm| {
            solve_regularized_distributional(&ops.a, v, n, &params, &cfg.sched, Some(warm))
        })?;
        steps.push(DistributionalStep {
            n,
            u_linf: alt.u.linf(),
            v_linf: alt.v.linf(),
            h1: alt.u.h1_seminorm(),
            local_h1: cfg.margins.iter().map(|m| local_h1(&alt.u, *m)).collect(),
            eps_h1: cfg
                .eps_ladder
                .iter()
                .map(|e| alt.u.positive_part_above(*e).h1_seminorm())
                .collect(),
            outer_iters: alt.steps.len(),
        });
        outer.extend(alt.steps.iter().cloned());
        u = alt.u.clone();
        v = Some(alt.v.clone());
        last = Some(alt);
    }
    let alt = last.expect("schedule is nonempty");
    let k = steps.len();
    let (prev, fin) = (&steps[k - 2], &steps[k - 1]);
    let eps_change: Vec<f64> = prev.eps_h1.iter().zip(&fin.eps_h1).map(|(a, b)| relative_change(*a, *b)).collect();
    let local_change: Vec<f64> = prev
        .local_h1
        .iter()
        .zip(&fin.local_h1)
        .map(|(a, b)| relative_change(*a, *b))
        .collect();
    let tol = 0.01;
    let eps_stable = eps_change.iter().all(|c| *c < tol);
    let local_stable = local_change.iter().all(|c| *c < tol);
    let warning = (!local_stable).then(|| format!("local H1 energies did not stabilize: changes {local_change:?}"));
    let report = DistributionalReport {
        eps_ladder: cfg.eps_ladder.clone(),
        margins: cfg.margins.clone(),
        linf_bound: steps.iter().map(|s| s.u_linf + s.v_linf).fold(0.0, f64::max),
        steps,
        eps_change,
        local_change,
        stabilization_tol: tol,
        eps_stable,
        local_stable,
        warning,
    };
    let summary = summarize(cfg, ops, &alt, outer.len())?;
    Ok(SolutionPair {
        u: alt.u,
        v: alt.v,
        params,
        outer,
        continuation: ConvergenceTrace::default(),
        summary,
        distributional: Some(report),
    })
}

/// Discrete `int |grad u|^2 xi^2`, with `xi^2` averaged over the two ends of each edge.
pub fn local_energy(u: &GridFunction, cutoff: &GridFunction) -> Result<f64> {
    u.check_same(cutoff)?;
    if let Some(k) = cutoff.values().iter().position(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidArgument(format!(
            "cutoff must take values in [0,1], got {} at node {k}",
            cutoff.values()[k]
        )));
    }
    let xi = cutoff.values();
    Ok(u.weighted_gradient_energy(|a, b| 0.5 * (xi[a] * xi[a] + xi[b] * xi[b])))
}

/// Smallest nodal value of
/// `(v u^(r-1) - vt ut^(r-1))(u - ut) - (1/r)(u^r - ut^r)(v - vt)`, which is nonnegative
/// for `r >= 1` by convexity of `s^r / r`.
pub fn convexity_gap(u: &GridFunction, v: &GridFunction, ut: &GridFunction, vt: &GridFunction, r: f64) -> Result<f64> {
    u.check_same(v)?;
    u.check_same(ut)?;
    u.check_same(vt)?;
    let mut gap = f64::INFINITY;
    for k in 0..u.values().len() {
        let (a, b) = (u.values()[k].max(0.0), ut.values()[k].max(0.0));
        let (p, q) = (v.values()[k], vt.values()[k]);
        let lhs = (p * a.powf(r - 1.0) - q * b.powf(r - 1.0)) * (a - b);
        let rhs = (a.powf(r) - b.powf(r)) * (p - q) / r;
        gap = gap.min(lhs - rhs);
    }
    Ok(gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub gamma: f64,
    pub r: f64,
    pub seeds: Vec<u64>,
    pub outer_iterations: Vec<usize>,
    pub max_u_distance: f64,
    pub max_v_distance: f64,
    pub threshold: f64,
    /// The collapse gate only applies for `r >= 1`.
    pub gate_applied: bool,
    pub passed: Option<bool>,
    pub convexity_checked: usize,
    pub convexity_violations: usize,
    pub min_convexity_gap: f64,
}

impl UniquenessReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Clipped smooth random field in `[0, b]` used as a first iterate.
pub fn random_initial_field(mesh: &Arc<Mesh>, seed: u64, b: f64) -> GridFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = b * rng.gen_range(0.05..1.0);
    let f = GridFunction::random_smooth(mesh, &mut rng, 4).map(|x| x.max(0.0));
    let f = if f.max() > 0.0 {
        f.scaled(1.0 / f.max())
    } else {
        f.map(|x| -x).axpy(1.0, &GridFunction::distance(mesh)).expect("same mesh")
    };
    f.map(|x| (amp * x).clamp(0.0, b))
}

/// Runs the energy solve from `trials` random first iterates with seeds `cfg.seed + i`.
pub fn uniqueness_experiment(cfg: &SystemConfig, trials: usize) -> Result<UniquenessReport> {
    if trials < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 trials, got {trials}")));
    }
    let seeds: Vec<u64> = (0..trials as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    uniqueness_from_seeds(cfg, &seeds)
}

pub fn uniqueness_from_seeds(cfg: &SystemConfig, seeds: &[u64]) -> Result<UniquenessReport> {
    cfg.validate()?;
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 trials".into()));
    }
    let ops = cfg.operators()?;
    let b = cfg.sched.c0;
    let r = cfg.params.r;
    let runs: Vec<(GridFunction, GridFunction, SolutionPair)> = seeds
        .par_iter()
        .map(|&s| {
            let init = random_initial_field(&ops.mesh, s, b);
            let v1 = ops.m.solve_linear(&v_source(&init, cfg.sigma, r), LINEAR_TOL)?;
            let pair = solve_system_with(cfg, &ops, Some(&init))?;
            Ok((init, v1, pair))
        })
        .collect::<Result<_>>()?;
    let (mut du, mut dv) = (0.0f64, 0.0f64);
    let mut checked = 0;
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            du = du.max(runs[i].2.u.l2_distance(&runs[j].2.u)?);
            dv = dv.max(runs[i].2.v.l2_distance(&runs[j].2.v)?);
            if r >= 1.0 {
                let gap = convexity_gap(&runs[i].0, &runs[i].1, &runs[j].0, &runs[j].1, r)?;
                let scale = runs[i].0.linf().max(runs[j].0.linf()).powf(r) * runs[i].1.linf().max(runs[j].1.linf());
                checked += 1;
                if gap < -1e-12 * scale.max(1.0) {
                    violations += 1;
                }
                min_gap = min_gap.min(gap);
            }
        }
    }
    let threshold = 10.0 * cfg.outer_tol;
    let gate_applied = r >= 1.0;
    Ok(UniquenessReport {
        gamma: cfg.params.gamma,
        r,
        seeds: seeds.to_vec(),
        outer_iterations: runs.iter().map(|x| x.2.outer.len()).collect(),
        max_u_distance: du,
        max_v_distance: dv,
        threshold,
        gate_applied,
        passed: gate_applied.then_some(du.max(dv) < threshold),
        convexity_checked: checked,
        convexity_violations: violations,
        min_convexity_gap: min_gap,
    })
}

impl SolutionPair {
    /// Writes `config.json`, `u.csv`, `v.csv`, `trace.csv`, `nodes.csv` and `diagnostics.json`,
    /// plus `continuation.csv` when a continuation record exists.
    pub fn save(&self, dir: &Path, cfg: &SystemConfig, diagnostics: &impl Serialize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
        self.u.write_csv(&dir.join("u.csv"))?;
        self.v.write_csv(&dir.join("v.csv"))?;
        self.u.mesh().write_nodes_csv(&dir.join("nodes.csv"))?;
        write_outer_csv(&self.outer, &dir.join("trace.csv"))?;
        if !self.continuation.steps.is_empty() {
            self.continuation.write_csv(&dir.join("continuation.csv"))?;
        }
        std::fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(diagnostics)? + "\n")?;
        Ok(())
    }
}

pub fn write_outer_csv(steps: &[OuterStep], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "du", "dv", "inner_iters", "residual"])?;
    for (k, s) in steps.iter().enumerate() {
        w.write_record([
            (k + 1).to_string(),
            fmt_f64(s.du),
            fmt_f64(s.dv),
            s.inner_iters.to_string(),
            fmt_f64(s.residual),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back `config.json`, `u.csv` and `v.csv` of a saved pair.
pub fn load_pair(dir: &Path) -> Result<(SystemConfig, GridFunction, GridFunction)> {
    for name in ["config.json", "u.csv", "v.csv"] {
        if !dir.join(name).is_file() {
            return Err(Error::IncompleteRun(dir.to_path_buf()));
        }
    }
    let cfg: SystemConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
    let mesh = Arc::new(cfg.mesh.build()?);
    let u = GridFunction::read_csv(&mesh, &dir.join("u.csv"))?;
    let v = GridFunction::read_csv(&mesh, &dir.join("v.csv"))?;
    Ok((cfg, u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg_1d(g: f64, r: f64, res: usize) -> SystemConfig {
        SystemConfig::new(RegimeParams::new(g, r).unwrap(), MeshSpec::unit(1, res))
    }

    #[test]
    fn config_validation() {
        let mut cfg = cfg_1d(0.5, 1.0, 33);
        assert!(cfg.validate().is_ok());
        cfg.sigma = cfg.sched.c0;
        assert!(cfg.validate().is_err());
        let mut cfg = cfg_1d(0.5, 1.0, 33);
        cfg.outer_tol = 0.0;
        assert!(cfg.validate().is_err());
        let json = serde_json::to_string(&cfg_1d(2.0, 1.0, 33)).unwrap();
        let back: SystemConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg_1d(2.0, 1.0, 33));
    }

    #[test]
    fn energy_pair_is_a_fixed_point() {
        let cfg = cfg_1d(0.5, 1.0, 129);
        let pair = solve_system(&cfg).unwrap();
        let ops = cfg.operators().unwrap();
        // re-solving the v-equation with the converged u reproduces v
        let v = ops.m.solve_linear(&pair.u.map(|x| x.powf(cfg.params.r)), 1e-12).unwrap();
        assert!(v.l2_distance(&pair.v).unwrap() < cfg.outer_tol);
        assert!(pair.summary.v_residual < 1e-6);
        assert!(pair.u.max() < cfg.sigma);
        for &g in ops.a.interior() {
            assert!(pair.u.values()[g] > 0.0);
            assert!(pair.v.values()[g] > 0.0);
        }
        assert_eq!(pair.u.values()[0], 0.0);
        assert_eq!(pair.v.values()[128], 0.0);
        // one more alternation step moves nothing
        let vn = ops.m.solve_linear(&pair.u.map(|x| x.powf(cfg.params.r)), 1e-12).unwrap();
        let un = solve_regularized(&ops.a, &vn, cfg.sched.final_n(), &cfg.params, &cfg.sched, Some(&pair.u))
            .unwrap()
            .u;
        assert!(un.l2_distance(&pair.u).unwrap() < cfg.outer_tol);
        // energy bound with the measured cap
        let bound = ops.mesh.measure() * pair.u.linf().powf(1.0 - cfg.params.gamma) / ops.a.alpha();
        assert!(pair.summary.u_h1.powi(2) <= bound);
    }

    #[test]
    fn energy_solver_rejects_distributional_params() {
        let cfg = SystemConfig::new(RegimeParams::new(4.0, 1.0).unwrap(), MeshSpec::unit(1, 33));
        assert!(matches!(solve_system(&cfg), Err(Error::Regime(_))));
        let cfg = cfg_1d(0.5, 1.0, 33);
        assert!(matches!(solve_system_distributional(&cfg), Err(Error::Regime(_))));
    }

    #[test]
    fn outer_non_convergence_is_reported() {
        let mut cfg = cfg_1d(0.5, 1.0, 33);
        cfg.max_outer = 2;
        assert!(matches!(solve_system(&cfg), Err(Error::OuterNonConvergence { .. })));
    }

    #[test]
    fn distributional_scheme_stabilizes() {
        let mut cfg = SystemConfig::new(RegimeParams::new(4.0, 1.0).unwrap(), MeshSpec::unit(1, 257));
        cfg.eps_ladder = vec![0.05, 0.1, 0.2, 5.0];
        let pair = solve_system_distributional(&cfg).unwrap();
        let rep = pair.distributional.as_ref().unwrap();
        assert_eq!(rep.steps.len(), 4);
        assert!(rep.eps_stable, "{:?}", rep.eps_change);
        assert!(rep.local_stable, "{:?}", rep.local_change);
        assert_eq!(rep.steps.last().unwrap().eps_h1[3], 0.0);
        assert!(rep.linf_bound <= cfg.sched.c0 + pair.v.linf() + 1e-12);
        let h1: Vec<f64> = rep.steps.iter().map(|s| s.h1).collect();
        assert!(h1.windows(2).all(|w| w[1] > w[0]), "{h1:?}");
    }

    #[test]
    fn overlap_regime_schemes_agree() {
        // for 1 <= gamma < 3 both schemes target the same limit
        let mut cfg = cfg_1d(1.5, 1.0, 129);
        cfg.sched.n_values = vec![1e2, 1e4, 1e6];
        let energy = solve_system(&cfg).unwrap();
        cfg.params = RegimeParams::distributional(1.5, 1.0).unwrap();
        let dist = solve_system_distributional(&cfg).unwrap();
        assert!(energy.u.linf_distance(&dist.u).unwrap() < 1e-3);
    }

    #[test]
    fn local_energy_examples() {
        let mesh = Arc::new(MeshSpec::unit(1, 257).build().unwrap());
        let d = GridFunction::distance(&mesh);
        assert_eq!(local_energy(&d, &GridFunction::zeros(&mesh)).unwrap(), 0.0);
        let ones = GridFunction::constant(&mesh, 1.0);
        assert!((local_energy(&d, &ones).unwrap() - d.gradient_energy()).abs() < 1e-14);
        // plateau on [0.25, 0.75] with linear ramps over [0.125, 0.25] and [0.75, 0.875]:
        // |u'| = 1, so the integral is 0.5 + 2 * 0.125 / 3
        let xi = GridFunction::from_fn(&mesh, |p| {
            let x = p[0];
            if x <= 0.125 || x >= 0.875 {
                0.0
            } else if x < 0.25 {
                (x - 0.125) / 0.125
            } else if x > 0.75 {
                (0.875 - x) / 0.125
            } else {
                1.0
            }
        });
        let exact = 0.5 + 0.25 / 3.0;
        assert!((local_energy(&d, &xi).unwrap() - exact).abs() < 1e-4);
        assert!(local_energy(&d, &GridFunction::constant(&mesh, 1.5)).is_err());
    }

    #[test]
    fn uniqueness_identical_seeds() {
        let cfg = cfg_1d(0.5, 1.0, 65);
        let rep = uniqueness_from_seeds(&cfg, &[7, 7]).unwrap();
        assert_eq!(rep.max_u_distance, 0.0);
        assert_eq!(rep.max_v_distance, 0.0);
        assert!(uniqueness_experiment(&cfg, 1).is_err());
    }

    #[test]
    fn uniqueness_collapse_and_sub_unit_exponent() {
        let cfg = cfg_1d(0.5, 1.0, 65);
        let rep = uniqueness_experiment(&cfg, 3).unwrap();
        assert_eq!(rep.passed, Some(true), "{rep:?}");
        assert_eq!(rep.convexity_violations, 0);
        assert_eq!(rep.convexity_checked, 3);

        let cfg = cfg_1d(0.5, 0.6, 65);
        let rep = uniqueness_experiment(&cfg, 3).unwrap();
        assert!(!rep.gate_applied);
        assert_eq!(rep.passed, None);
        assert!(rep.max_u_distance.is_finite());
    }

    #[test]
    fn random_fields_are_clipped() {
        let mesh = Arc::new(MeshSpec::unit(2, 17).build().unwrap());
        for s in 0..20 {
            let f = random_initial_field(&mesh, s, 3.0);
            assert!(f.min() >= 0.0 && f.max() <= 3.0 && f.max() > 0.0);
        }
        let a = random_initial_field(&mesh, 4, 3.0);
        let b = random_initial_field(&mesh, 4, 3.0);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn save_and_load() {
        let cfg = cfg_1d(0.5, 1.0, 33);
        let pair = solve_system(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pair.save(dir.path(), &cfg, &pair.summary).unwrap();
        for f in ["config.json", "u.csv", "v.csv", "trace.csv", "diagnostics.json", "continuation.csv", "nodes.csv"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let (back, u, v) = load_pair(dir.path()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(u.values(), pair.u.values());
        assert_eq!(v.values(), pair.v.values());
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_pair(empty.path()), Err(Error::IncompleteRun(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn convexity_inequality_nodewise(a in 0.0f64..5.0, b in 0.0f64..5.0, p in 0.0f64..5.0, q in 0.0f64..5.0, r in 1.0f64..4.0) {
            let mesh = Arc::new(MeshSpec::unit(1, 3).build().unwrap());
            let f = |x: f64| GridFunction::constant(&mesh, x);
            let gap = convexity_gap(&f(a), &f(p), &f(b), &f(q), r).unwrap();
            prop_assert!(gap >= -1e-9 * (1.0 + a.max(b).powf(r) * p.max(q)));
        }

        #[test]
        fn young_inequality_with_r_minus_one_over_r(a in 0.0f64..5.0, b in 0.0f64..5.0, r in 1.0f64..4.0) {
            let lhs = a.powf(r - 1.0) * b;
            let rhs = (r - 1.0) / r * a.powf(r) + b.powf(r) / r;
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn young_inequality_with_one_minus_r_over_r_fails() {
        // the alternative coefficient (1-r)/r is negative for r > 1 and breaks at b = 0
        let (a, b, r) = (1.0f64, 0.0f64, 2.0f64);
        let lhs = a.powf(r - 1.0) * b;
        let rhs = (1.0 - r) / r * a.powf(r) + b.powf(r) / r;
        assert!(lhs > rhs);
    }
}
