//! The single regularized equation `K u = (1 - v u^(gamma+r-1)) / (1/n + u)^gamma` for a
//! frozen potential `v`, its continuation in `n`, the explicit subsolution barrier and
//! the a priori cap.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::elliptic::{DiscreteOperator, EigenPair};
use crate::error::{Error, Result};
use crate::field::GridFunction;
use crate::mesh::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    EnergyMild,
    EnergyStrong,
    Distributional,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::EnergyMild => "energy-mild",
            Regime::EnergyStrong => "energy-strong",
            Regime::Distributional => "distributional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    pub gamma: f64,
    pub r: f64,
    pub regime: Regime,
}

impl RegimeParams {
    /// Classifies by `gamma`: (0,1] mild, (1,3) strong, [3,inf) distributional.
    pub fn new(gamma: f64, r: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) || !r.is_finite() {
            return Err(Error::Regime(format!("need finite gamma > 0 and finite r, got gamma = {gamma}, r = {r}")));
        }
        let regime = if gamma <= 1.0 {
            Regime::EnergyMild
        } else if gamma < 3.0 {
            Regime::EnergyStrong
        } else {
            Regime::Distributional
        };
        let p = Self { gamma, r, regime };
        p.validate()?;
        Ok(p)
    }

    /// The distributional scheme, which accepts any `gamma >= 1`.
    pub fn distributional(gamma: f64, r: f64) -> Result<Self> {
        let p = Self {
            gamma,
            r,
            regime: Regime::Distributional,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (g, r) = (self.gamma, self.r);
        if !(g.is_finite() && g > 0.0) || !r.is_finite() {
            return Err(Error::Regime(format!("need finite gamma > 0 and finite r, got gamma = {g}, r = {r}")));
        }
        match self.regime {
            Regime::EnergyMild | Regime::EnergyStrong => {
                let expected = if g <= 1.0 { Regime::EnergyMild } else { Regime::EnergyStrong };
                if g >= 3.0 || self.regime != expected {
                    return Err(Error::Regime(format!(
                        "gamma = {g} is not in the {} range",
                        self.regime.name()
                    )));
                }
                let floor = (1.0 - g).max(0.0);
                if r <= floor {
                    return Err(Error::Regime(format!("energy regimes need r > {floor}, got r = {r}")));
                }
            }
            Regime::Distributional => {
                if g < 1.0 || r <= 0.0 {
                    return Err(Error::Regime(format!(
                        "distributional scheme needs gamma >= 1 and r > 0, got gamma = {g}, r = {r}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Boundary decay exponent `2/(gamma+1)`.
    pub fn tau(&self) -> f64 {
        2.0 / (self.gamma + 1.0)
    }

    /// `gamma + r - 1`, the power of `u` in the absorption part of the source.
    pub fn absorption_power(&self) -> f64 {
        self.gamma + self.r - 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizationSchedule {
    pub n_values: Vec<f64>,
    pub inner_tol: f64,
    pub max_inner_iters: usize,
    pub damping: f64,
    /// Upper clamp of the cap `min{|v|^(1/(1-r-gamma)), c0}`.
    pub c0: f64,
}

impl Default for RegularizationSchedule {
    fn default() -> Self {
        Self {
            n_values: vec![1e1, 1e2, 1e3, 1e4],
            inner_tol: 1e-10,
            max_inner_iters: 5000,
            damping: 0.5,
            c0: 10.0,
        }
    }
}

impl RegularizationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_values.len() < 2 {
            return Err(Error::InvalidArgument("schedule needs at least 2 values of n".into()));
        }
        if self.n_values.iter().any(|n| !(*n > 0.0) || n.is_nan()) {
            return Err(Error::InvalidArgument("schedule values must be positive".into()));
        }
        if self.n_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("schedule values must be strictly increasing".into()));
        }
        if !(self.inner_tol > 0.0) || self.max_inner_iters == 0 {
            return Err(Error::InvalidArgument("inner_tol and max_inner_iters must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping must lie in (0,1], got {}", self.damping)));
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(Error::InvalidArgument(format!("c0 must be positive, got {}", self.c0)));
        }
        Ok(())
    }

    pub fn final_n(&self) -> f64 {
        *self.n_values.last().expect("validated schedule")
    }
}

/// `b = min{v_linf^(1/(1-r-gamma)), c0}`, and `c0` when `v_linf = 0`.
pub fn linfty_cap(v_linf: f64, params: &RegimeParams, c0: f64) -> Result<f64> {
    params.validate()?;
    if !(v_linf >= 0.0) || !(c0 > 0.0) {
        return Err(Error::InvalidArgument(format!("need v_linf >= 0 and c0 > 0, got {v_linf}, {c0}")));
    }
    let e = 1.0 - params.r - params.gamma;
    if e >= 0.0 {
        return Err(Error::Regime(format!("cap exponent needs 1 - r - gamma < 0, got {e}")));
    }
    if v_linf == 0.0 {
        return Ok(c0);
    }
    Ok(v_linf.powf(1.0 / e).min(c0))
}

/// `(1 - v u^(gamma+r-1)) / (1/n + u)^gamma`.
pub fn singular_rhs(u_value: f64, v_value: f64, n: f64, params: &RegimeParams) -> Result<f64> {
    if !(u_value >= 0.0) {
        return Err(Error::InvalidArgument(format!("u must be nonnegative, got {u_value}")));
    }
    if !(n > 0.0) {
        return Err(Error::InvalidArgument(format!("n must be positive, got {n}")));
    }
    let absorb = v_value * u_value.powf(params.absorption_power());
    Ok((1.0 - absorb) / (1.0 / n + u_value).powf(params.gamma))
}

#[derive(Debug, Clone)]
pub struct RegularizedSolution {
    pub u: GridFunction,
    pub iterations: usize,
    /// Relative fixed-point residual `|T(u) - u|_inf / |u|_inf` at the returned iterate.
    pub residual: f64,
    pub cap: f64,
    /// Damping in force when the iteration stopped.
    pub damping: f64,
}

const MIN_DAMPING: f64 = 1.0 / 1024.0;

fn linear_tol(inner_tol: f64) -> f64 {
    (inner_tol * 1e-2).clamp(1e-14, 1e-8)
}

/// How the absorption term `v u^(r-1)` is regularized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scheme {
    /// `v u^(gamma+r-1) / (1/n+u)^gamma`, so the whole source is `(1 - v u^(gamma+r-1)) / (1/n+u)^gamma`.
    Energy,
    /// `v u^(r-1)`, with `(u+1/n)^(r-1)` in place of `u^(r-1)` when `r < 1`.
    Distributional,
}

fn absorption(scheme: Scheme, params: &RegimeParams, shift: f64, u: f64, v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    match scheme {
        Scheme::Energy => v * u.powf(params.absorption_power()) / (shift + u).powf(params.gamma),
        Scheme::Distributional if params.r >= 1.0 => v * u.powf(params.r - 1.0),
        Scheme::Distributional => v * (u + shift).powf(params.r - 1.0),
    }
}

/// Damped Picard sweeps on interior unknowns. The absorption term enters the operator as a
/// lagged secant mass `a(u)/u`, leaving the positive source `1/(1/n+u)^gamma` on the right.
#[allow(clippy::too_many_arguments)]
fn picard(
    op: &DiscreteOperator,
    scheme: Scheme,
    v: &[f64],
    n: f64,
    params: &RegimeParams,
    cap: f64,
    sched: &RegularizationSchedule,
    mut u: Vec<f64>,
) -> Result<(Vec<f64>, usize, f64, f64)> {
    let g = params.gamma;
    let shift = 1.0 / n;
    let cg_tol = linear_tol(sched.inner_tol);
    let mut theta = sched.damping;
    let mut prev = f64::INFINITY;
    let mut mass = vec![0.0; u.len()];
    let mut rhs = vec![0.0; u.len()];
    let mut res = f64::INFINITY;
    for it in 1..=sched.max_inner_iters {
        for i in 0..u.len() {
            let source = (shift + u[i]).powf(-g);
            let a = absorption(scheme, params, shift, u[i], v[i]);
            if u[i] > 0.0 {
                mass[i] = a / u[i];
                rhs[i] = source;
            } else {
                mass[i] = 0.0;
                rhs[i] = source - a;
            }
        }
        let (mut t, _) = op.solve_shifted(Some(&mass), &rhs, cg_tol, Some(&u))?;
        for x in t.iter_mut() {
            *x = x.clamp(0.0, cap);
        }
        let scale = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let step = u.iter().zip(&t).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        res = if scale > 0.0 { step / scale } else { f64::INFINITY };
        if res.is_nan() {
            return Err(Error::Divergence {
                iterations: it,
                residual: res,
            });
        }
        if res <= sched.inner_tol {
            return Ok((u, it, res, theta));
        }
        if res > prev && theta > MIN_DAMPING {
            theta = (theta * 0.5).max(MIN_DAMPING);
        }
        prev = res;
        if scale == 0.0 {
            u = t;
        } else {
            for (a, b) in u.iter_mut().zip(&t) {
                *a = (1.0 - theta) * *a + theta * b;
            }
        }
    }
    Err(Error::Divergence {
        iterations: sched.max_inner_iters,
        residual: res,
    })
}

/// Solves the regularized equation at a single `n`, values clipped to `[0, b]` after
/// every sweep. Without a warm start, `n` is ramped up by decades from 10.
pub fn solve_regularized(
    op: &DiscreteOperator,
    v: &GridFunction,
    n: f64,
    params: &RegimeParams,
    sched: &RegularizationSchedule,
    warm_start: Option<&GridFunction>,
) -> Result<RegularizedSolution> {
    params.validate()?;
    sched.validate()?;
    if !(v.min() >= 0.0) {
        return Err(Error::InvalidArgument(format!("potential must be nonnegative, min = {}", v.min())));
    }
    let cap = linfty_cap(v.linf(), params, sched.c0)?;
    solve_scheme(op, Scheme::Energy, v, n, params, sched, cap, warm_start)
}

/// The distributional scheme `K u + v u^(r-1) = 1/(u+1/n)^gamma`, clipped to `[0, c0]`.
pub fn solve_regularized_distributional(
    op: &DiscreteOperator,
    v: &GridFunction,
    n: f64,
    params: &RegimeParams,
    sched: &RegularizationSchedule,
    warm_start: Option<&GridFunction>,
) -> Result<RegularizedSolution> {
    params.validate()?;
    sched.validate()?;
    if !(v.min() >= 0.0) {
        return Err(Error::InvalidArgument(format!("potential must be nonnegative, min = {}", v.min())));
    }
    solve_scheme(op, Scheme::Distributional, v, n, params, sched, sched.c0, warm_start)
}

#[allow(clippy::too_many_arguments)]
fn solve_scheme(
    op: &DiscreteOperator,
    scheme: Scheme,
    v: &GridFunction,
    n: f64,
    params: &RegimeParams,
    sched: &RegularizationSchedule,
    cap: f64,
    warm_start: Option<&GridFunction>,
) -> Result<RegularizedSolution> {
    if !v.mesh().same_as(op.mesh()) {
        return Err(Error::MeshMismatch);
    }
    if !(n > 0.0) {
        return Err(Error::InvalidArgument(format!("n must be positive, got {n}")));
    }
    let vi = op.restrict(v);
    let mut iterations = 0;
    let start = match warm_start {
        Some(w) => {
            if !w.mesh().same_as(op.mesh()) {
                return Err(Error::MeshMismatch);
            }
            op.restrict(w).into_iter().map(|x| x.clamp(0.0, cap)).collect()
        }
        None => {
            let ones = vec![1.0; op.size()];
            let (torsion, _) = op.solve_shifted(None, &ones, linear_tol(sched.inner_tol), None)?;
            let mut u: Vec<f64> = torsion.into_iter().map(|x| x.clamp(0.0, cap)).collect();
            let mut level = 10.0;
            while level < n {
                let (next, its, _, _) = picard(op, scheme, &vi, level, params, cap, sched, u)?;
                u = next;
                iterations += its;
                level *= 10.0;
            }
            u
        }
    };
    let (u, its, residual, damping) = picard(op, scheme, &vi, n, params, cap, sched, start)?;
    iterations += its;
    let u = op.extend(&u);
    let max_u = u.max();
    if max_u > cap + 1e-12 {
        return Err(Error::Invariant(format!("solution max {max_u} exceeds cap {cap}")));
    }
    if op.interior().iter().any(|&g| u.values()[g] <= 0.0) {
        return Err(Error::Invariant("solution is not positive at every interior node".into()));
    }
    Ok(RegularizedSolution {
        u,
        iterations,
        residual,
        cap,
        damping,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub n: f64,
    pub linf: f64,
    pub h1: f64,
    /// L2 distance to the previous step; absent on the first step.
    pub l2_diff: Option<f64>,
    pub inner_iters: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub steps: Vec<TraceStep>,
    /// Set when the L2 differences fail to decrease over the last half of the schedule.
    pub warning: Option<String>,
}

impl ConvergenceTrace {
    pub fn last(&self) -> Option<&TraceStep> {
        self.steps.last()
    }

    /// Last L2 step below `outer_tol` and final fixed-point residual below `inner_tol`.
    pub fn converged(&self, outer_tol: f64, inner_tol: f64) -> bool {
        match self.steps.last() {
            Some(s) => s.l2_diff.is_some_and(|d| d < outer_tol) && s.residual <= inner_tol,
            None => false,
        }
    }

    /// Relative change of the H1 seminorm over the last two steps.
    pub fn h1_relative_change(&self) -> Option<f64> {
        let k = self.steps.len();
        if k < 2 {
            return None;
        }
        let (a, b) = (self.steps[k - 2].h1, self.steps[k - 1].h1);
        Some((b - a).abs() / b.abs().max(f64::MIN_POSITIVE))
    }

    fn check_tail(&mut self) {
        let diffs: Vec<f64> = self.steps.iter().filter_map(|s| s.l2_diff).collect();
        if diffs.len() < 2 {
            return;
        }
        let tail = &diffs[diffs.len() / 2..];
        if tail.windows(2).any(|w| w[1] >= w[0]) {
            self.warning = Some(format!(
                "L2 differences do not decrease over the tail of the schedule: {tail:?}"
            ));
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n", "linf", "h1", "l2_diff", "inner_iters"])?;
        for s in &self.steps {
            w.write_record([
                fmt_f64(s.n),
                fmt_f64(s.linf),
                fmt_f64(s.h1),
                s.l2_diff.map(fmt_f64).unwrap_or_default(),
                s.inner_iters.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the columns written by [`write_csv`](Self::write_csv); residuals are not stored.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut steps = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: bad number in column {i}: {e}", path.display())))
            };
            let l2_diff = match rec.get(3) {
                Some("") | None => None,
                Some(_) => Some(num(3)?),
            };
            steps.push(TraceStep {
                n: num(0)?,
                linf: num(1)?,
                h1: num(2)?,
                l2_diff,
                inner_iters: num(4)? as usize,
                residual: f64::NAN,
            });
        }
        Ok(Self { steps, warning: None })
    }
}

/// Solves along the schedule with warm starts and records the trace.
pub fn continuation_solve(
    op: &DiscreteOperator,
    v: &GridFunction,
    params: &RegimeParams,
    sched: &RegularizationSchedule,
) -> Result<(GridFunction, ConvergenceTrace)> {
    continuation_from(op, v, params, sched, None)
}

/// [`continuation_solve`] with an optional starting iterate for the first value of `n`.
pub fn continuation_from(
    op: &DiscreteOperator,
    v: &GridFunction,
    params: &RegimeParams,
    sched: &RegularizationSchedule,
    start: Option<&GridFunction>,
) -> Result<(GridFunction, ConvergenceTrace)> {
    sched.validate()?;
    let mut trace = ConvergenceTrace::default();
    let mut prev: Option<GridFunction> = start.cloned();
    let mut have_prev_step = false;
    for &n in &sched.n_values {
        let sol = solve_regularized(op, v, n, params, sched, prev.as_ref())?;
        let l2_diff = match (&prev, have_prev_step) {
            (Some(p), true) => Some(sol.u.l2_distance(p)?),
            _ => None,
        };
        trace.steps.push(TraceStep {
            n,
            linf: sol.u.linf(),
            h1: sol.u.h1_seminorm(),
            l2_diff,
            inner_iters: sol.iterations,
            residual: sol.residual,
        });
        prev = Some(sol.u);
        have_prev_step = true;
    }
    trace.check_tail();
    Ok((prev.expect("schedule is nonempty"), trace))
}

/// H1 seminorm restricted to edges with both ends in `{d >= margin}`.
pub fn local_h1(u: &GridFunction, margin: f64) -> f64 {
    let d = u.mesh().dist();
    u.weighted_gradient_energy(|a, b| {
        if d[a] >= margin && d[b] >= margin {
            1.0
        } else {
            0.0
        }
    })
    .sqrt()
}

/// Largest `c3` with
/// `lambda1 c^(1+g) tau + beta c^(1+g) tau (1-tau) |grad phi1|^2 + |v| c^(r-1+g) - 1 <= 0`.
pub fn subsolution_constant(eig: &EigenPair, beta: f64, v_linf: f64, params: &RegimeParams) -> Result<f64> {
    let g = params.gamma;
    if !(g > 1.0) {
        return Err(Error::Regime(format!("the subsolution barrier needs gamma > 1, got {g}")));
    }
    if !(v_linf >= 0.0) || !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("need v_linf >= 0 and beta > 0, got {v_linf}, {beta}")));
    }
    let tau = params.tau();
    let lead = eig.lambda1 * tau + beta * tau * (1.0 - tau) * eig.grad_inf.powi(2);
    let q = params.absorption_power();
    let lhs = |c: f64| lead * c.powf(1.0 + g) + v_linf * c.powf(q) - 1.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    while lhs(hi) <= 0.0 {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 || !hi.is_finite() {
            return Err(Error::NoRootBracket);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if lhs(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if !(lo > 0.0) {
        return Err(Error::NoRootBracket);
    }
    Ok(lo)
}

/// `max{c3 phi1^tau - 1/n, 0}`; `n = inf` drops the shift.
pub fn build_subsolution(eig: &EigenPair, c3: f64, n: f64, params: &RegimeParams) -> GridFunction {
    let tau = params.tau();
    let shift = 1.0 / n;
    eig.phi1.map(|p| (c3 * p.max(0.0).powf(tau) - shift).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierReport {
    pub min_margin: f64,
    /// Fraction of interior nodes with `u - w < -tolerance`.
    pub violation_fraction: f64,
    /// Largest `c` with `u >= c d^tau` at every interior node.
    pub implied_c: f64,
    pub tau: f64,
}

impl BarrierReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn verify_barrier(u: &GridFunction, w: &GridFunction, tau: f64, tolerance: f64) -> Result<BarrierReport> {
    u.check_same(w)?;
    let mesh = u.mesh();
    let mut min_margin = f64::INFINITY;
    let mut violations = 0usize;
    let mut implied_c = f64::INFINITY;
    let mut count = 0usize;
    for k in 0..mesh.node_count() {
        let margin = u.values()[k] - w.values()[k];
        min_margin = min_margin.min(margin);
        if mesh.is_boundary(k) {
            continue;
        }
        count += 1;
        if margin < -tolerance {
            violations += 1;
        }
        implied_c = implied_c.min(u.values()[k] / mesh.dist()[k].powf(tau));
    }
    Ok(BarrierReport {
        min_margin,
        violation_fraction: if count == 0 { 0.0 } else { violations as f64 / count as f64 },
        implied_c,
        tau,
    })
}

/// Minimum of `u` over `{d >= omega_margin}`.
pub fn interior_positivity(u: &GridFunction, omega_margin: f64) -> Result<f64> {
    if !(omega_margin > 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be positive, got {omega_margin}")));
    }
    let d = u.mesh().dist();
    u.values()
        .iter()
        .zip(d)
        .filter(|(_, d)| **d >= omega_margin)
        .map(|(u, _)| *u)
        .reduce(f64::min)
        .ok_or(Error::EmptyRegion { margin: omega_margin })
}
