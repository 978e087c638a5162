//! The functional `J(w, z)`, saddle-point sampling around a converged pair, truncations,
//! Hardy quotients and boundary-layer exponent fits.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupled::SolutionPair;
use crate::elliptic::DiscreteOperator;
use crate::field::GridFunction;
use crate::mesh::{fmt_f64, Mesh};
use crate::singular::RegimeParams;
use crate::{Error, Result};

fn check_level(k: f64) -> Result<()> {
    if k > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("truncation level must be positive, got {k}")))
    }
}

/// `T_k(s) = clamp(s, -k, k)`.
pub fn truncate(s: f64, k: f64) -> Result<f64> {
    check_level(k)?;
    Ok(s.clamp(-k, k))
}

/// `G_k(s) = s - T_k(s)`.
pub fn residual_above(s: f64, k: f64) -> Result<f64> {
    Ok(s - truncate(s, k)?)
}

fn potential(w: f64, z: f64, r: f64, gamma: f64) -> f64 {
    z.max(0.0) * w.abs().powf(r) / r - w.max(0.0).powf(1.0 - gamma) / (1.0 - gamma)
}

fn check_inputs(w: &GridFunction, z: &GridFunction, op_a: &DiscreteOperator, op_m: &DiscreteOperator, params: &RegimeParams) -> Result<()> {
    if !(params.gamma < 1.0) {
        return Err(Error::OutOfScope { gamma: params.gamma });
    }
    if !(params.r > 0.0) {
        return Err(Error::InvalidArgument(format!("r must be positive, got {}", params.r)));
    }
    w.check_same(z)?;
    if !w.mesh().same_as(op_a.mesh()) || !w.mesh().same_as(op_m.mesh()) {
        return Err(Error::MeshMismatch);
    }
    Ok(())
}

/// Trapezoidal integral of the nonlinear part of `J`.
fn potential_trapezoid(w: &GridFunction, z: &GridFunction, params: &RegimeParams) -> f64 {
    let (r, g) = (params.r, params.gamma);
    w.mesh()
        .weights()
        .iter()
        .zip(w.values().iter().zip(z.values()))
        .map(|(c, (&a, &b))| c * potential(a, b, r, g))
        .sum()
}

/// Midpoint-rule integral of the nonlinear part of `J`, with cell-centre values taken
/// from the multilinear interpolant.
fn potential_midpoint(w: &GridFunction, z: &GridFunction, params: &RegimeParams) -> f64 {
    let mesh = w.mesh();
    let (r, g) = (params.r, params.gamma);
    let (wv, zv) = (w.values(), z.values());
    let n = mesh.resolution();
    let h = mesh.spacing();
    let mut acc = 0.0;
    match mesh.dimension() {
        1 => {
            for i in 0..n - 1 {
                acc += h[0] * potential(0.5 * (wv[i] + wv[i + 1]), 0.5 * (zv[i] + zv[i + 1]), r, g);
            }
        }
        _ => {
            for j in 0..n - 1 {
                for i in 0..n - 1 {
                    let ks = [mesh.node_at(i, j), mesh.node_at(i + 1, j), mesh.node_at(i, j + 1), mesh.node_at(i + 1, j + 1)];
                    let wm = ks.iter().map(|&k| wv[k]).sum::<f64>() / 4.0;
                    let zm = ks.iter().map(|&k| zv[k]).sum::<f64>() / 4.0;
                    acc += h[0] * h[1] * potential(wm, zm, r, g);
                }
            }
        }
    }
    acc
}

/// Discrete `J(w, z) = 1/2 E_A(w) - 1/(2r) E_M(z) + int (z^+ |w|^r / r - (w^+)^(1-g) / (1-g))`.
/// Defined only for `gamma < 1`.
pub fn evaluate_functional(
    w: &GridFunction,
    z: &GridFunction,
    op_a: &DiscreteOperator,
    op_m: &DiscreteOperator,
    params: &RegimeParams,
) -> Result<f64> {
    check_inputs(w, z, op_a, op_m, params)?;
    let j = 0.5 * op_a.energy(w) - op_m.energy(z) / (2.0 * params.r) + potential_trapezoid(w, z, params);
    if !j.is_finite() {
        return Err(Error::Invariant("functional value is not finite".into()));
    }
    Ok(j)
}

/// Difference between trapezoidal and midpoint quadrature of the nonlinear part of `J`,
/// an estimate of the order-h^2 quadrature error at `(w, z)`.
pub fn quadrature_error(
    w: &GridFunction,
    z: &GridFunction,
    op_a: &DiscreteOperator,
    op_m: &DiscreteOperator,
    params: &RegimeParams,
) -> Result<f64> {
    check_inputs(w, z, op_a, op_m, params)?;
    Ok((potential_trapezoid(w, z, params) - potential_midpoint(w, z, params)).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleSample {
    pub direction_id: String,
    pub t: f64,
    #[serde(rename = "J")]
    pub j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub direction_id: String,
    pub t: f64,
    /// Amount by which the inequality fails.
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleReport {
    #[serde(rename = "J_at_solution")]
    pub j_at_solution: f64,
    #[serde(rename = "max_J_over_z_perturbations")]
    pub max_j_over_z: f64,
    #[serde(rename = "min_J_over_w_perturbations")]
    pub min_j_over_w: f64,
    /// Random directions per slot; the four deterministic ones come on top.
    pub n_directions: usize,
    pub samples_checked: usize,
    pub quadrature_error: f64,
    pub tolerance: f64,
    /// Direction attaining the largest `J(u, z)`.
    pub worst_z: String,
    /// Direction attaining the smallest `J(w, v)`.
    pub worst_w: String,
    pub violations: Vec<Violation>,
}

impl SaddleReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Step sizes, relative to the sup norm of the perturbed component.
pub const SADDLE_STEPS: [f64; 9] = [1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 2.0, 4.0];

enum Slot {
    Z,
    W,
}

struct Direction {
    id: String,
    slot: Slot,
    eta: GridFunction,
}

/// Samples `J(u, v + t eta)` and `J((u + t zeta)^+, v)` over smooth random directions and
/// the four deterministic ones `z = 0`, `z = 2v`, `w = 0`, `w = 2u` (reached at `t = 1`).
/// Every sample must satisfy `J(u, z) <= J(u, v) + tol <= J(w, v) + 2 tol` with `tol` ten
/// times the quadrature error estimate at the pair.
pub fn saddle_test(
    pair: &SolutionPair,
    op_a: &DiscreteOperator,
    op_m: &DiscreteOperator,
    n_directions: usize,
    seed: u64,
) -> Result<(SaddleReport, Vec<SaddleSample>)> {
    let params = &pair.params;
    if !(params.gamma < 1.0) {
        return Err(Error::OutOfScope { gamma: params.gamma });
    }
    if !(params.r >= 1.0) {
        return Err(Error::Regime(format!("saddle structure needs r >= 1, got r = {}", params.r)));
    }
    if n_directions == 0 {
        return Err(Error::InvalidArgument("n_directions must be at least 1".into()));
    }
    let (u, v) = (&pair.u, &pair.v);
    let j0 = evaluate_functional(u, v, op_a, op_m, params)?;
    let tol = 10.0 * quadrature_error(u, v, op_a, op_m, params)?;
    let mesh = u.mesh();
    let (su, sv) = (u.linf().max(f64::MIN_POSITIVE), v.linf().max(f64::MIN_POSITIVE));

    let mut dirs = vec![
        Direction { id: "z_zero".into(), slot: Slot::Z, eta: v.scaled(-1.0) },
        Direction { id: "z_double".into(), slot: Slot::Z, eta: v.clone() },
        Direction { id: "w_zero".into(), slot: Slot::W, eta: u.scaled(-1.0) },
        Direction { id: "w_double".into(), slot: Slot::W, eta: u.clone() },
    ];
    for i in 0..n_directions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let modes = 1 + i % 6;
        let eta = GridFunction::random_smooth(mesh, &mut rng, modes).scaled(sv);
        let zeta = GridFunction::random_smooth(mesh, &mut rng, modes).scaled(su);
        dirs.push(Direction { id: format!("z{i}"), slot: Slot::Z, eta });
        dirs.push(Direction { id: format!("w{i}"), slot: Slot::W, eta: zeta });
    }

    let per_dir: Vec<Result<Vec<(bool, SaddleSample)>>> = dirs
        .par_iter()
        .map(|d| {
            let deterministic = !d.id.chars().nth(1).is_some_and(|c| c.is_ascii_digit());
            let steps: &[f64] = if deterministic { &[1.0] } else { &SADDLE_STEPS };
            let mut out = Vec::with_capacity(steps.len());
            for &t in steps {
                let (is_z, j) = match d.slot {
                    Slot::Z => (true, evaluate_functional(u, &v.axpy(t, &d.eta)?, op_a, op_m, params)?),
                    Slot::W => {
                        let w = u.axpy(t, &d.eta)?.map(|x| x.max(0.0));
                        (false, evaluate_functional(&w, v, op_a, op_m, params)?)
                    }
                };
                out.push((is_z, SaddleSample { direction_id: d.id.clone(), t, j }));
            }
            Ok(out)
        })
        .collect();

    let mut samples = Vec::new();
    let mut violations = Vec::new();
    let (mut max_z, mut min_w) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut worst_z, mut worst_w) = (String::new(), String::new());
    for batch in per_dir {
        for (is_z, s) in batch? {
            let excess = if is_z { s.j - j0 } else { j0 - s.j };
            if excess > tol {
                violations.push(Violation { direction_id: s.direction_id.clone(), t: s.t, excess });
            }
            if is_z && s.j > max_z {
                max_z = s.j;
                worst_z = format!("{}@t={}", s.direction_id, s.t);
            }
            if !is_z && s.j < min_w {
                min_w = s.j;
                worst_w = format!("{}@t={}", s.direction_id, s.t);
            }
            samples.push(s);
        }
    }
    let report = SaddleReport {
        j_at_solution: j0,
        max_j_over_z: max_z,
        min_j_over_w: min_w,
        n_directions,
        samples_checked: samples.len(),
        quadrature_error: tol / 10.0,
        tolerance: tol,
        worst_z,
        worst_w,
        violations,
    };
    Ok((report, samples))
}

/// Writes `direction_id,t,J`.
pub fn write_saddle_csv(samples: &[SaddleSample], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["direction_id", "t", "J"])?;
    for s in samples {
        w.write_record([s.direction_id.clone(), fmt_f64(s.t), fmt_f64(s.j)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_saddle_csv(path: &Path) -> Result<Vec<SaddleSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub t: Vec<f64>,
    /// `J(t w0, v)`.
    pub j_scaled_w: Vec<f64>,
    /// `J(u, t w0)`.
    pub j_scaled_z: Vec<f64>,
    pub sup_estimate: f64,
    pub inf_estimate: f64,
    /// `J(t w0, v) / t^2` at the two largest `t`.
    pub growth_ratio: [f64; 2],
    pub decay_ratio: [f64; 2],
    /// `1/2 int A grad w0 . grad w0`.
    pub expected_growth: f64,
    /// `-(1/2r) int M grad w0 . grad w0`.
    pub expected_decay: f64,
    pub growth_rel_error: f64,
    pub decay_rel_error: f64,
    pub increasing: bool,
    pub decreasing: bool,
}

impl ProbeReport {
    /// Both coefficients within `rel_tol` and both sequences monotone.
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.increasing && self.decreasing && self.growth_rel_error <= rel_tol && self.decay_rel_error <= rel_tol
    }
}

/// Smooth positive bump `prod sin(pi x_i)` on the mesh box.
pub fn probe_profile(mesh: &Arc<Mesh>) -> GridFunction {
    let ext = mesh.extents().to_vec();
    let dim = mesh.dimension();
    GridFunction::from_fn(mesh, |p| {
        (0..dim)
            .map(|a| (PI * (p[a] - ext[a][0]) / (ext[a][1] - ext[a][0])).sin())
            .product()
    })
}

/// Evaluates `J(t w0, v)` and `J(u, t w0)` for `t = 1, 2, 4, ..., t_max` with `w0` the
/// sine bump. For `r < 2` the quadratic terms lead, so `J / t^2` tends to the gradient
/// coefficients; for `r = 2` the growth coefficient also picks up `int v w0^2 / 2`.
pub fn unboundedness_probe(
    pair: &SolutionPair,
    op_a: &DiscreteOperator,
    op_m: &DiscreteOperator,
    t_max: f64,
) -> Result<ProbeReport> {
    let params = &pair.params;
    if !(t_max >= 2.0) {
        return Err(Error::InvalidArgument(format!("t_max must be at least 2, got {t_max}")));
    }
    let w0 = probe_profile(pair.u.mesh());
    let mut ts = Vec::new();
    let mut t = 1.0;
    while t <= t_max * (1.0 + 1e-12) {
        ts.push(t);
        t *= 2.0;
    }
    let mut jw = Vec::with_capacity(ts.len());
    let mut jz = Vec::with_capacity(ts.len());
    for &t in &ts {
        jw.push(evaluate_functional(&w0.scaled(t), &pair.v, op_a, op_m, params)?);
        jz.push(evaluate_functional(&pair.u, &w0.scaled(t), op_a, op_m, params)?);
    }
    let mut expected_growth = 0.5 * op_a.energy(&w0);
    if (params.r - 2.0).abs() < 1e-12 {
        let vw: Vec<f64> = pair.v.values().iter().zip(w0.values()).map(|(a, b)| a.max(0.0) * b * b / 2.0).collect();
        expected_growth += w0.mesh().weights().iter().zip(&vw).map(|(c, x)| c * x).sum::<f64>();
    }
    let expected_decay = -op_m.energy(&w0) / (2.0 * params.r);
    let k = ts.len();
    let ratio = |j: &[f64], i: usize| j[i] / (ts[i] * ts[i]);
    let growth_ratio = [ratio(&jw, k - 2), ratio(&jw, k - 1)];
    let decay_ratio = [ratio(&jz, k - 2), ratio(&jz, k - 1)];
    Ok(ProbeReport {
        sup_estimate: jw.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        inf_estimate: jz.iter().cloned().fold(f64::INFINITY, f64::min),
        growth_rel_error: (growth_ratio[1] - expected_growth).abs() / expected_growth.abs(),
        decay_rel_error: (decay_ratio[1] - expected_decay).abs() / expected_decay.abs(),
        increasing: jw.windows(2).all(|p| p[1] > p[0]),
        decreasing: jz.windows(2).all(|p| p[1] < p[0]),
        t: ts,
        j_scaled_w: jw,
        j_scaled_z: jz,
        growth_ratio,
        decay_ratio,
        expected_growth,
        expected_decay,
    })
}

/// Limit of `u / d` at a boundary node, from the inward neighbour across a single face.
/// Corner nodes return `None`.
fn boundary_ratio(u: &GridFunction, k: usize) -> Option<f64> {
    let mesh = u.mesh();
    let n = mesh.resolution();
    let inward = |i: usize| if i == 0 { Some(1) } else if i == n - 1 { Some(n - 2) } else { None };
    let nb = match mesh.dimension() {
        1 => inward(k)?,
        _ => {
            let [i, j] = mesh.grid_index(k);
            match (inward(i), inward(j)) {
                (Some(a), None) => mesh.node_at(a, j),
                (None, Some(b)) => mesh.node_at(i, b),
                _ => return None,
            }
        }
    };
    Some(u.values()[nb] / mesh.dist()[nb])
}

/// `int u^2 / d^2` divided by the discrete `int |grad u|^2`. On boundary faces `u / d` is
/// replaced by its one-sided limit.
pub fn hardy_quotient(u: &GridFunction) -> Result<f64> {
    let mesh = u.mesh();
    let grad = u.gradient_energy();
    if !(grad > 0.0) {
        return Err(Error::InvalidArgument("Hardy quotient needs a nonzero gradient".into()));
    }
    let num: f64 = (0..mesh.node_count())
        .map(|k| {
            let d = mesh.dist()[k];
            let ratio = if mesh.is_boundary(k) { boundary_ratio(u, k).unwrap_or(0.0) } else { u.values()[k] / d };
            mesh.weights()[k] * ratio * ratio
        })
        .sum();
    Ok(num / grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub tau_fit: f64,
    pub c_fit: f64,
    pub r2: f64,
    pub nodes: usize,
}

/// Least-squares fit of `log u = log c + tau log d` over nodes with `2h < d < layer`.
pub fn fit_boundary_exponent(u: &GridFunction, layer: f64) -> Result<ExponentFit> {
    if !(layer > 0.0 && layer < 0.5) {
        return Err(Error::InvalidArgument(format!("layer must lie in (0, 0.5), got {layer}")));
    }
    let mesh = u.mesh();
    let cut = 2.5 * mesh.h();
    let mut pts = Vec::new();
    for k in mesh.interior_nodes() {
        let d = mesh.dist()[k];
        if d > cut && d < layer {
            let val = u.values()[k];
            if !(val > 0.0) {
                return Err(Error::InvalidArgument(format!("nonpositive value {val} at node {k} inside the layer")));
            }
            pts.push((d.ln(), val.ln()));
        }
    }
    if pts.len() < 5 {
        return Err(Error::TooFewNodes { found: pts.len(), needed: 5 });
    }
    let m = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / m, pts.iter().map(|p| p.1).sum::<f64>() / m);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::TooFewNodes { found: 1, needed: 5 });
    }
    let tau = sxy / sxx;
    let intercept = my - tau * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Ok(ExponentFit {
        tau_fit: tau,
        c_fit: intercept.exp(),
        r2,
        nodes: pts.len(),
    })
}
