//! Structured tensor meshes on boxes in one and two dimensions.
//!
//! Nodes are laid out on a uniform grid with `resolution` nodes per axis and
//! linear index `j * nx + i` in 2D. The distance to the boundary is computed
//! analytically as the minimum over the box faces.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GridFunction;

/// Serializable description of a mesh; enough to rebuild it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub dimension: usize,
    pub extents: Vec<[f64; 2]>,
    pub resolution: usize,
}

impl MeshSpec {
    pub fn unit(dimension: usize, resolution: usize) -> Self {
        Self {
            dimension,
            extents: vec![[0.0, 1.0]; dimension],
            resolution,
        }
    }

    pub fn build(&self) -> Result<Mesh> {
        build_mesh(self.dimension, &self.extents, self.resolution)
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    spec: MeshSpec,
    spacing: Vec<f64>,
    coords: Vec<[f64; 2]>,
    is_boundary: Vec<bool>,
    dist: Vec<f64>,
    weights: Vec<f64>,
}

/// Builds a uniform tensor mesh on the box given by `extents`.
pub fn build_mesh(dimension: usize, extents: &[[f64; 2]], resolution: usize) -> Result<Mesh> {
    if dimension != 1 && dimension != 2 {
        return Err(Error::InvalidMesh(format!(
            "dimension must be 1 or 2, got {dimension}"
        )));
    }
    if extents.len() != dimension {
        return Err(Error::InvalidMesh(format!(
            "expected {dimension} extents, got {}",
            extents.len()
        )));
    }
    if resolution < 3 {
        return Err(Error::InvalidMesh(format!(
            "resolution must be at least 3, got {resolution}"
        )));
    }
    for (axis, [lo, hi]) in extents.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidMesh(format!(
                "extent on axis {axis} is degenerate or inverted: [{lo}, {hi}]"
            )));
        }
    }

    let spacing: Vec<f64> = extents
        .iter()
        .map(|[lo, hi]| (hi - lo) / (resolution - 1) as f64)
        .collect();
    let axis_coord = |axis: usize, i: usize| -> f64 {
        let [lo, hi] = extents[axis];
        if i == resolution - 1 {
            hi
        } else {
            lo + i as f64 * spacing[axis]
        }
    };
    let axis_dist = |axis: usize, i: usize| -> f64 {
        // measured in index space first so that symmetric nodes get identical values
        let k = i.min(resolution - 1 - i);
        k as f64 * spacing[axis]
    };
    let axis_weight = |axis: usize, i: usize| -> f64 {
        if i == 0 || i == resolution - 1 {
            0.5 * spacing[axis]
        } else {
            spacing[axis]
        }
    };

    let count = resolution.pow(dimension as u32);
    let mut coords = Vec::with_capacity(count);
    let mut is_boundary = Vec::with_capacity(count);
    let mut dist = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    match dimension {
        1 => {
            for i in 0..resolution {
                coords.push([axis_coord(0, i), 0.0]);
                is_boundary.push(i == 0 || i == resolution - 1);
                dist.push(axis_dist(0, i));
                weights.push(axis_weight(0, i));
            }
        }
        _ => {
            for j in 0..resolution {
                for i in 0..resolution {
                    coords.push([axis_coord(0, i), axis_coord(1, j)]);
                    is_boundary.push(
                        i == 0 || j == 0 || i == resolution - 1 || j == resolution - 1,
                    );
                    dist.push(axis_dist(0, i).min(axis_dist(1, j)));
                    weights.push(axis_weight(0, i) * axis_weight(1, j));
                }
            }
        }
    }

    Ok(Mesh {
        spec: MeshSpec {
            dimension,
            extents: extents.to_vec(),
            resolution,
        },
        spacing,
        coords,
        is_boundary,
        dist,
        weights,
    })
}

impl Mesh {
    pub fn unit_interval(resolution: usize) -> Result<Self> {
        build_mesh(1, &[[0.0, 1.0]], resolution)
    }

    pub fn unit_square(resolution: usize) -> Result<Self> {
        build_mesh(2, &[[0.0, 1.0], [0.0, 1.0]], resolution)
    }

    pub fn spec(&self) -> &MeshSpec {
        &self.spec
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn extents(&self) -> &[[f64; 2]] {
        &self.spec.extents
    }

    /// Grid spacing per axis.
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Largest grid spacing over the axes.
    pub fn h(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn coord(&self, node: usize) -> [f64; 2] {
        self.coords[node]
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.is_boundary[node]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.is_boundary
    }

    pub fn dist(&self) -> &[f64] {
        &self.dist
    }

    /// Tensor trapezoidal weights, boundary nodes included.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.node_count()).filter(move |&k| !self.is_boundary[k])
    }

    pub fn interior_count(&self) -> usize {
        self.is_boundary.iter().filter(|b| !**b).count()
    }

    /// Lebesgue measure of the box.
    pub fn measure(&self) -> f64 {
        self.spec.extents.iter().map(|[lo, hi]| hi - lo).product()
    }

    /// Grid index along each axis (`[i, 0]` in 1D).
    pub fn grid_index(&self, node: usize) -> [usize; 2] {
        let n = self.resolution();
        match self.dimension() {
            1 => [node, 0],
            _ => [node % n, node / n],
        }
    }

    pub fn node_at(&self, i: usize, j: usize) -> usize {
        match self.dimension() {
            1 => i,
            _ => j * self.resolution() + i,
        }
    }

    /// Cell edges of the tensor grid as `(a, b, axis)` with `b` the next node along `axis`.
    pub fn edges(&self) -> Vec<(usize, usize, usize)> {
        let n = self.resolution();
        let mut out = Vec::new();
        match self.dimension() {
            1 => {
                for i in 0..n - 1 {
                    out.push((i, i + 1, 0));
                }
            }
            _ => {
                for j in 0..n {
                    for i in 0..n {
                        let k = self.node_at(i, j);
                        if i + 1 < n {
                            out.push((k, self.node_at(i + 1, j), 0));
                        }
                        if j + 1 < n {
                            out.push((k, self.node_at(i, j + 1), 1));
                        }
                    }
                }
            }
        }
        out
    }

    /// Quadrature weight of an edge for gradient integrals: cell length along the edge
    /// times the trapezoidal weight transverse to it.
    pub fn edge_weight(&self, a: usize, axis: usize) -> f64 {
        match self.dimension() {
            1 => self.spacing[0],
            _ => {
                let [i, j] = self.grid_index(a);
                let n = self.resolution();
                let (other, idx) = if axis == 0 { (1, j) } else { (0, i) };
                let transverse = if idx == 0 || idx == n - 1 {
                    0.5 * self.spacing[other]
                } else {
                    self.spacing[other]
                };
                self.spacing[axis] * transverse
            }
        }
    }

    pub fn same_as(&self, other: &Mesh) -> bool {
        std::ptr::eq(self, other) || self.spec == other.spec
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.spec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MeshSpec = serde_json::from_str(text)?;
        spec.build()
    }

    /// Node table with columns `index, x[, y], dist, is_boundary`.
    pub fn write_nodes_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        if self.dimension() == 1 {
            writeln!(out, "index,x,dist,is_boundary")?;
        } else {
            writeln!(out, "index,x,y,dist,is_boundary")?;
        }
        for k in 0..self.node_count() {
            let [x, y] = self.coords[k];
            if self.dimension() == 1 {
                writeln!(
                    out,
                    "{k},{},{},{}",
                    fmt_f64(x),
                    fmt_f64(self.dist[k]),
                    self.is_boundary[k] as u8
                )?;
            } else {
                writeln!(
                    out,
                    "{k},{},{},{},{}",
                    fmt_f64(x),
                    fmt_f64(y),
                    fmt_f64(self.dist[k]),
                    self.is_boundary[k] as u8
                )?;
            }
        }
        Ok(())
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Trapezoidal (tensor-trapezoidal in 2D) quadrature of nodal data.
pub fn integrate(mesh: &Mesh, f: &GridFunction) -> Result<f64> {
    if !f.mesh().same_as(mesh) {
        return Err(Error::MeshMismatch);
    }
    Ok(mesh
        .weights()
        .iter()
        .zip(f.values())
        .map(|(w, v)| w * v)
        .sum())
}

const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// Exact integral of `min(s, q)^p` for `s` in `[0, len]`.
fn clipped_power_integral(len: f64, q: f64, p: f64) -> f64 {
    if q >= len {
        len.powf(p + 1.0) / (p + 1.0)
    } else {
        q.powf(p + 1.0) / (p + 1.0) + (len - q) * q.powf(p)
    }
}

/// Exact integral of `t^p` along a segment on which `t` is affine from `d0` to `d1`.
fn affine_power_integral(len: f64, d0: f64, d1: f64, p: f64) -> f64 {
    let diff = d1 - d0;
    if diff.abs() <= 1e-14 * (d0.abs() + d1.abs()) {
        len * (0.5 * (d0 + d1)).powf(p)
    } else {
        len * (d1.powf(p + 1.0) - d0.powf(p + 1.0)) / ((p + 1.0) * diff)
    }
}

/// Quadrature of `d(x)^exponent` over the domain.
///
/// The boundary is never sampled: cells touching it are integrated in closed form
/// along the normal direction, interior cells with tensor Gauss rules.
pub fn weighted_distance_integral(mesh: &Mesh, exponent: f64) -> Result<f64> {
    if !(exponent > -1.0) {
        return Err(Error::NonIntegrable { exponent });
    }
    let p = exponent;
    let n = mesh.resolution();
    match mesh.dimension() {
        1 => {
            let [lo, hi] = mesh.extents()[0];
            let mid = 0.5 * (lo + hi);
            let dist = |x: f64| (x - lo).min(hi - x).max(0.0);
            let mut total = 0.0;
            for i in 0..n - 1 {
                let a = mesh.coord(i)[0];
                let b = mesh.coord(i + 1)[0];
                if a < mid && mid < b {
                    total += affine_power_integral(mid - a, dist(a), dist(mid), p);
                    total += affine_power_integral(b - mid, dist(mid), dist(b), p);
                } else {
                    total += affine_power_integral(b - a, dist(a), dist(b), p);
                }
            }
            Ok(total)
        }
        _ => {
            let ext = mesh.extents();
            let dist = |x: f64, y: f64| {
                let dx = (x - ext[0][0]).min(ext[0][1] - x);
                let dy = (y - ext[1][0]).min(ext[1][1] - y);
                dx.min(dy).max(0.0)
            };
            let hx = mesh.spacing()[0];
            let hy = mesh.spacing()[1];
            let mut total = 0.0;
            for j in 0..n - 1 {
                for i in 0..n - 1 {
                    let x0 = mesh.coord(mesh.node_at(i, j))[0];
                    let y0 = mesh.coord(mesh.node_at(i, j))[1];
                    let touch_x = i == 0 || i == n - 2;
                    let touch_y = j == 0 || j == n - 2;
                    total += match (touch_x, touch_y) {
                        (true, true) => {
                            let (a, b) = if hx <= hy { (hx, hy) } else { (hy, hx) };
                            a.powf(p + 2.0) / ((p + 1.0) * (p + 2.0)) + b * a.powf(p + 1.0)
                                / (p + 1.0)
                                - a.powf(p + 2.0) / (p + 2.0)
                        }
                        (true, false) | (false, true) => {
                            // normal coordinate s runs from the touching face; Gauss in t
                            let (len_s, len_t, t0) = if touch_x { (hx, hy, y0) } else { (hy, hx, x0) };
                            let sub = 4;
                            let dt = len_t / sub as f64;
                            let mut acc = 0.0;
                            for k in 0..sub {
                                let c = t0 + (k as f64 + 0.5) * dt;
                                for (g, w) in GAUSS3 {
                                    let t = c + 0.5 * dt * g;
                                    let q = if touch_x {
                                        let dy = (t - ext[1][0]).min(ext[1][1] - t);
                                        let far = ext[0][1] - ext[0][0] - len_s;
                                        dy.min(far)
                                    } else {
                                        let dx = (t - ext[0][0]).min(ext[0][1] - t);
                                        let far = ext[1][1] - ext[1][0] - len_s;
                                        dx.min(far)
                                    };
                                    acc += 0.5 * dt * w * clipped_power_integral(len_s, q, p);
                                }
                            }
                            acc
                        }
                        (false, false) => {
                            let mut acc = 0.0;
                            for (gx, wx) in GAUSS3 {
                                for (gy, wy) in GAUSS3 {
                                    let x = x0 + 0.5 * hx * (1.0 + gx);
                                    let y = y0 + 0.5 * hy * (1.0 + gy);
                                    acc += 0.25 * hx * hy * wx * wy * dist(x, y).powf(p);
                                }
                            }
                            acc
                        }
                    };
                }
            }
            Ok(total)
        }
    }
}
