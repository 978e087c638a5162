//! Nodal scalar fields and matrix-valued coefficient fields.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mesh::{fmt_f64, Mesh};

/// Scalar nodal values on a mesh. Boundary traces are the values at boundary nodes.
#[derive(Debug, Clone)]
pub struct GridFunction {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Norms {
    pub linf: f64,
    pub l2: f64,
    pub h1_seminorm: f64,
}

impl GridFunction {
    pub fn new(mesh: &Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.node_count() {
            return Err(Error::LengthMismatch {
                expected: mesh.node_count(),
                found: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(k));
        }
        Ok(Self {
            mesh: Arc::clone(mesh),
            values,
        })
    }

    pub fn zeros(mesh: &Arc<Mesh>) -> Self {
        Self {
            mesh: Arc::clone(mesh),
            values: vec![0.0; mesh.node_count()],
        }
    }

    pub fn constant(mesh: &Arc<Mesh>, c: f64) -> Self {
        Self {
            mesh: Arc::clone(mesh),
            values: vec![c; mesh.node_count()],
        }
    }

    /// Samples `f` at the node coordinates.
    pub fn from_fn(mesh: &Arc<Mesh>, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = mesh.coords().iter().map(|&p| f(p)).collect();
        Self {
            mesh: Arc::clone(mesh),
            values,
        }
    }

    /// Random combination of the lowest `modes` Dirichlet sine modes per axis, scaled to
    /// unit maximum modulus. Vanishes on the boundary.
    pub fn random_smooth(mesh: &Arc<Mesh>, rng: &mut impl Rng, modes: usize) -> Self {
        let modes = modes.max(1);
        let ext = mesh.extents().to_vec();
        let unit = |p: [f64; 2], axis: usize| (p[axis] - ext[axis][0]) / (ext[axis][1] - ext[axis][0]);
        let f = match mesh.dimension() {
            1 => {
                let c: Vec<f64> = (0..modes).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Self::from_fn(mesh, |p| {
                    let x = unit(p, 0);
                    c.iter()
                        .enumerate()
                        .map(|(k, c)| c * ((k + 1) as f64 * PI * x).sin())
                        .sum()
                })
            }
            _ => {
                let c: Vec<f64> = (0..modes * modes).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Self::from_fn(mesh, |p| {
                    let (x, y) = (unit(p, 0), unit(p, 1));
                    let mut acc = 0.0;
                    for k in 0..modes {
                        for l in 0..modes {
                            acc += c[k * modes + l]
                                * ((k + 1) as f64 * PI * x).sin()
                                * ((l + 1) as f64 * PI * y).sin();
                        }
                    }
                    acc
                })
            }
        };
        let scale = f.linf();
        if scale > 0.0 {
            f.scaled(1.0 / scale)
        } else {
            f
        }
    }

    /// Distance-to-boundary as a grid function.
    pub fn distance(mesh: &Arc<Mesh>) -> Self {
        Self {
            mesh: Arc::clone(mesh),
            values: mesh.dist().to_vec(),
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            mesh: Arc::clone(&self.mesh),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// Nodewise `self + c * other`.
    pub fn axpy(&self, c: f64, other: &GridFunction) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            mesh: Arc::clone(&self.mesh),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + c * b)
                .collect(),
        })
    }

    pub fn check_same(&self, other: &GridFunction) -> Result<()> {
        if self.mesh.same_as(&other.mesh) {
            Ok(())
        } else {
            Err(Error::MeshMismatch)
        }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn linf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2(&self) -> f64 {
        self.mesh
            .weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Squared discrete gradient norm: forward differences on every cell edge,
    /// weighted by the edge's share of the domain. For data vanishing on the boundary
    /// this equals the Dirichlet form of the five-point (three-point) Laplacian.
    pub fn gradient_energy(&self) -> f64 {
        self.weighted_gradient_energy(|_, _| 1.0)
    }

    /// Same as [`gradient_energy`](Self::gradient_energy) with a per-edge factor.
    pub fn weighted_gradient_energy(&self, factor: impl Fn(usize, usize) -> f64) -> f64 {
        let mesh = &self.mesh;
        let mut acc = 0.0;
        for (a, b, axis) in mesh.edges() {
            let f = factor(a, b);
            if f == 0.0 {
                continue;
            }
            let h = mesh.spacing()[axis];
            let slope = (self.values[b] - self.values[a]) / h;
            acc += f * mesh.edge_weight(a, axis) * slope * slope;
        }
        acc
    }

    pub fn h1_seminorm(&self) -> f64 {
        self.gradient_energy().sqrt()
    }

    pub fn norms(&self) -> Norms {
        Norms {
            linf: self.linf(),
            l2: self.l2(),
            h1_seminorm: self.h1_seminorm(),
        }
    }

    /// L2 norm of `self - other`.
    pub fn l2_distance(&self, other: &GridFunction) -> Result<f64> {
        Ok(self.axpy(-1.0, other)?.l2())
    }

    pub fn linf_distance(&self, other: &GridFunction) -> Result<f64> {
        Ok(self.axpy(-1.0, other)?.linf())
    }

    /// Positive part `(self - eps)^+`.
    pub fn positive_part_above(&self, eps: f64) -> Self {
        self.map(|v| (v - eps).max(0.0))
    }

    /// Writes `index,value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "index,value")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(out, "{k},{}", fmt_f64(*v))?;
        }
        Ok(())
    }

    pub fn read_csv(mesh: &Arc<Mesh>, path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut values = vec![f64::NAN; mesh.node_count()];
        for record in reader.records() {
            let record = record?;
            let k: usize = record[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad index in {}", path.display())))?;
            let v: f64 = record[1]
                .parse()
                .map_err(|_| Error::Config(format!("bad value in {}", path.display())))?;
            if k >= values.len() {
                return Err(Error::LengthMismatch {
                    expected: values.len(),
                    found: k + 1,
                });
            }
            values[k] = v;
        }
        GridFunction::new(mesh, values)
    }
}

/// Free-function form of [`GridFunction::norms`].
pub fn norms(f: &GridFunction) -> Norms {
    f.norms()
}

/// Symmetric matrix coefficient sampled at the nodes, stored as 2x2 blocks
/// (only the `[0][0]` entry is meaningful in 1D).
#[derive(Debug, Clone)]
pub struct CoefficientField {
    mesh: Arc<Mesh>,
    entries: Vec<[[f64; 2]; 2]>,
    alpha: f64,
    beta: f64,
}

/// Named coefficient presets addressable from configs.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientPreset {
    Identity,
    Diagonal(Vec<f64>),
    SinPerturbed(f64),
}

impl CoefficientPreset {
    pub const NAMES: [&'static str; 3] = ["identity", "diag:a,b", "sin-perturbed:amplitude"];

    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (name, args) = match text.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a)),
            None => (text, None),
        };
        let numbers = |a: &str| -> Result<Vec<f64>> {
            a.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::UnknownPreset(text.to_string()))
                })
                .collect()
        };
        match (name, args) {
            ("identity", None) => Ok(Self::Identity),
            ("diag", Some(a)) => {
                let vals = numbers(a)?;
                if vals.is_empty() || vals.len() > 2 {
                    return Err(Error::UnknownPreset(text.to_string()));
                }
                Ok(Self::Diagonal(vals))
            }
            ("sin-perturbed", Some(a)) => {
                let vals = numbers(a)?;
                if vals.len() != 1 {
                    return Err(Error::UnknownPreset(text.to_string()));
                }
                Ok(Self::SinPerturbed(vals[0]))
            }
            _ => Err(Error::UnknownPreset(text.to_string())),
        }
    }

    /// Scalar multiplier `a(x)` of the sin-perturbed family on normalized coordinates.
    fn sin_factor(amplitude: f64, mesh: &Mesh, p: [f64; 2]) -> f64 {
        let ext = mesh.extents();
        let s = |axis: usize| {
            let [lo, hi] = ext[axis];
            (PI * (p[axis] - lo) / (hi - lo)).sin()
        };
        match mesh.dimension() {
            1 => 1.0 + amplitude * s(0),
            _ => 1.0 + amplitude * s(0) * s(1),
        }
    }

    pub fn build(&self, mesh: &Arc<Mesh>) -> Result<CoefficientField> {
        match self {
            Self::Identity => CoefficientField::from_fn(mesh, |_| [[1.0, 0.0], [0.0, 1.0]]),
            Self::Diagonal(vals) => {
                let a = vals[0];
                // the second entry is ignored in 1D
                let b = if vals.len() > 1 { vals[1] } else { vals[0] };
                CoefficientField::from_fn(mesh, move |_| [[a, 0.0], [0.0, b]])
            }
            Self::SinPerturbed(amp) => {
                let amp = *amp;
                let m = Arc::clone(mesh);
                CoefficientField::from_fn(mesh, move |p| {
                    let f = Self::sin_factor(amp, &m, p);
                    [[f, 0.0], [0.0, f]]
                })
            }
        }
    }
}

impl CoefficientField {
    /// Samples a matrix-valued function at the nodes and certifies ellipticity.
    pub fn from_fn(mesh: &Arc<Mesh>, f: impl Fn([f64; 2]) -> [[f64; 2]; 2]) -> Result<Self> {
        let entries = mesh.coords().iter().map(|&p| f(p)).collect();
        Self::from_entries(mesh, entries)
    }

    pub fn from_entries(mesh: &Arc<Mesh>, mut entries: Vec<[[f64; 2]; 2]>) -> Result<Self> {
        if entries.len() != mesh.node_count() {
            return Err(Error::LengthMismatch {
                expected: mesh.node_count(),
                found: entries.len(),
            });
        }
        if mesh.dimension() == 1 {
            for e in &mut entries {
                e[0][1] = 0.0;
                e[1][0] = 0.0;
                e[1][1] = e[0][0];
            }
        }
        let mut field = Self {
            mesh: Arc::clone(mesh),
            entries,
            alpha: 0.0,
            beta: 0.0,
        };
        let (alpha, beta) = field.validate_ellipticity()?;
        field.alpha = alpha;
        field.beta = beta;
        Ok(field)
    }

    pub fn preset(name: &str, mesh: &Arc<Mesh>) -> Result<Self> {
        CoefficientPreset::parse(name)?.build(mesh)
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn entry(&self, node: usize) -> [[f64; 2]; 2] {
        self.entries[node]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_diagonal(&self) -> bool {
        self.entries.iter().all(|e| e[0][1] == 0.0 && e[1][0] == 0.0)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|e| [[c * e[0][0], c * e[0][1]], [c * e[1][0], c * e[1][1]]])
            .collect();
        Self::from_entries(&self.mesh, entries)
    }

    /// Tightest `(alpha, beta)` over all nodes from the nodal eigenvalue extremes.
    pub fn validate_ellipticity(&self) -> Result<(f64, f64)> {
        let mut alpha = f64::INFINITY;
        let mut beta = f64::NEG_INFINITY;
        let mut worst = 0;
        for (k, e) in self.entries.iter().enumerate() {
            if e.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(k));
            }
            let (lo, hi) = if self.mesh.dimension() == 1 {
                (e[0][0], e[0][0])
            } else {
                let scale = e[0][1].abs().max(e[1][0].abs()).max(1.0);
                if (e[0][1] - e[1][0]).abs() > 1e-14 * scale {
                    return Err(Error::NonSymmetric { node: k });
                }
                let m = 0.5 * (e[0][0] + e[1][1]);
                let r = (0.25 * (e[0][0] - e[1][1]).powi(2) + e[0][1] * e[0][1]).sqrt();
                (m - r, m + r)
            };
            if lo < alpha {
                alpha = lo;
                worst = k;
            }
            beta = beta.max(hi);
        }
        if !(alpha > 0.0) {
            return Err(Error::DegenerateEllipticity { alpha, node: worst });
        }
        Ok((alpha, beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;
    use proptest::prelude::*;

    fn interval(res: usize) -> Arc<Mesh> {
        Arc::new(Mesh::unit_interval(res).unwrap())
    }

    #[test]
    fn identity_and_diagonal() {
        let m = Arc::new(Mesh::unit_square(5).unwrap());
        let id = CoefficientField::preset("identity", &m).unwrap();
        assert_eq!(id.validate_ellipticity().unwrap(), (1.0, 1.0));
        let d = CoefficientField::preset("diag:2,3", &m).unwrap();
        assert_eq!(d.validate_ellipticity().unwrap(), (2.0, 3.0));
    }

    #[test]
    fn sin_perturbed_bounds_match_dense_sampling() {
        let res = 201;
        let m = interval(res);
        let field = CoefficientField::preset("sin-perturbed:0.5", &m).unwrap();
        let (alpha, beta) = field.validate_ellipticity().unwrap();
        // dense sampling oracle of 1 + sin(pi x)/2 on [0, 1]
        let samples: Vec<f64> = (0..=100_000)
            .map(|k| 1.0 + 0.5 * (PI * k as f64 / 100_000.0).sin())
            .collect();
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((alpha - lo).abs() <= 1.0 / res as f64);
        assert!((beta - hi).abs() <= 1.0 / res as f64);
        assert!((alpha - 1.0).abs() < 1e-12 && (beta - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_and_asymmetric() {
        let m = Arc::new(Mesh::unit_square(4).unwrap());
        let err = CoefficientField::from_fn(&m, |_| [[1.0, 0.0], [0.0, -1.0]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateEllipticity { .. }));
        let err = CoefficientField::from_fn(&m, |_| [[1.0, 0.3], [0.1, 1.0]]).unwrap_err();
        assert!(matches!(err, Error::NonSymmetric { .. }));
        assert!(CoefficientField::preset("diag:1,0", &m).is_err());
        assert!(matches!(
            CoefficientField::preset("bogus", &m),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn certified_bounds_hold_on_test_directions() {
        let m = Arc::new(Mesh::unit_square(9).unwrap());
        let field =
            CoefficientField::from_fn(&m, |p| [[2.0 + p[0], 0.5 * p[1]], [0.5 * p[1], 1.5]])
                .unwrap();
        let s = 0.5f64.sqrt();
        let dirs = [[1.0, 0.0], [0.0, 1.0], [s, s], [s, -s]];
        for k in 0..m.node_count() {
            let e = field.entry(k);
            for xi in dirs {
                let q = xi[0] * (e[0][0] * xi[0] + e[0][1] * xi[1])
                    + xi[1] * (e[1][0] * xi[0] + e[1][1] * xi[1]);
                assert!(q >= field.alpha() - 1e-12 && q <= field.beta() + 1e-12);
            }
        }
    }

    #[test]
    fn norm_examples() {
        let m = interval(33);
        let z = GridFunction::zeros(&m);
        assert_eq!(z.norms(), Norms { linf: 0.0, l2: 0.0, h1_seminorm: 0.0 });
        let x = GridFunction::from_fn(&m, |p| p[0]);
        let n = x.norms();
        assert_eq!(n.linf, 1.0);
        assert!((n.h1_seminorm - 1.0).abs() < 1e-12);

        let m = interval(257);
        let s = GridFunction::from_fn(&m, |p| (PI * p[0]).sin());
        let n = s.norms();
        assert!((n.l2 - 0.5f64.sqrt()).abs() < 1e-3);
        assert!((n.h1_seminorm - PI * 0.5f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn h1_seminorm_vanishes_only_for_constants() {
        let m = Arc::new(build_mesh(2, &[[0.0, 2.0], [0.0, 1.0]], 6).unwrap());
        assert_eq!(GridFunction::constant(&m, 3.5).h1_seminorm(), 0.0);
        let mut f = GridFunction::constant(&m, 3.5);
        f.values_mut()[7] += 1e-3;
        assert!(f.h1_seminorm() > 0.0);
    }

    #[test]
    fn mismatched_meshes() {
        let a = GridFunction::zeros(&interval(5));
        let b = GridFunction::zeros(&interval(7));
        assert!(matches!(a.axpy(1.0, &b), Err(Error::MeshMismatch)));
        assert!(GridFunction::new(&interval(5), vec![0.0; 4]).is_err());
        assert!(GridFunction::new(&interval(3), vec![0.0, f64::NAN, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn norms_are_absolutely_homogeneous(c in -5.0f64..5.0, seed in 0u64..1000) {
            let m = Arc::new(Mesh::unit_square(7).unwrap());
            let f = GridFunction::from_fn(&m, |p| ((seed as f64 + 1.0) * p[0]).sin() + p[1] * p[1]);
            let a = f.norms();
            let b = f.scaled(c).norms();
            let tol = 1e-12 * (1.0 + a.linf + a.l2 + a.h1_seminorm);
            prop_assert!((b.linf - c.abs() * a.linf).abs() <= tol * 5.0);
            prop_assert!((b.l2 - c.abs() * a.l2).abs() <= tol * 5.0);
            prop_assert!((b.h1_seminorm - c.abs() * a.h1_seminorm).abs() <= tol * 5.0);
        }

        #[test]
        fn ellipticity_is_scale_covariant(lambda in 0.01f64..100.0, amp in 0.0f64..0.9) {
            let m = Arc::new(Mesh::unit_square(6).unwrap());
            let field = CoefficientField::preset(&format!("sin-perturbed:{amp}"), &m).unwrap();
            let (a, b) = field.validate_ellipticity().unwrap();
            let (sa, sb) = field.scaled(lambda).unwrap().validate_ellipticity().unwrap();
            prop_assert!((sa - lambda * a).abs() <= 1e-12 * lambda * a.max(1.0));
            prop_assert!((sb - lambda * b).abs() <= 1e-12 * lambda * b.max(1.0));
        }
    }
}
