//! Flux-form finite differences for `-div(A grad u)` with homogeneous Dirichlet data,
//! linear solves, and the principal Dirichlet eigenpair.
//!
//! Unknowns live on interior nodes only. Edge coefficients are harmonic means of the
//! nodal diagonal entries, so the assembled matrix is a symmetric M-matrix.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{CoefficientField, GridFunction};
use crate::linalg::{pcg, solve_tridiagonal, CsrMatrix};
use crate::mesh::Mesh;

#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    mesh: Arc<Mesh>,
    interior: Vec<usize>,
    index_of: Vec<Option<usize>>,
    matrix: CsrMatrix,
    bands: Option<[Vec<f64>; 3]>,
    alpha: f64,
    beta: f64,
    node_volume: f64,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Assembles the operator; the mesh is the coefficient field's mesh.
pub fn assemble(field: &CoefficientField) -> Result<DiscreteOperator> {
    let (alpha, beta) = field.validate_ellipticity()?;
    if !field.is_diagonal() {
        return Err(Error::UnsupportedCoefficient(
            "flux-form assembly needs a diagonal coefficient matrix".into(),
        ));
    }
    let mesh = Arc::clone(field.mesh());
    let mut index_of = vec![None; mesh.node_count()];
    let interior: Vec<usize> = mesh.interior_nodes().collect();
    for (k, &g) in interior.iter().enumerate() {
        index_of[g] = Some(k);
    }
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); interior.len()];
    for (a, b, axis) in mesh.edges() {
        let h = mesh.spacing()[axis];
        let c = harmonic(field.entry(a)[axis][axis], field.entry(b)[axis][axis]) / (h * h);
        match (index_of[a], index_of[b]) {
            (Some(i), Some(j)) => {
                rows[i].push((i, c));
                rows[i].push((j, -c));
                rows[j].push((j, c));
                rows[j].push((i, -c));
            }
            (Some(i), None) => rows[i].push((i, c)),
            (None, Some(j)) => rows[j].push((j, c)),
            (None, None) => {}
        }
    }
    let matrix = CsrMatrix::from_rows(rows);
    let bands = if mesh.dimension() == 1 {
        let n = interior.len();
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let diag = matrix.diagonal();
        for i in 0..n {
            if i > 0 {
                lower[i] = matrix.get(i, i - 1);
            }
            if i + 1 < n {
                upper[i] = matrix.get(i, i + 1);
            }
        }
        Some([lower, diag, upper])
    } else {
        None
    };
    let node_volume = mesh.spacing().iter().product();
    Ok(DiscreteOperator {
        mesh,
        interior,
        index_of,
        matrix,
        bands,
        alpha,
        beta,
        node_volume,
    })
}

impl DiscreteOperator {
    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn interior_index(&self, node: usize) -> Option<usize> {
        self.index_of[node]
    }

    pub fn size(&self) -> usize {
        self.interior.len()
    }

    /// Ellipticity bounds of the coefficient the operator was built from.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Quadrature weight carried by each interior node.
    pub fn node_volume(&self) -> f64 {
        self.node_volume
    }

    pub fn restrict(&self, f: &GridFunction) -> Vec<f64> {
        self.interior.iter().map(|&g| f.values()[g]).collect()
    }

    /// Lifts interior values to a grid function that vanishes on the boundary.
    pub fn extend(&self, x: &[f64]) -> GridFunction {
        let mut out = GridFunction::zeros(&self.mesh);
        let vals = out.values_mut();
        for (k, &g) in self.interior.iter().enumerate() {
            vals[g] = x[k];
        }
        out
    }

    /// Interior values of `K u`, treating boundary values of `u` as zero.
    pub fn apply_interior(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.matvec(x)
    }

    pub fn apply(&self, u: &GridFunction) -> Result<GridFunction> {
        if !u.mesh().same_as(&self.mesh) {
            return Err(Error::MeshMismatch);
        }
        Ok(self.extend(&self.apply_interior(&self.restrict(u))))
    }

    /// Discrete `int A grad w . grad w` for `w` vanishing on the boundary.
    pub fn energy(&self, w: &GridFunction) -> f64 {
        let x = self.restrict(w);
        let kx = self.apply_interior(&x);
        self.node_volume * x.iter().zip(&kx).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Solves `(K + diag(shift)) x = rhs` on interior unknowns. The shift must be nonnegative.
    pub fn solve_shifted(
        &self,
        shift: Option<&[f64]>,
        rhs: &[f64],
        tol: f64,
        guess: Option<&[f64]>,
    ) -> Result<(Vec<f64>, usize)> {
        if let Some([lower, diag, upper]) = &self.bands {
            let d: Vec<f64> = match shift {
                Some(s) => diag.iter().zip(s).map(|(d, s)| d + s).collect(),
                None => diag.clone(),
            };
            return Ok((solve_tridiagonal(lower, &d, upper, rhs), 1));
        }
        let mut x = match guess {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.size()],
        };
        let max_iter = 50 * self.size().max(100);
        let out = pcg(&self.matrix, shift, rhs, &mut x, tol, max_iter)?;
        Ok((x, out.iterations))
    }

    /// Solves `K u = rhs` with `u = 0` on the boundary; relative residual at most `tol`.
    pub fn solve_linear(&self, rhs: &GridFunction, tol: f64) -> Result<GridFunction> {
        if !rhs.mesh().same_as(&self.mesh) {
            return Err(Error::MeshMismatch);
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
        }
        let b = self.restrict(rhs);
        let (x, _) = self.solve_shifted(None, &b, tol, None)?;
        Ok(self.extend(&x))
    }

    /// Relative residual `||K u - rhs|| / ||rhs||` over interior nodes.
    pub fn relative_residual(&self, u: &GridFunction, rhs: &GridFunction) -> f64 {
        let ku = self.apply_interior(&self.restrict(u));
        let b = self.restrict(rhs);
        let num: f64 = ku.iter().zip(&b).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = b.iter().map(|b| b * b).sum();
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }
}

/// Free-function form of [`DiscreteOperator::solve_linear`].
pub fn solve_linear(op: &DiscreteOperator, rhs: &GridFunction, tol: f64) -> Result<GridFunction> {
    op.solve_linear(rhs, tol)
}

/// Largest nodal gradient magnitude; centered differences inside, one-sided at the boundary.
pub fn gradient_linf(f: &GridFunction) -> f64 {
    let mesh = f.mesh();
    let n = mesh.resolution();
    let v = f.values();
    let mut best: f64 = 0.0;
    for k in 0..mesh.node_count() {
        let idx = mesh.grid_index(k);
        let mut sq = 0.0;
        for axis in 0..mesh.dimension() {
            let h = mesh.spacing()[axis];
            let step = |i: usize| {
                if axis == 0 {
                    mesh.node_at(i, idx[1])
                } else {
                    mesh.node_at(idx[0], i)
                }
            };
            let i = idx[axis];
            let g = if i == 0 {
                (v[step(1)] - v[step(0)]) / h
            } else if i == n - 1 {
                (v[step(n - 1)] - v[step(n - 2)]) / h
            } else {
                (v[step(i + 1)] - v[step(i - 1)]) / (2.0 * h)
            };
            sq += g * g;
        }
        best = best.max(sq.sqrt());
    }
    best
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub lambda1: f64,
    /// Normalized to unit maximum, zero on the boundary.
    pub phi1: GridFunction,
    pub grad_inf: f64,
    /// Tightest constants with `c1 d <= phi1 <= c2 d` at interior nodes.
    pub c1: f64,
    pub c2: f64,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub lambda1: f64,
    pub c1: f64,
    pub c2: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl EigenPair {
    pub fn report(&self) -> SpectrumReport {
        SpectrumReport {
            lambda1: self.lambda1,
            c1: self.c1,
            c2: self.c2,
            grad_inf: self.grad_inf,
            iterations: self.iterations,
            residual: self.residual,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.report())?)
    }
}

const MAX_EIGEN_ITERS: usize = 2000;

/// Inverse power iteration with zero shift. Stops when the relative Rayleigh residual
/// `||K phi - lambda phi|| / (lambda ||phi||)` drops below `tol`.
pub fn principal_eigenpair(op: &DiscreteOperator, tol: f64) -> Result<EigenPair> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let mesh = op.mesh();
    let mut x: Vec<f64> = op.interior().iter().map(|&g| mesh.dist()[g]).collect();
    let inner_tol = (tol * 1e-3).max(1e-14);
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    let mut guess: Option<Vec<f64>> = None;
    for it in 1..=MAX_EIGEN_ITERS {
        let (y, _) = op.solve_shifted(None, &x, inner_tol, guess.as_deref())?;
        // K y = x, so the Rayleigh quotient is (y.x)/(y.y)
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let yx: f64 = y.iter().zip(&x).map(|(a, b)| a * b).sum();
        lambda = yx / yy;
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let y: Vec<f64> = y.iter().map(|v| v / scale).collect();
        let ky = op.apply_interior(&y);
        let num: f64 = ky
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den = lambda * y.iter().map(|v| v * v).sum::<f64>().sqrt();
        residual = num / den;
        guess = Some(y.iter().map(|v| v / lambda).collect());
        x = y;
        if residual <= tol {
            let phi1 = op.extend(&x);
            let grad_inf = gradient_linf(&phi1);
            let (mut c1, mut c2) = (f64::INFINITY, 0.0f64);
            for &g in op.interior() {
                let ratio = phi1.values()[g] / mesh.dist()[g];
                c1 = c1.min(ratio);
                c2 = c2.max(ratio);
            }
            if x.iter().any(|v| *v <= 0.0) {
                return Err(Error::Invariant(
                    "principal eigenfunction is not positive inside".into(),
                ));
            }
            return Ok(EigenPair {
                lambda1: lambda,
                phi1,
                grad_inf,
                c1,
                c2,
                iterations: it,
                residual,
            });
        }
    }
    let _ = lambda;
    Err(Error::EigenSolver {
        iterations: MAX_EIGEN_ITERS,
        residual,
    })
}
