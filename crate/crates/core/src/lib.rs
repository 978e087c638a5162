//! Discretization, solvers and diagnostics for a singular elliptic system with
//! Dirichlet data: `-div(A grad u) + v u^(r-1) = u^(-gamma)`, `-div(M grad v) = u^r`.

pub mod coupled;
pub mod elliptic;
pub mod error;
pub mod experiment;
pub mod field;
pub mod linalg;
pub mod mesh;
pub mod oracle;
pub mod singular;
pub mod variational;

pub use error::{Error, Result};
