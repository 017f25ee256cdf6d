//! Jacobi-preconditioned conjugate gradient for shifted Laplacian systems
//! `(I + c·L) x = b`, the linear solve behind each implicit Euler step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    /// Relative residual target `‖r‖ ≤ tolerance · ‖b‖`.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("conjugate gradient stopped after {iterations} iterations with relative residual {residual:e}")]
pub struct CgNonConvergence {
    pub residual: f64,
    pub iterations: usize,
}

/// Solves `(I + shift·L) x = b` for a symmetric positive semidefinite `L`.
pub fn solve_shifted(
    laplacian: &CsrMatrix,
    shift: f64,
    b: &[f64],
    cfg: CgConfig,
) -> Result<(Vec<f64>, usize), CgNonConvergence> {
    let n = b.len();
    let apply = |x: &[f64]| -> Vec<f64> {
        let lx = laplacian.matvec(x);
        x.iter().zip(lx).map(|(xi, li)| xi + shift * li).collect()
    };
    let precond: Vec<f64> = laplacian.diagonal().iter().map(|d| 1.0 / (1.0 + shift * d)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(ri, pi)| ri * pi).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=cfg.max_iter {
        let ap = apply(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = dot(&r, &r).sqrt() / b_norm;
        if res <= cfg.tolerance {
            return Ok((x, it));
        }
        for i in 0..n {
            z[i] = r[i] * precond[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let residual = dot(&r, &r).sqrt() / b_norm;
    Err(CgNonConvergence { residual, iterations: cfg.max_iter })
}

/// Column-by-column solve of `(I + shift·L) X = B`.
pub fn solve_shifted_columns(
    laplacian: &CsrMatrix,
    shift: f64,
    rhs: &Matrix,
    cfg: CgConfig,
) -> Result<Matrix, CgNonConvergence> {
    let (n, m) = (rhs.rows(), rhs.cols());
    let columns: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| solve_shifted(laplacian, shift, &rhs.col(j), cfg).map(|(x, _)| x))
        .collect::<Result<_, _>>()?;
    let mut out = Matrix::zeros(n, m);
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_laplacian, fixtures, LaplacianKind};

    #[test]
    fn path_single_implicit_step() {
        // (I + L) x = e0 on the 3-node path; exact answer [5/8, 1/4, 1/8]
        let l = build_laplacian(&fixtures::path(3), LaplacianKind::Combinatorial);
        let (x, _) = solve_shifted(&l, 1.0, &[1.0, 0.0, 0.0], CgConfig { tolerance: 1e-14, max_iter: 50 })
            .unwrap();
        for (got, want) in x.iter().zip([0.625, 0.25, 0.125]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rhs_is_zero() {
        let l = build_laplacian(&fixtures::path(4), LaplacianKind::Combinatorial);
        assert_eq!(solve_shifted(&l, 2.0, &[0.0; 4], CgConfig::default()).unwrap(), (vec![0.0; 4], 0));
    }

    #[test]
    fn reports_nonconvergence() {
        let l = build_laplacian(&fixtures::path(30), LaplacianKind::Combinatorial);
        let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let err = solve_shifted(&l, 100.0, &b, CgConfig { tolerance: 1e-14, max_iter: 2 }).unwrap_err();
        assert_eq!(err.iterations, 2);
        assert!(err.residual > 1e-14);
    }
}
