//! Smallest eigenpairs of graph Laplacians (dense below a size cutoff,
//! Lanczos above it) and the spectral coordinates built from them.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::sparse::CsrMatrix;

/// Graphs up to this size use the dense solver.
pub const DENSE_LIMIT: usize = 256;
/// Largest size for which a failed Lanczos run falls back to dense.
pub const DENSE_FALLBACK_LIMIT: usize = 3000;
/// Eigenvalues at or below this are treated as zero by the pseudoinverse.
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("k = {k} is outside 1..={n}")]
    InvalidK { k: usize, n: usize },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("Lanczos did not converge: worst residual {residual:e} after {iterations} steps")]
    ConvergenceFailure { residual: f64, iterations: usize },
    #[error("split index {index} outside 1..{len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Ascending eigenvalues with their eigenvectors as N×k columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.col(j)
    }

    /// Largest `‖Lv − λv‖₂` over the stored pairs.
    pub fn max_residual(&self, laplacian: &CsrMatrix) -> f64 {
        (0..self.len())
            .map(|j| {
                let v = self.vector(j);
                let lv = laplacian.matvec(&v);
                lv.iter().zip(&v).map(|(a, b)| (a - self.values[j] * b).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateMode {
    /// `s_i = [φ₁(i), …, φ_k(i)]`
    #[default]
    EigenvectorRows,
    /// Row `i` of the (truncated) pseudoinverse, first `k` columns.
    PseudoinverseRows,
}

/// Flips each column so its first clearly nonzero entry is positive.
fn fix_signs(vectors: &mut Matrix) {
    let (n, k) = (vectors.rows(), vectors.cols());
    for j in 0..k {
        let scale = (0..n).map(|i| vectors.get(i, j).abs()).fold(0.0, f64::max);
        let first = (0..n).map(|i| vectors.get(i, j)).find(|v| v.abs() > 1e-8 * scale);
        if first.is_some_and(|v| v < 0.0) {
            for i in 0..n {
                vectors.set(i, j, -vectors.get(i, j));
            }
        }
    }
}

/// Full dense decomposition, keeping the `k` smallest pairs.
pub fn dense_eigenpairs(laplacian: &CsrMatrix, k: usize) -> EigenPairs {
    let n = laplacian.nrows();
    let dense = laplacian.to_dense();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, dense.data()));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut vectors = Matrix::zeros(n, k);
    let mut values = Vec::with_capacity(k);
    for (j, &src) in order.iter().take(k).enumerate() {
        values.push(eig.eigenvalues[src]);
        for i in 0..n {
            vectors.set(i, j, eig.eigenvectors[(i, src)]);
        }
    }
    fix_signs(&mut vectors);
    EigenPairs { values, vectors }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LanczosConfig {
    /// Ritz residual target relative to an estimate of ‖L‖.
    pub tolerance: f64,
    /// Krylov dimension cap (clamped to N).
    pub max_dim: usize,
    pub seed: u64,
}

impl Default for LanczosConfig {
    fn default() -> Self {
        Self { tolerance: 1e-12, max_dim: 2000, seed: 0x5eed }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonalizes `w` against every vector of `locked` and `basis`, twice
/// for stability.
fn reorthogonalize(w: &mut [f64], locked: &[Vec<f64>], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in locked.iter().chain(basis) {
            let c = dot(w, q);
            for (wi, qi) in w.iter_mut().zip(q) {
                *wi -= c * qi;
            }
        }
    }
}

/// Lanczos with full reorthogonalization. A single Krylov sequence sees only
/// one direction per eigenspace, so after convergence the orthogonal
/// complement of the accepted vectors is searched again; any smaller
/// eigenvalue found there (a missing copy of a repeated eigenvalue) is merged
/// in and the search repeats.
pub fn lanczos_eigenpairs(laplacian: &CsrMatrix, k: usize, cfg: LanczosConfig) -> Result<EigenPairs, SpectralError> {
    let n = laplacian.nrows();
    if k == 0 || k > n {
        return Err(SpectralError::InvalidK { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Gershgorin bound on the spectral radius
    let norm_est = (0..n)
        .map(|i| laplacian.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1.0);
    let run = |rng: &mut ChaCha8Rng, want: usize, locked: &[Vec<f64>]| {
        lanczos_complement(laplacian, want, locked, cfg, norm_est, rng)
    };

    let mut found = run(&mut rng, k, &[])?;
    // each round either terminates or adds at least one new eigenvector
    for _ in 0..n {
        let locked: Vec<Vec<f64>> = found.iter().map(|(_, v)| v.clone()).collect();
        if locked.len() >= n {
            break;
        }
        let probe = run(&mut rng, (n - locked.len()).min(4), &locked)?;
        let kth = found[k - 1].0;
        let smaller: Vec<_> = probe.into_iter().filter(|(val, _)| *val < kth - 1e-10 * norm_est).collect();
        if smaller.is_empty() {
            break;
        }
        found.extend(smaller);
        found.sort_by(|a, b| a.0.total_cmp(&b.0));
        found.truncate(k);
    }

    let mut vectors = Matrix::zeros(n, k);
    for (j, (_, v)) in found.iter().enumerate() {
        for (i, &x) in v.iter().enumerate() {
            vectors.set(i, j, x);
        }
    }
    fix_signs(&mut vectors);
    Ok(EigenPairs { values: found.iter().map(|(val, _)| *val).collect(), vectors })
}

/// The `want` smallest Ritz pairs of `L` restricted to the orthogonal
/// complement of `locked` (orthonormal eigenvectors), ascending.
fn lanczos_complement(
    laplacian: &CsrMatrix,
    want: usize,
    locked: &[Vec<f64>],
    cfg: LanczosConfig,
    norm_est: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(f64, Vec<f64>)>, SpectralError> {
    let n = laplacian.nrows();
    let dim = n - locked.len();
    let max_dim = cfg.max_dim.min(dim).max(want);

    let random_unit = |rng: &mut ChaCha8Rng, basis: &[Vec<f64>]| -> Option<Vec<f64>> {
        for _ in 0..5 {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            reorthogonalize(&mut v, locked, basis);
            let nv = dot(&v, &v).sqrt();
            if nv > 1e-8 {
                v.iter_mut().for_each(|x| *x /= nv);
                return Some(v);
            }
        }
        None
    };

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_dim);
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new(); // beta[j] couples basis j and j+1
    basis.push(random_unit(rng, &[]).expect("nonzero start vector"));
    let mut worst = f64::INFINITY;

    loop {
        let m = basis.len();
        let q = &basis[m - 1];
        let mut w = laplacian.matvec(q);
        let a = dot(&w, q);
        alpha.push(a);
        reorthogonalize(&mut w, locked, &basis);
        let b = dot(&w, &w).sqrt();

        let check = m >= want && (m % 5 == 0 || m == max_dim || b < 1e-10 * norm_est);
        if check {
            let (vals, vecs) = tridiagonal_eigen(&alpha, &beta);
            // residual of Ritz pair j is |b · s_{m−1, j}|
            worst = (0..want).map(|j| (b * vecs[(m - 1, j)]).abs()).fold(0.0, f64::max);
            if worst <= cfg.tolerance * norm_est || m == dim {
                return Ok(ritz_pairs(&basis, &vals, &vecs, want));
            }
        }
        if m == max_dim {
            return Err(SpectralError::ConvergenceFailure { residual: worst, iterations: m });
        }
        if b < 1e-10 * norm_est {
            // invariant subspace found; continue in its orthogonal complement
            beta.push(0.0);
            match random_unit(rng, &basis) {
                Some(v) => basis.push(v),
                None => {
                    let (vals, vecs) = tridiagonal_eigen(&alpha, &beta[..m - 1]);
                    return Ok(ritz_pairs(&basis, &vals, &vecs, want.min(m)));
                }
            }
        } else {
            beta.push(b);
            w.iter_mut().for_each(|x| *x /= b);
            basis.push(w);
        }
    }
}

/// Ascending eigen-decomposition of the symmetric tridiagonal matrix.
fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m, m, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

fn ritz_pairs(basis: &[Vec<f64>], vals: &[f64], vecs: &DMatrix<f64>, k: usize) -> Vec<(f64, Vec<f64>)> {
    let n = basis[0].len();
    (0..k)
        .map(|j| {
            let mut v = vec![0.0; n];
            for (r, q) in basis.iter().enumerate() {
                let c = vecs[(r, j)];
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi += c * qi;
                }
            }
            let nv = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= nv);
            (vals[j], v)
        })
        .collect()
}

/// The `k` smallest eigenpairs of a symmetric matrix.
pub fn topk_smallest_eigenpairs(laplacian: &CsrMatrix, k: usize) -> Result<EigenPairs, SpectralError> {
    let n = laplacian.nrows();
    if k == 0 || k > n {
        return Err(SpectralError::InvalidK { k, n });
    }
    if !laplacian.is_symmetric(1e-12) {
        return Err(SpectralError::NotSymmetric);
    }
    if n <= DENSE_LIMIT {
        return Ok(dense_eigenpairs(laplacian, k));
    }
    match lanczos_eigenpairs(laplacian, k, LanczosConfig::default()) {
        Err(SpectralError::ConvergenceFailure { .. }) if n <= DENSE_FALLBACK_LIMIT => Ok(dense_eigenpairs(laplacian, k)),
        other => other,
    }
}

pub fn spectral_coordinates(pairs: &EigenPairs, mode: CoordinateMode) -> Matrix {
    match mode {
        CoordinateMode::EigenvectorRows => pairs.vectors.clone(),
        CoordinateMode::PseudoinverseRows => {
            let (n, k) = (pairs.vectors.rows(), pairs.len());
            let width = k.min(n);
            let mut out = Matrix::zeros(n, width);
            for (j, &lambda) in pairs.values.iter().enumerate() {
                if lambda <= ZERO_EIGENVALUE_TOL {
                    continue;
                }
                let v = pairs.vector(j);
                for i in 0..n {
                    let vi = v[i] / lambda;
                    if vi == 0.0 {
                        continue;
                    }
                    for c in 0..width {
                        out.set(i, c, out.get(i, c) + vi * v[c]);
                    }
                }
            }
            out
        }
    }
}

/// `values[split] − values[split − 1]`.
pub fn eigengap(pairs: &EigenPairs, split: usize) -> Result<f64, SpectralError> {
    if split == 0 || split >= pairs.len() {
        return Err(SpectralError::IndexOutOfRange { index: split, len: pairs.len() });
    }
    Ok((pairs.values[split] - pairs.values[split - 1]).max(0.0))
}
