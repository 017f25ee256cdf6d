//! Fixed spectral coordinates through a trainable encoder and classifier.

use serde::{Deserialize, Serialize};

use super::{PhaseOutput, Result};
use crate::matrix::Matrix;
use crate::nn::{MlpHead, OutputActivation, ParamRegistry, ParamVars};
use crate::sparse::CsrMatrix;
use crate::spectral::{spectral_coordinates, topk_smallest_eigenpairs, CoordinateMode};
use crate::tensor::{SparseOperator, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub k: usize,
    /// Set from the top-level experiment config.
    #[serde(skip)]
    pub coordinate_mode: CoordinateMode,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { k: 16, coordinate_mode: CoordinateMode::EigenvectorRows }
    }
}

impl SpectralConfig {
    /// `k` clamped to `1..=N−1`.
    pub fn effective_k(&self, n: usize) -> usize {
        self.k.min(n.saturating_sub(1)).max(1)
    }
}

/// Spectral coordinates for the encoder, computed once per graph. Columns are
/// multiplied by √N so unit eigenvectors give O(1) entries.
pub fn spectral_features(laplacian: &CsrMatrix, config: &SpectralConfig) -> Result<Matrix> {
    let n = laplacian.nrows();
    let pairs = topk_smallest_eigenpairs(laplacian, config.effective_k(n))?;
    Ok(spectral_coordinates(&pairs, config.coordinate_mode).scale((n as f64).sqrt()))
}

/// `tr(ZᵀLZ) / (N·D·(var(Z) + 1e−8))`.
pub fn spec_consistency<'t>(z: Var<'t>, laplacian: &SparseOperator) -> Result<Var<'t>> {
    let [n, d] = z.shape();
    let dirichlet = z.mul(z.spmm_left(laplacian)?)?.sum();
    let mean = z.mean();
    let var = z.mul(z)?.mean().sub(mean.mul(mean)?)?;
    let denom = var.add_scalar(1e-8).scale((n * d) as f64);
    Ok(dirichlet.mul(denom.recip())?)
}

#[derive(Clone, Debug)]
pub struct SpectralPhase {
    pub encoder: MlpHead,
    pub classifier: MlpHead,
}

impl SpectralPhase {
    pub fn new(reg: &mut ParamRegistry, k: usize, d_h: usize, num_classes: usize) -> Self {
        Self {
            encoder: MlpHead::new(reg, "spectral.encoder", k, d_h, d_h, OutputActivation::Identity),
            classifier: MlpHead::new(reg, "spectral.classifier", d_h, d_h, num_classes, OutputActivation::Identity),
        }
    }

    pub fn encode<'t>(&self, ps: &ParamVars<'t>, coords: Var<'t>) -> Result<Var<'t>> {
        Ok(self.encoder.forward(ps, coords)?)
    }

    pub fn readout<'t>(&self, ps: &ParamVars<'t>, z: Var<'t>) -> Result<Var<'t>> {
        Ok(self.classifier.forward(ps, z)?.softmax())
    }

    pub fn forward<'t>(&self, ps: &ParamVars<'t>, coords: Var<'t>, laplacian: &SparseOperator) -> Result<PhaseOutput<'t>> {
        let z = self.encode(ps, coords)?;
        Ok(PhaseOutput { embedding: z, probs: self.readout(ps, z)?, consistency: spec_consistency(z, laplacian)? })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::{build_laplacian, fixtures, LaplacianKind, SparseGraph};
    use crate::phases::PhaseError;
    use crate::tensor::{gradcheck_many, Tape};

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
    }

    #[test]
    fn k_is_clamped() {
        let c = SpectralConfig::default();
        assert_eq!(c.effective_k(5), 4);
        assert_eq!(c.effective_k(100), 16);
        assert_eq!(c.effective_k(1), 1);
        let l = build_laplacian(&fixtures::path(5), LaplacianKind::Combinatorial);
        assert_eq!(spectral_features(&l, &c).unwrap().shape(), [5, 4]);
    }

    #[test]
    fn encoder_shapes_and_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reg = ParamRegistry::new();
        let phase = SpectralPhase::new(&mut reg, 3, 5, 2);
        reg.init_params(1);
        let tape = Tape::new();
        let ps = reg.bind(&tape);
        let mut coords = random(&mut rng, 4, 3, -1.0, 1.0);
        let first = coords.row(0).to_vec();
        coords.row_mut(2).copy_from_slice(&first);
        let z = phase.encode(&ps, tape.constant(coords)).unwrap().value();
        assert_eq!(z.shape(), [4, 5]);
        assert_eq!(z.row(0), z.row(2));
        assert!(phase.encode(&ps, tape.constant(Matrix::zeros(4, 2))).is_err());
    }

    #[test]
    fn consistency_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = fixtures::random_connected(&mut rng, 8, 0.3);
        let l = SparseOperator::new(build_laplacian(&g, LaplacianKind::Combinatorial));
        let tape = Tape::new();
        let flat = Matrix::filled(8, 3, 0.4);
        let numerator = flat.hadamard(&l.matrix().mul_dense(&flat)).sum();
        assert!(numerator.abs() < 1e-14);
        // the 1e−8 variance floor turns rounding in the numerator into ~1e−9
        let constant = spec_consistency(tape.constant(flat), &l).unwrap().value().item();
        assert!(constant.abs() < 1e-6);

        // the variance floor breaks exact scale invariance by ~1e−8/var, so use var ≫ 1
        let z = random(&mut rng, 8, 3, -10.0, 10.0);
        let a = spec_consistency(tape.constant(z.clone()), &l).unwrap().value().item();
        let b = spec_consistency(tape.constant(z.scale(7.5)), &l).unwrap().value().item();
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));

        // pairwise form ½ Σ_ij A_ij ‖z_i − z_j‖² over ordered pairs = Σ over edges
        let mut pair_sum = 0.0;
        for &(i, j) in g.edges() {
            pair_sum += (0..3).map(|c| (z.get(i, c) - z.get(j, c)).powi(2)).sum::<f64>();
        }
        let mean = z.sum() / 24.0;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
        assert!((a - pair_sum / (24.0 * (var + 1e-8))).abs() < 1e-10);
    }

    #[test]
    fn encoder_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = fixtures::barbell_triangles();
        let raw = build_laplacian(&g, LaplacianKind::Combinatorial);
        let l = SparseOperator::new(raw.clone());
        let coords = spectral_features(&raw, &SpectralConfig { k: 3, ..SpectralConfig::default() }).unwrap();
        let mut reg = ParamRegistry::new();
        let phase = SpectralPhase::new(&mut reg, 3, 4, 2);
        reg.init_params(4);
        let probe = random(&mut rng, 6, 4, 0.5, 1.5);
        let probe_p = random(&mut rng, 6, 2, 0.5, 1.5);
        // gradients w.r.t. encoder parameters only; coordinates are constants
        let enc = 4; // the encoder registers its four tensors first
        let points = reg.snapshot();
        let err = gradcheck_many(
            |tape, v| {
                let ps = ParamVars::new(v.to_vec());
                let z = phase.encode(&ps, tape.constant(coords.clone()))?;
                Ok::<_, PhaseError>(z.mul(tape.constant(probe.clone()))?.sum())
            },
            &points[..enc],
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
        let full = gradcheck_many(
            |tape, v| {
                let ps = ParamVars::new(v.to_vec());
                let out = phase.forward(&ps, tape.constant(coords.clone()), &l)?;
                Ok::<_, PhaseError>(out.probs.mul(tape.constant(probe_p.clone()))?.sum().add(out.consistency)?)
            },
            &points,
            1e-5,
        );
        assert!(full < 1e-5, "{full}");
    }

    #[test]
    fn two_communities_are_linearly_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 60;
        let draws = 40;
        let mut separable = 0;
        for _ in 0..draws {
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    let same = (i < n / 2) == (j < n / 2);
                    if rng.random_bool(if same { 0.5 } else { 0.02 }) {
                        edges.push((i, j));
                    }
                }
            }
            let g = SparseGraph::from_edges(n, edges).unwrap();
            let l = build_laplacian(&g, LaplacianKind::Combinatorial);
            let coords = spectral_features(&l, &SpectralConfig { k: 2, ..SpectralConfig::default() }).unwrap();
            // with k = 2 the second column is the Fiedler vector; a threshold on it
            // is a linear separator in coordinate space
            let fiedler = coords.col(1);
            let left_max = fiedler[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let left_min = fiedler[..n / 2].iter().copied().fold(f64::INFINITY, f64::min);
            let right_max = fiedler[n / 2..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let right_min = fiedler[n / 2..].iter().copied().fold(f64::INFINITY, f64::min);
            if left_max < right_min || right_max < left_min {
                separable += 1;
            }
        }
        assert!(separable as f64 >= 0.95 * draws as f64, "{separable}/{draws}");
    }
}
