//! Kuramoto oscillators on the graph with learned natural frequencies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PhaseError, PhaseOutput, Result};
use crate::graph::SparseGraph;
use crate::matrix::Matrix;
use crate::nn::{MlpHead, OutputActivation, ParamRegistry, ParamVars};
use crate::sparse::CsrMatrix;
use crate::tensor::{SparseOperator, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseInit {
    #[default]
    Zero,
    /// uniform(−π, π) from `init_seed`
    SeededUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncConfig {
    pub steps: usize,
    pub coupling: f64,
    pub dt: f64,
    pub phase_init: PhaseInit,
    pub init_seed: u64,
    /// Divide the coupling sum by the degree, as in the discrete update.
    pub normalized: bool,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self { steps: 50, coupling: 1.0, dt: 0.1, phase_init: PhaseInit::Zero, init_seed: 0, normalized: true }
    }
}

impl SyncConfig {
    /// `Δt·(max|ω| + K)`; values at or above 1 risk a jumpy integration.
    pub fn stability_budget(&self, max_abs_omega: f64) -> f64 {
        self.dt * (max_abs_omega + self.coupling)
    }

    pub fn initial_phases(&self, n: usize) -> Matrix {
        match self.phase_init {
            PhaseInit::Zero => Matrix::zeros(n, 1),
            PhaseInit::SeededUniform => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
                let pi = std::f64::consts::PI;
                Matrix::column((0..n).map(|_| rng.random_range(-pi..pi)).collect())
            }
        }
    }
}

/// Sparse operators for the coupling term over directed edges `e = (i → j)`:
/// `incidence` maps θ to `θ_j − θ_i`, `aggregate` sums edge terms back onto
/// the source node (weighted by `1/|N_i|` when normalized).
#[derive(Clone, Debug)]
pub struct SyncOperators {
    pub incidence: SparseOperator,
    pub aggregate: SparseOperator,
}

impl SyncOperators {
    pub fn new(graph: &SparseGraph, normalized: bool) -> Self {
        let n = graph.num_nodes();
        let mut inc = Vec::new();
        let mut agg = Vec::new();
        let mut e = 0;
        for i in 0..n {
            let nbrs = graph.neighbors(i);
            let w = if normalized { 1.0 / nbrs.len() as f64 } else { 1.0 };
            for &j in nbrs {
                inc.push((e, j, 1.0));
                inc.push((e, i, -1.0));
                agg.push((i, e, w));
                e += 1;
            }
        }
        Self {
            incidence: SparseOperator::new(CsrMatrix::from_triplets(e.max(1), n, &inc)),
            aggregate: SparseOperator::new(CsrMatrix::from_triplets(n, e.max(1), &agg)),
        }
    }
}

/// `T` explicit Euler steps of
/// `θ_i ← θ_i + Δt·(ω_i + (K/|N_i|)·Σ_j sin(θ_j − θ_i))`.
pub fn integrate_phases<'t>(theta0: Var<'t>, omega: Var<'t>, ops: &SyncOperators, config: &SyncConfig) -> Result<Var<'t>> {
    let mut theta = theta0;
    for _ in 0..config.steps {
        let coupling = theta.spmm_left(&ops.incidence)?.sin().spmm_left(&ops.aggregate)?;
        let velocity = omega.add(coupling.scale(config.coupling))?;
        theta = theta.add(velocity.scale(config.dt))?;
    }
    Ok(theta)
}

/// Instantaneous phase velocities `dθ/dt` without the tape.
pub fn phase_velocity(graph: &SparseGraph, theta: &[f64], omega: &[f64], coupling: f64, normalized: bool) -> Vec<f64> {
    (0..graph.num_nodes())
        .map(|i| {
            let nbrs = graph.neighbors(i);
            let s: f64 = nbrs.iter().map(|&j| (theta[j] - theta[i]).sin()).sum();
            let norm = if normalized && !nbrs.is_empty() { nbrs.len() as f64 } else { 1.0 };
            omega[i] + coupling * s / norm
        })
        .collect()
}

/// One explicit Euler step without the tape.
pub fn kuramoto_step(
    graph: &SparseGraph,
    theta: &[f64],
    omega: &[f64],
    coupling: f64,
    dt: f64,
    normalized: bool,
) -> Vec<f64> {
    let v = phase_velocity(graph, theta, omega, coupling, normalized);
    theta.iter().zip(v).map(|(t, vi)| t + dt * vi).collect()
}

/// `(r, φ)` with `r e^{iφ} = mean_j e^{iθ_j}`.
pub fn order_parameter(theta: &[f64]) -> (f64, f64) {
    let n = theta.len() as f64;
    let c = theta.iter().map(|t| t.cos()).sum::<f64>() / n;
    let s = theta.iter().map(|t| t.sin()).sum::<f64>() / n;
    (c.hypot(s), s.atan2(c))
}

/// Differentiable `r`; a 1e−14 floor on r² keeps the square root smooth at r = 0.
pub fn order_parameter_var(theta: Var<'_>) -> Result<Var<'_>> {
    let c = theta.cos().mean();
    let s = theta.sin().mean();
    Ok(c.mul(c)?.add(s.mul(s)?)?.add_scalar(1e-14).powf(0.5))
}

/// `1 − r(θ)`.
pub fn sync_consistency(theta: Var<'_>) -> Result<Var<'_>> {
    Ok(order_parameter_var(theta)?.neg().add_scalar(1.0))
}

/// Row-wise `[h0 ; cos θ ; sin θ ; ω]`.
pub fn sync_encoding<'t>(h0: Var<'t>, theta: Var<'t>, omega: Var<'t>) -> Result<Var<'t>> {
    Ok(h0.tape().concat(&[h0, theta.cos(), theta.sin(), omega])?)
}

/// `K_c = 2(ω_max − ω_min)/λ₂`.
pub fn critical_coupling(omega: &[f64], lambda2: f64) -> Result<f64> {
    if lambda2 <= 1e-12 {
        return Err(PhaseError::DisconnectedGraph { lambda2 });
    }
    let hi = omega.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = omega.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(if omega.is_empty() { 0.0 } else { 2.0 * (hi - lo) / lambda2 })
}

#[derive(Clone, Debug)]
pub struct SyncPhase {
    pub frequency: MlpHead,
    pub classifier: MlpHead,
    pub config: SyncConfig,
}

impl SyncPhase {
    pub fn new(reg: &mut ParamRegistry, d_h: usize, num_classes: usize, config: SyncConfig) -> Self {
        Self {
            frequency: MlpHead::new(reg, "sync.frequency", d_h, d_h, 1, OutputActivation::Tanh),
            classifier: MlpHead::new(reg, "sync.classifier", d_h + 3, d_h, num_classes, OutputActivation::Identity),
            config,
        }
    }

    /// `ω = tanh(f_freq(h0))`, N×1.
    pub fn learn_frequencies<'t>(&self, ps: &ParamVars<'t>, h0: Var<'t>) -> Result<Var<'t>> {
        Ok(self.frequency.forward(ps, h0)?)
    }

    pub fn readout<'t>(&self, ps: &ParamVars<'t>, encoding: Var<'t>) -> Result<Var<'t>> {
        Ok(self.classifier.forward(ps, encoding)?.softmax())
    }

    pub fn forward<'t>(&self, ps: &ParamVars<'t>, h0: Var<'t>, ops: &SyncOperators) -> Result<PhaseOutput<'t>> {
        let omega = self.learn_frequencies(ps, h0)?;
        let theta0 = h0.tape().constant(self.config.initial_phases(h0.shape()[0]));
        let theta = integrate_phases(theta0, omega, ops, &self.config)?;
        let encoding = sync_encoding(h0, theta, omega)?;
        Ok(PhaseOutput {
            embedding: encoding,
            probs: self.readout(ps, encoding)?,
            consistency: sync_consistency(theta)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use super::*;
    use crate::graph::{build_laplacian, fixtures, LaplacianKind};
    use crate::spectral::dense_eigenpairs;
    use crate::tensor::{gradcheck_many, Tape};

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
    }

    fn run(graph: &SparseGraph, theta: &[f64], omega: &[f64], cfg: &SyncConfig) -> Vec<f64> {
        let tape = Tape::new();
        let ops = SyncOperators::new(graph, cfg.normalized);
        let out = integrate_phases(
            tape.constant(Matrix::column(theta.to_vec())),
            tape.constant(Matrix::column(omega.to_vec())),
            &ops,
            cfg,
        )
        .unwrap();
        out.value().data().to_vec()
    }

    #[test]
    fn two_node_single_step() {
        let g = fixtures::path(2);
        let cfg = SyncConfig { steps: 1, ..SyncConfig::default() };
        let th = run(&g, &[0.0, FRAC_PI_2], &[0.0, 0.0], &cfg);
        assert!((th[0] - 0.1).abs() < 1e-15);
        assert!((th[1] - (FRAC_PI_2 - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn tape_integration_matches_plain_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for normalized in [true, false] {
            let g = fixtures::random_connected(&mut rng, 12, 0.3);
            let theta: Vec<f64> = (0..12).map(|_| rng.random_range(-PI..PI)).collect();
            let omega: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = SyncConfig { steps: 30, normalized, ..SyncConfig::default() };
            let mut plain = theta.clone();
            for _ in 0..30 {
                plain = kuramoto_step(&g, &plain, &omega, cfg.coupling, cfg.dt, normalized);
            }
            let taped = run(&g, &theta, &omega, &cfg);
            for (a, b) in plain.iter().zip(&taped) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_phases_rotate_rigidly() {
        let g = fixtures::barbell_triangles();
        let cfg = SyncConfig::default();
        let th = run(&g, &[0.3; 6], &[0.2; 6], &cfg);
        for t in th {
            assert!((t - (0.3 + 0.2 * 0.1 * 50.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_node_drifts_freely() {
        let g = SparseGraph::from_edges(3, [(0, 1)]).unwrap();
        let cfg = SyncConfig { steps: 10, ..SyncConfig::default() };
        let th = run(&g, &[0.0, 1.0, 0.5], &[0.0, 0.0, 0.7], &cfg);
        assert!((th[2] - (0.5 + 0.7)).abs() < 1e-12);
    }

    #[test]
    fn identical_oscillators_synchronize() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // complete graph: r is monotone along the flow
        let g = fixtures::complete(8);
        let mut theta: Vec<f64> = (0..8).map(|_| rng.random_range(-PI..PI)).collect();
        let mut r_prev = order_parameter(&theta).0;
        for _ in 0..2000 {
            theta = kuramoto_step(&g, &theta, &[0.0; 8], 1.0, 0.1, true);
            let r = order_parameter(&theta).0;
            assert!(r >= r_prev - 1e-12);
            r_prev = r;
        }
        assert!(r_prev >= 0.99);
        // random connected graphs from a half-circle start
        for _ in 0..10 {
            let n = rng.random_range(4..20);
            let g = fixtures::random_connected(&mut rng, n, 0.2);
            let mut theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.2..1.2)).collect();
            let omega = vec![0.0; n];
            for _ in 0..3000 {
                theta = kuramoto_step(&g, &theta, &omega, 1.0, 0.1, true);
            }
            assert!(order_parameter(&theta).0 >= 0.99);
        }
    }

    #[test]
    fn global_rotation_commutes_with_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = fixtures::random_connected(&mut rng, 10, 0.3);
        let theta: Vec<f64> = (0..10).map(|_| rng.random_range(-PI..PI)).collect();
        let omega: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = SyncConfig::default();
        let base = run(&g, &theta, &omega, &cfg);
        let shifted: Vec<f64> = theta.iter().map(|t| t + 1.234).collect();
        let moved = run(&g, &shifted, &omega, &cfg);
        for (a, b) in base.iter().zip(&moved) {
            assert!((b - a - 1.234).abs() < 1e-9);
        }
        assert!((order_parameter(&base).0 - order_parameter(&moved).0).abs() < 1e-12);
    }

    #[test]
    fn fast_oscillator_keeps_drifting() {
        // one oscillator much faster than the mean field can hold
        let g = fixtures::complete(10);
        let mut omega = vec![0.0; 10];
        omega[0] = 3.0;
        let mut theta = vec![0.0; 10];
        for _ in 0..2000 {
            theta = kuramoto_step(&g, &theta, &omega, 1.0, 0.01, true);
        }
        let (_, phi) = order_parameter(&theta);
        let others = theta[1..].iter().sum::<f64>() / 9.0;
        assert!(theta[0] - others > 2.0 * PI, "{} {}", theta[0], phi);
    }

    #[test]
    fn order_parameter_examples() {
        assert!((order_parameter(&[0.7; 5]).0 - 1.0).abs() < 1e-15);
        assert!(order_parameter(&[0.0, PI]).0 < 1e-15);
        assert!((order_parameter(&[0.0, FRAC_PI_2]).0 - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn consistency_is_one_minus_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let eq = sync_consistency(tape.constant(Matrix::filled(4, 1, 2.0))).unwrap().value().item();
        assert!(eq.abs() < 1e-12);
        let anti = sync_consistency(tape.constant(Matrix::column(vec![0.0, PI]))).unwrap().value().item();
        assert!((anti - 1.0).abs() < 1e-6);
        for _ in 0..20 {
            let th: Vec<f64> = (0..7).map(|_| rng.random_range(-PI..PI)).collect();
            let got = sync_consistency(tape.constant(Matrix::column(th.clone()))).unwrap().value().item();
            assert!((got - (1.0 - order_parameter(&th).0)).abs() < 1e-9);
        }
    }

    #[test]
    fn encoding_layout_and_periodicity() {
        let tape = Tape::new();
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let omega = Matrix::column(vec![0.25, -0.5]);
        let enc = sync_encoding(tape.constant(h.clone()), tape.constant(Matrix::zeros(2, 1)), tape.constant(omega.clone()))
            .unwrap()
            .value();
        assert_eq!(enc.row(0), &[1.0, 2.0, 1.0, 0.0, 0.25]);
        assert_eq!(enc.row(1), &[3.0, 4.0, 1.0, 0.0, -0.5]);
        let th = Matrix::column(vec![0.3, -1.1]);
        let a = sync_encoding(tape.constant(h.clone()), tape.constant(th.clone()), tape.constant(omega.clone())).unwrap();
        let wrapped = Matrix::column(vec![0.3 + 2.0 * PI, -1.1]);
        let b = sync_encoding(tape.constant(h), tape.constant(wrapped), tape.constant(omega)).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) < 1e-14);
    }

    #[test]
    fn critical_coupling_examples() {
        let two = build_laplacian(&fixtures::path(2), LaplacianKind::Combinatorial);
        let lambda2 = dense_eigenpairs(&two, 2).values[1];
        assert!((critical_coupling(&[-0.5, 0.5], lambda2).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(critical_coupling(&[0.3, 0.3, 0.3], 1.0).unwrap(), 0.0);
        let base = critical_coupling(&[0.1, -0.2, 0.4], 0.7).unwrap();
        assert!((critical_coupling(&[0.3, -0.6, 1.2], 0.7).unwrap() - 3.0 * base).abs() < 1e-12);
        assert!(matches!(critical_coupling(&[0.0, 1.0], 0.0), Err(PhaseError::DisconnectedGraph { .. })));
    }

    #[test]
    fn frequencies_are_bounded_and_zero_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reg = ParamRegistry::new();
        let phase = SyncPhase::new(&mut reg, 3, 2, SyncConfig::default());
        let tape = Tape::new();
        let ps = reg.bind(&tape);
        let zero = phase.learn_frequencies(&ps, tape.constant(random(&mut rng, 4, 3, -1.0, 1.0))).unwrap();
        assert!(zero.value().data().iter().all(|&w| w == 0.0));
        reg.init_params(3);
        let ps = reg.bind(&tape);
        let w = phase.learn_frequencies(&ps, tape.constant(random(&mut rng, 50, 3, -50.0, 50.0))).unwrap();
        assert!(w.value().data().iter().all(|w| w.abs() <= 1.0));
    }

    fn gradcheck_phase(part: &'static str) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = fixtures::random_connected(&mut rng, 7, 0.3);
        let ops = SyncOperators::new(&g, true);
        let mut reg = ParamRegistry::new();
        let phase = SyncPhase::new(&mut reg, 3, 2, SyncConfig { steps: 10, ..SyncConfig::default() });
        reg.init_params(7);
        let probe = random(&mut rng, 7, 2, 0.5, 1.5);
        let probe_w = random(&mut rng, 7, 1, 0.5, 1.5);
        let mut points = vec![random(&mut rng, 7, 3, -1.0, 1.0)];
        points.extend(reg.snapshot());
        gradcheck_many(
            |tape, v| {
                let ps = ParamVars::new(v[1..].to_vec());
                if part == "freq" {
                    let w = phase.learn_frequencies(&ps, v[0])?;
                    return Ok::<_, PhaseError>(w.mul(tape.constant(probe_w.clone()))?.sum());
                }
                let out = phase.forward(&ps, v[0], &ops)?;
                Ok(out.probs.mul(tape.constant(probe.clone()))?.sum().add(out.consistency)?)
            },
            &points,
            1e-5,
        )
    }

    #[test]
    fn frequency_gradcheck() {
        let err = gradcheck_phase("freq");
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn end_to_end_gradcheck() {
        let err = gradcheck_phase("all");
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn readout_is_permutation_equivariant_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = fixtures::random_connected(&mut rng, 9, 0.3);
        let perm: Vec<usize> = vec![3, 0, 8, 1, 7, 2, 6, 4, 5];
        let gp = g.permuted(&perm);
        let mut reg = ParamRegistry::new();
        let phase = SyncPhase::new(&mut reg, 3, 3, SyncConfig::default());
        reg.init_params(2);
        let h = random(&mut rng, 9, 3, -1.0, 1.0);
        let mut hp = Matrix::zeros(9, 3);
        for i in 0..9 {
            hp.row_mut(perm[i]).copy_from_slice(h.row(i));
        }
        let tape = Tape::new();
        let ps = reg.bind(&tape);
        let a = phase.forward(&ps, tape.constant(h), &SyncOperators::new(&g, true)).unwrap().probs.value();
        let b = phase.forward(&ps, tape.constant(hp), &SyncOperators::new(&gp, true)).unwrap().probs.value();
        for i in 0..9 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for c in 0..3 {
                assert!((a.get(i, c) - b.get(perm[i], c)).abs() < 1e-12);
            }
        }
    }
}
