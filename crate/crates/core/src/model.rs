//! The full network: phase projections, the active phases and consensus.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{Consensus, ConsensusConfig, ConsensusError, ConsensusOutput};
use crate::graph::{build_laplacian, LaplacianKind, SparseGraph};
use crate::matrix::Matrix;
use crate::nn::{ParamRegistry, ParamVars, PhaseProjection};
use crate::phases::spectral::{spectral_features, SpectralConfig, SpectralPhase};
use crate::phases::sync::{SyncConfig, SyncOperators, SyncPhase};
use crate::phases::thermo::{ThermoConfig, ThermoPhase};
use crate::phases::{PhaseError, PhaseKind, PhaseOutput};
use crate::sparse::CsrMatrix;
use crate::tensor::{SparseOperator, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("at least one phase must stay enabled")]
    NoPhases,
    #[error("features have {got} columns, model expects {expected}")]
    FeatureDim { got: usize, expected: usize },
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Phase(PhaseError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which architecture components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub thermo: bool,
    pub sync: bool,
    pub spectral: bool,
    pub fusion: bool,
    pub adaptive: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self { thermo: true, sync: true, spectral: true, fusion: true, adaptive: true }
    }
}

impl Components {
    pub const NAMES: [&'static str; 5] = ["thermo", "sync", "spectral", "fusion", "adaptive"];

    pub fn phases(&self) -> Vec<PhaseKind> {
        PhaseKind::ALL.into_iter().filter(|&p| self.has(p)).collect()
    }

    pub fn has(&self, phase: PhaseKind) -> bool {
        match phase {
            PhaseKind::Thermo => self.thermo,
            PhaseKind::Sync => self.sync,
            PhaseKind::Spectral => self.spectral,
        }
    }

    /// Switches off the named component; `None` for an unknown name.
    pub fn without(mut self, name: &str) -> Option<Self> {
        match name {
            "thermo" => self.thermo = false,
            "sync" => self.sync = false,
            "spectral" => self.spectral = false,
            "fusion" => self.fusion = false,
            "adaptive" => self.adaptive = false,
            _ => return None,
        }
        Some(self)
    }

    pub fn consensus(&self) -> ConsensusConfig {
        ConsensusConfig { fusion: self.fusion, adaptive: self.adaptive }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub laplacian: LaplacianKind,
    pub thermo: ThermoConfig,
    pub sync: SyncConfig,
    pub spectral: SpectralConfig,
    pub components: Components,
    pub alpha_frozen: bool,
}

impl ModelConfig {
    pub fn new(d_in: usize, num_classes: usize) -> Self {
        Self {
            d_in,
            hidden_dim: 128,
            num_classes,
            dropout: 0.1,
            laplacian: LaplacianKind::Combinatorial,
            thermo: ThermoConfig::default(),
            sync: SyncConfig::default(),
            spectral: SpectralConfig::default(),
            components: Components::default(),
            alpha_frozen: false,
        }
    }
}

/// Per-graph quantities that stay fixed across epochs.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub features: Matrix,
    pub laplacian: SparseOperator,
    pub dt: f64,
    pub sync_ops: Option<SyncOperators>,
    pub spectral_coords: Option<Matrix>,
}

impl GraphContext {
    pub fn new(graph: &SparseGraph, features: Matrix, config: &ModelConfig) -> Result<Self> {
        if features.cols() != config.d_in {
            return Err(ModelError::FeatureDim { got: features.cols(), expected: config.d_in });
        }
        let lap: CsrMatrix = build_laplacian(graph, config.laplacian);
        let c = &config.components;
        let dt = if c.thermo { config.thermo.resolve_dt(&lap)? } else { 0.0 };
        let sync_ops = c.sync.then(|| SyncOperators::new(graph, config.sync.normalized));
        let spectral_coords = if c.spectral { Some(spectral_features(&lap, &config.spectral)?) } else { None };
        Ok(Self { features, laplacian: SparseOperator::new(lap), dt, sync_ops, spectral_coords })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub registry: ParamRegistry,
    projections: Vec<(PhaseKind, PhaseProjection)>,
    thermo: Option<ThermoPhase>,
    sync: Option<SyncPhase>,
    spectral: Option<SpectralPhase>,
    pub consensus: Consensus,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<'t> {
    pub h0: Var<'t>,
    pub phases: Vec<(PhaseKind, PhaseOutput<'t>)>,
    pub consensus: ConsensusOutput<'t>,
}

impl<'t> ModelOutput<'t> {
    pub fn consistencies(&self) -> Vec<Var<'t>> {
        self.phases.iter().map(|(_, p)| p.consistency).collect()
    }
}

impl Model {
    /// Builds the active components and initializes parameters from `seed`.
    pub fn new(config: ModelConfig, num_nodes: usize, seed: u64) -> Result<Self> {
        let phases = config.components.phases();
        if phases.is_empty() {
            return Err(ModelError::NoPhases);
        }
        let d_h = config.hidden_dim;
        let c = config.num_classes;
        let mut reg = ParamRegistry::new();
        let projections = phases
            .iter()
            .map(|&p| {
                let name = format!("proj.{}", p.name());
                (p, PhaseProjection::new(&mut reg, &name, config.d_in, d_h, config.dropout))
            })
            .collect();
        let thermo = config.components.thermo.then(|| ThermoPhase::new(&mut reg, d_h, c, config.thermo.clone()));
        let sync = config.components.sync.then(|| SyncPhase::new(&mut reg, d_h, c, config.sync.clone()));
        let k = config.spectral.effective_k(num_nodes);
        let spectral = config.components.spectral.then(|| SpectralPhase::new(&mut reg, k, d_h, c));
        let dims: Vec<usize> = phases
            .iter()
            .map(|p| match p {
                PhaseKind::Sync => d_h + 3,
                _ => d_h,
            })
            .collect();
        let consensus = Consensus::new(&mut reg, &phases, &dims, d_h, c, config.components.consensus());
        reg.init_params(seed);
        if config.alpha_frozen {
            if let Some(id) = consensus.alpha_param() {
                reg.set_trainable(id, false);
            }
        }
        Ok(Self { config, registry: reg, projections, thermo, sync, spectral, consensus })
    }

    pub fn phases(&self) -> Vec<PhaseKind> {
        self.projections.iter().map(|(p, _)| *p).collect()
    }

    /// Full forward pass. `rng` drives dropout when `training`.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        ps: &ParamVars<'t>,
        ctx: &GraphContext,
        training: bool,
        rng: &mut R,
    ) -> Result<ModelOutput<'t>> {
        let tape = ps.get(self.consensus_anchor()).tape();
        let x = tape.constant(ctx.features.clone());
        let mut projected = Vec::with_capacity(self.projections.len());
        for (_, proj) in &self.projections {
            projected.push(proj.forward(ps, x, training, rng)?);
        }
        let mut h0 = projected[0];
        for p in &projected[1..] {
            h0 = h0.add(*p)?;
        }
        let h0 = h0.scale(1.0 / projected.len() as f64);

        let mut phases = Vec::with_capacity(projected.len());
        for ((kind, _), h) in self.projections.iter().zip(&projected) {
            let out = match kind {
                PhaseKind::Thermo => {
                    self.thermo.as_ref().expect("thermo built").forward(ps, *h, &ctx.laplacian, ctx.dt)?
                }
                PhaseKind::Sync => {
                    let ops = ctx.sync_ops.as_ref().expect("context built for sync");
                    self.sync.as_ref().expect("sync built").forward(ps, *h, ops)?
                }
                PhaseKind::Spectral => {
                    let coords = tape.constant(ctx.spectral_coords.clone().expect("context built for spectral"));
                    self.spectral.as_ref().expect("spectral built").forward(ps, coords, &ctx.laplacian)?
                }
            };
            phases.push((*kind, out));
        }
        let embeddings: Vec<_> = phases.iter().map(|(_, p)| p.embedding).collect();
        let probs: Vec<_> = phases.iter().map(|(_, p)| p.probs).collect();
        let consensus = self.consensus.forward(ps, &embeddings, &probs, h0)?;
        Ok(ModelOutput { h0, phases, consensus })
    }

    fn consensus_anchor(&self) -> crate::nn::ParamId {
        self.projections[0].1.linear.weight
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::fixtures;
    use crate::tensor::Tape;

    fn small_config(d_in: usize) -> ModelConfig {
        let mut c = ModelConfig::new(d_in, 3);
        c.hidden_dim = 6;
        c.thermo.steps = 4;
        c.sync.steps = 4;
        c.dropout = 0.0;
        c
    }

    #[test]
    fn forward_shapes_for_every_ablation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = fixtures::random_connected(&mut rng, 12, 0.2);
        let x = Matrix::new(12, 5, (0..60).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect());
        for off in [None, Some("thermo"), Some("sync"), Some("spectral"), Some("fusion"), Some("adaptive")] {
            let mut cfg = small_config(5);
            if let Some(name) = off {
                cfg.components = cfg.components.without(name).unwrap();
            }
            let ctx = GraphContext::new(&g, x.clone(), &cfg).unwrap();
            let model = Model::new(cfg.clone(), 12, 3).unwrap();
            let tape = Tape::new();
            let ps = model.registry.bind(&tape);
            let out = model.forward(&ps, &ctx, false, &mut rng).unwrap();
            let expected = cfg.components.phases().len();
            assert_eq!(out.phases.len(), expected);
            assert_eq!(out.consensus.weights.shape(), [12, expected]);
            let y = out.consensus.final_probs.value();
            assert_eq!(y.shape(), [12, 3]);
            for i in 0..12 {
                assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            if off.is_some_and(|n| PhaseKind::ALL.iter().any(|p| p.name() == n)) {
                let name = off.unwrap();
                assert!(model.registry.names().all(|n| !n.starts_with(&format!("proj.{name}"))));
            }
        }
    }

    #[test]
    fn all_phases_off_is_rejected() {
        let mut cfg = small_config(2);
        cfg.components = Components { thermo: false, sync: false, spectral: false, ..Components::default() };
        assert_eq!(Model::new(cfg, 4, 0).unwrap_err(), ModelError::NoPhases);
    }

    #[test]
    fn feature_dimension_checked() {
        let g = fixtures::path(4);
        let cfg = small_config(3);
        assert!(matches!(
            GraphContext::new(&g, Matrix::zeros(4, 2), &cfg),
            Err(ModelError::FeatureDim { got: 2, expected: 3 })
        ));
    }

    #[test]
    fn frozen_alpha_is_not_trainable() {
        let mut cfg = small_config(2);
        cfg.alpha_frozen = true;
        let model = Model::new(cfg, 5, 0).unwrap();
        let id = model.consensus.alpha_param().unwrap();
        assert!(!model.registry.tensor(id).requires_grad);
    }
}
