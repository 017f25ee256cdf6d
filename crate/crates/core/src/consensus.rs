//! Fusion of the phase outputs: shared representation, calibrated ensemble
//! weights, physics/neural blending, class weights, thresholds and the final
//! decision rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::nn::{Init, LayerNorm, Linear, MlpHead, OutputActivation, ParamId, ParamRegistry, ParamVars};
use crate::phases::PhaseKind;
use crate::tensor::{TensorError, Var};

/// Floor added to the softplus class weights.
pub const CLASS_WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("blend coefficient {alpha} outside [0, 1]")]
    AlphaOutOfRange { alpha: f64 },
    #[error("consensus needs at least one phase")]
    NoPhases,
}

pub type Result<T> = std::result::Result<T, ConsensusError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Reject,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Reject => None,
        }
    }
}

/// `GELU(LayerNorm([E₁ ‖ … ‖ E_M] W + b))`.
pub fn fuse<'t>(ps: &ParamVars<'t>, linear: &Linear, norm: &LayerNorm, embeddings: &[Var<'t>]) -> Result<Var<'t>> {
    let first = embeddings.first().ok_or(ConsensusError::NoPhases)?;
    let joined = first.tape().concat(embeddings)?;
    Ok(norm.forward(ps, linear.forward(ps, joined)?)?.gelu())
}

/// Row-wise `softmax(p + ε_i)` for global logits `p` (1×M) and per-node calibrations `ε` (N×M).
pub fn ensemble_weights<'t>(base_logits: Var<'t>, calibrations: Var<'t>) -> Result<Var<'t>> {
    Ok(calibrations.add_row(base_logits)?.softmax())
}

/// `Σ_m w_{:,m} ⊙ Y_m`.
pub fn physics_ensemble<'t>(weights: Var<'t>, probs: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (m, p) in probs.iter().enumerate() {
        let term = p.mul_col(weights.slice_cols(m, 1)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    acc.ok_or(ConsensusError::NoPhases)
}

/// `α·Y_phys + (1 − α)·Y_neural` with a 1×1 `α`.
pub fn blend<'t>(physics: Var<'t>, neural: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    let a = alpha.value().item();
    if !(0.0..=1.0).contains(&a) {
        return Err(ConsensusError::AlphaOutOfRange { alpha: a });
    }
    let n = physics.shape()[0];
    let col = physics.tape().constant(Matrix::filled(n, 1, 1.0)).matmul(alpha)?;
    let rest = col.neg().add_scalar(1.0);
    Ok(physics.mul_col(col)?.add(neural.mul_col(rest)?)?)
}

/// Class-weighted argmax for the candidate; reject when the unweighted max
/// probability does not exceed `τ_i`. Ties go to the smallest class index.
pub fn decide(final_probs: &Matrix, class_weights: &Matrix, thresholds: &[f64], reject_enabled: bool) -> Vec<Label> {
    assert_eq!(final_probs.shape(), class_weights.shape(), "decide: shape mismatch");
    assert_eq!(final_probs.rows(), thresholds.len(), "decide: threshold length");
    (0..final_probs.rows())
        .map(|i| {
            let (p, w) = (final_probs.row(i), class_weights.row(i));
            let mut best = 0;
            for c in 1..p.len() {
                if w[c] * p[c] > w[best] * p[best] {
                    best = c;
                }
            }
            let max_p = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if reject_enabled && max_p <= thresholds[i] {
                Label::Reject
            } else {
                Label::Class(best)
            }
        })
        .collect()
}

/// `c_FN π₀ / (c_FN π₀ + c_FP π₁)`.
pub fn bayes_threshold_oracle(p0: f64, p1: f64, c_fn: f64, c_fp: f64) -> f64 {
    let num = c_fn * p0;
    num / (num + c_fp * p1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    /// Learned fusion; when off the ensemble is uniform and `α = 1`.
    pub fusion: bool,
    /// Learned class weights and thresholds; when off `w = 1`, `τ = 0`.
    pub adaptive: bool,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self { fusion: true, adaptive: true }
    }
}

#[derive(Clone, Debug)]
struct FuseBlock {
    linear: Linear,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct FusionHeads {
    base_logits: ParamId,
    confidence: Vec<MlpHead>,
    classifier: MlpHead,
    alpha_logit: ParamId,
}

#[derive(Clone, Debug)]
struct AdaptiveHeads {
    class_weight: MlpHead,
    threshold: MlpHead,
}

#[derive(Clone, Debug)]
pub struct Consensus {
    pub phases: Vec<PhaseKind>,
    pub num_classes: usize,
    fuse: Option<FuseBlock>,
    fusion: Option<FusionHeads>,
    adaptive: Option<AdaptiveHeads>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConsensusOutput<'t> {
    pub fused: Option<Var<'t>>,
    pub weights: Var<'t>,
    pub physics: Var<'t>,
    pub final_probs: Var<'t>,
    pub class_weights: Option<Var<'t>>,
    /// Pre-sigmoid threshold logits, N×1.
    pub threshold_logits: Option<Var<'t>>,
    pub thresholds: Option<Var<'t>>,
    pub alpha: f64,
}

impl Consensus {
    /// `embedding_dims[m]` is the width of phase `m`'s embedding.
    pub fn new(
        reg: &mut ParamRegistry,
        phases: &[PhaseKind],
        embedding_dims: &[usize],
        d_h: usize,
        num_classes: usize,
        config: ConsensusConfig,
    ) -> Self {
        assert_eq!(phases.len(), embedding_dims.len());
        let fuse = (config.fusion || config.adaptive).then(|| FuseBlock {
            linear: Linear::new(reg, "consensus.fuse", embedding_dims.iter().sum(), d_h),
            norm: LayerNorm::new(reg, "consensus.fuse_norm", d_h),
        });
        let fusion = config.fusion.then(|| FusionHeads {
            base_logits: reg.register("consensus.base_logits", 1, phases.len(), Init::Constant(0.0)),
            confidence: phases
                .iter()
                .map(|p| {
                    let name = format!("consensus.confidence.{}", p.name());
                    MlpHead::new(reg, &name, d_h, d_h, 1, OutputActivation::Identity)
                })
                .collect(),
            classifier: MlpHead::new(reg, "consensus.classifier", d_h, d_h, num_classes, OutputActivation::Identity),
            // sigmoid(0) = 0.5
            alpha_logit: reg.register("consensus.alpha", 1, 1, Init::Constant(0.0)),
        });
        let adaptive = config.adaptive.then(|| AdaptiveHeads {
            class_weight: MlpHead::new(reg, "consensus.class_weight", 2 * d_h, d_h, num_classes, OutputActivation::Softplus),
            threshold: MlpHead::new(reg, "consensus.threshold", 2 * d_h, d_h, 1, OutputActivation::Identity),
        });
        Self { phases: phases.to_vec(), num_classes, fuse, fusion, adaptive }
    }

    pub fn alpha_param(&self) -> Option<ParamId> {
        self.fusion.as_ref().map(|f| f.alpha_logit)
    }

    pub fn base_logits_param(&self) -> Option<ParamId> {
        self.fusion.as_ref().map(|f| f.base_logits)
    }

    pub fn forward<'t>(
        &self,
        ps: &ParamVars<'t>,
        embeddings: &[Var<'t>],
        probs: &[Var<'t>],
        h0: Var<'t>,
    ) -> Result<ConsensusOutput<'t>> {
        let first = probs.first().ok_or(ConsensusError::NoPhases)?;
        let tape = first.tape();
        let [n, _] = first.shape();
        let m = probs.len();
        let fused = match &self.fuse {
            Some(f) => Some(fuse(ps, &f.linear, &f.norm, embeddings)?),
            None => None,
        };

        let (weights, physics, final_probs, alpha) = match (&self.fusion, fused) {
            (Some(heads), Some(h)) => {
                let cal: Vec<Var<'t>> =
                    heads.confidence.iter().map(|c| c.forward(ps, h)).collect::<std::result::Result<_, _>>()?;
                let weights = ensemble_weights(ps.get(heads.base_logits), tape.concat(&cal)?)?;
                let physics = physics_ensemble(weights, probs)?;
                let neural = heads.classifier.forward(ps, h)?.softmax();
                let alpha = ps.get(heads.alpha_logit).sigmoid();
                let a = alpha.value().item();
                (weights, physics, blend(physics, neural, alpha)?, a)
            }
            _ => {
                let weights = tape.constant(Matrix::filled(n, m, 1.0 / m as f64));
                let physics = physics_ensemble(weights, probs)?;
                (weights, physics, physics, 1.0)
            }
        };

        let (class_weights, threshold_logits, thresholds) = match (&self.adaptive, fused) {
            (Some(heads), Some(h)) => {
                let joint = tape.concat(&[h, h0])?;
                let w = heads.class_weight.forward(ps, joint)?.add_scalar(CLASS_WEIGHT_FLOOR);
                let logits = heads.threshold.forward(ps, joint)?;
                (Some(w), Some(logits), Some(logits.sigmoid()))
            }
            _ => (None, None, None),
        };

        Ok(ConsensusOutput { fused, weights, physics, final_probs, class_weights, threshold_logits, thresholds, alpha })
    }
}

impl ConsensusOutput<'_> {
    /// Class weights as a matrix, all ones when the adaptive heads are off.
    pub fn class_weight_matrix(&self) -> Matrix {
        match self.class_weights {
            Some(w) => w.value().as_ref().clone(),
            None => {
                let [n, c] = self.final_probs.shape();
                Matrix::filled(n, c, 1.0)
            }
        }
    }

    /// Per-node thresholds, all zero when the adaptive heads are off.
    pub fn threshold_vec(&self) -> Vec<f64> {
        match self.thresholds {
            Some(t) => t.value().col(0),
            None => vec![0.0; self.final_probs.shape()[0]],
        }
    }

    pub fn decide(&self, reject_enabled: bool) -> Vec<Label> {
        decide(&self.final_probs.value(), &self.class_weight_matrix(), &self.threshold_vec(), reject_enabled)
    }
}
