//! Heat diffusion on the graph from learned, non-negative node sources.

use serde::{Deserialize, Serialize};

use super::{PhaseError, PhaseOutput, Result};
use crate::cg::CgConfig;
use crate::matrix::Matrix;
use crate::nn::{MlpHead, OutputActivation, ParamRegistry, ParamVars};
use crate::sparse::CsrMatrix;
use crate::tensor::{SparseOperator, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    ExplicitEuler,
    ImplicitEulerCg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermoConfig {
    pub steps: usize,
    pub kappa: f64,
    /// Step size; `None` picks 0.9 of the explicit stability limit, or 0.1
    /// for the implicit integrator.
    pub dt: Option<f64>,
    /// Set from the top-level experiment config.
    #[serde(skip)]
    pub integrator: Integrator,
    pub per_step_source: bool,
    pub cg_tolerance: f64,
    pub cg_max_iter: usize,
}

impl Default for ThermoConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            kappa: 1.0,
            dt: None,
            integrator: Integrator::ExplicitEuler,
            per_step_source: false,
            cg_tolerance: 1e-8,
            cg_max_iter: 500,
        }
    }
}

/// `2 / λ_bound` with the Gershgorin bound λ_max ≤ max_i Σ_j |L_ij|
/// (= 2·max degree for the combinatorial Laplacian).
pub fn stability_limit(laplacian: &CsrMatrix) -> f64 {
    let bound = (0..laplacian.nrows())
        .map(|i| laplacian.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if bound == 0.0 { f64::INFINITY } else { 2.0 / bound }
}

impl ThermoConfig {
    pub fn cg(&self) -> CgConfig {
        CgConfig { tolerance: self.cg_tolerance, max_iter: self.cg_max_iter }
    }

    /// The step size to use on this Laplacian, validated for the explicit scheme.
    pub fn resolve_dt(&self, laplacian: &CsrMatrix) -> Result<f64> {
        let limit = stability_limit(laplacian);
        let dt = match (self.dt, self.integrator) {
            (Some(dt), _) => dt,
            (None, Integrator::ImplicitEulerCg) => 0.1,
            (None, Integrator::ExplicitEuler) if limit.is_finite() => 0.9 * limit / self.kappa,
            (None, Integrator::ExplicitEuler) => 0.1,
        };
        if self.integrator == Integrator::ExplicitEuler && dt * self.kappa >= limit {
            return Err(PhaseError::UnstableStep { dt_kappa: dt * self.kappa, limit });
        }
        Ok(dt)
    }
}

/// `U⁰ = h0 ⊙ S1ᵀ`.
pub fn init_field<'t>(h0: Var<'t>, sources: Var<'t>) -> Result<Var<'t>> {
    Ok(h0.mul_col(sources)?)
}

fn broadcast_cols<'t>(col: Var<'t>, width: usize) -> Result<Var<'t>> {
    let ones = col.tape().constant(Matrix::filled(1, width, 1.0));
    Ok(col.matmul(ones)?)
}

/// Runs `steps` dissipative Euler steps of `∂U/∂t = −κLU (+ S)`.
pub fn diffuse<'t>(
    u0: Var<'t>,
    sources: Var<'t>,
    laplacian: &SparseOperator,
    config: &ThermoConfig,
    dt: f64,
) -> Result<Var<'t>> {
    let width = u0.shape()[1];
    let forcing = if config.per_step_source { Some(broadcast_cols(sources, width)?.scale(dt)) } else { None };
    let shift = dt * config.kappa;
    let mut u = u0;
    for _ in 0..config.steps {
        u = match config.integrator {
            Integrator::ExplicitEuler => {
                let next = u.sub(u.spmm_left(laplacian)?.scale(shift))?;
                match forcing {
                    Some(f) => next.add(f)?,
                    None => next,
                }
            }
            Integrator::ImplicitEulerCg => {
                let rhs = match forcing {
                    Some(f) => u.add(f)?,
                    None => u,
                };
                rhs.solve_shifted(laplacian, shift, config.cg())?
            }
        };
    }
    if config.integrator == Integrator::ExplicitEuler {
        let start = u0.value().frobenius_norm();
        let end = u.value().frobenius_norm();
        let source_scale = sources.value().frobenius_norm() * (width as f64).sqrt();
        let allowed = 1e3 * (start + config.steps as f64 * dt * source_scale) + 1e-12;
        if !end.is_finite() || end > allowed {
            return Err(PhaseError::ExplicitInstability { growth: end / (start + 1e-300) });
        }
    }
    Ok(u)
}

/// `‖LU − S1ᵀ‖²_F / (N·D)`.
pub fn thermo_consistency<'t>(field: Var<'t>, laplacian: &SparseOperator, sources: Var<'t>) -> Result<Var<'t>> {
    let [n, d] = field.shape();
    let residual = field.spmm_left(laplacian)?.sub(broadcast_cols(sources, d)?)?;
    Ok(residual.mul(residual)?.sum().scale(1.0 / (n * d) as f64))
}

#[derive(Clone, Debug)]
pub struct ThermoPhase {
    pub source: MlpHead,
    pub classifier: MlpHead,
    pub config: ThermoConfig,
}

impl ThermoPhase {
    pub fn new(reg: &mut ParamRegistry, d_h: usize, num_classes: usize, config: ThermoConfig) -> Self {
        Self {
            source: MlpHead::new(reg, "thermo.source", d_h, d_h, 1, OutputActivation::Softplus),
            classifier: MlpHead::new(reg, "thermo.classifier", d_h, d_h, num_classes, OutputActivation::Identity),
            config,
        }
    }

    /// `S = softplus(f_source(h0))`, N×1.
    pub fn generate_sources<'t>(&self, ps: &ParamVars<'t>, h0: Var<'t>) -> Result<Var<'t>> {
        Ok(self.source.forward(ps, h0)?)
    }

    pub fn readout<'t>(&self, ps: &ParamVars<'t>, field: Var<'t>) -> Result<Var<'t>> {
        Ok(self.classifier.forward(ps, field)?.softmax())
    }

    pub fn forward<'t>(
        &self,
        ps: &ParamVars<'t>,
        h0: Var<'t>,
        laplacian: &SparseOperator,
        dt: f64,
    ) -> Result<PhaseOutput<'t>> {
        let sources = self.generate_sources(ps, h0)?;
        let u0 = init_field(h0, sources)?;
        let field = diffuse(u0, sources, laplacian, &self.config, dt)?;
        Ok(PhaseOutput {
            embedding: field,
            probs: self.readout(ps, field)?,
            consistency: thermo_consistency(field, laplacian, sources)?,
        })
    }
}
