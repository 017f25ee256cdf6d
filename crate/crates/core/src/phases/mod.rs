//! The three differentiable phases. Each maps its projected embedding to a
//! representation, class probabilities and a physics-consistency scalar.

pub mod spectral;
pub mod sync;
pub mod thermo;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::SpectralError;
use crate::tensor::{TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Thermo,
    Sync,
    Spectral,
}

impl PhaseKind {
    pub const ALL: [PhaseKind; 3] = [PhaseKind::Thermo, PhaseKind::Sync, PhaseKind::Spectral];

    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Thermo => "thermo",
            PhaseKind::Sync => "sync",
            PhaseKind::Spectral => "spectral",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PhaseOutput<'t> {
    pub embedding: Var<'t>,
    pub probs: Var<'t>,
    pub consistency: Var<'t>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhaseError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("explicit step dt*kappa = {dt_kappa} exceeds the stability limit {limit}")]
    UnstableStep { dt_kappa: f64, limit: f64 },
    #[error("explicit integration blew up: field norm grew by a factor {growth:e}")]
    ExplicitInstability { growth: f64 },
    #[error("critical coupling needs a connected graph (lambda2 = {lambda2:e})")]
    DisconnectedGraph { lambda2: f64 },
}

pub type Result<T> = std::result::Result<T, PhaseError>;
