//! Trainable building blocks: a named parameter registry, linear layers,
//! two-layer heads and the per-phase projection stack.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::tensor::{Gradients, Result, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const CHECKPOINT_FORMAT: &str = "pimpc-params";
const CHECKPOINT_VERSION: u32 = 1;

/// How a parameter is (re)initialized by [`ParamRegistry::init_params`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// uniform(−a, a), a = sqrt(6 / (fan_in + fan_out))
    Glorot,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    init: Init,
    tensor: Tensor,
}

/// Named parameters in registration order. Ids are stable indices.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

/// A registry bound onto one tape.
pub struct ParamVars<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> ParamVars<'t> {
    /// Wraps vars laid out in registry order.
    pub fn new(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint header {format} v{version}")]
    Header { format: String, version: u32 },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    Shape { name: String, expected: [usize; 2], found: [usize; 2] },
}

#[derive(Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct SavedParams {
    pub format: String,
    pub version: u32,
    pub params: Vec<SavedParam>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-valued parameter. Panics on a duplicate name, since
    /// names are fixed by the model layout.
    pub fn register(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        let value = match init {
            Init::Constant(c) => Matrix::filled(rows, cols, c),
            Init::Glorot => Matrix::zeros(rows, cols),
        };
        self.entries.push(Entry { name, init, tensor: Tensor::new(value, true) });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].tensor.value
    }

    pub fn set_value(&mut self, id: ParamId, value: Matrix) {
        let t = &mut self.entries[id.0].tensor;
        assert_eq!(t.value.shape(), value.shape(), "shape change for {}", self.entries[id.0].name);
        t.value = value;
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].tensor.requires_grad = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.value.len()).sum()
    }

    /// Re-initializes every parameter from one seeded stream, in registry order.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &mut self.entries {
            let [r, c] = e.tensor.value.shape();
            e.tensor.value = match e.init {
                Init::Constant(v) => Matrix::filled(r, c, v),
                Init::Glorot => {
                    let a = (6.0 / (r + c) as f64).sqrt();
                    Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-a..=a)).collect())
                }
            };
            e.tensor.zero_grad();
        }
    }

    /// Puts every parameter on the tape; frozen ones enter as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self.entries.iter().map(|e| tape.leaf(e.tensor.value.clone(), e.tensor.requires_grad)).collect(),
        }
    }

    /// Copies tape gradients into the accumulators; parameters the loss does
    /// not reach get a zero gradient.
    pub fn collect_grads(&mut self, vars: &ParamVars<'_>, grads: &Gradients) {
        for (e, v) in self.entries.iter_mut().zip(&vars.vars) {
            if !e.tensor.requires_grad {
                e.tensor.grad = None;
                continue;
            }
            let g = grads.get(*v).cloned().unwrap_or_else(|| {
                let [r, c] = e.tensor.value.shape();
                Matrix::zeros(r, c)
            });
            e.tensor.grad = Some(g);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn snapshot(&self) -> Vec<Matrix> {
        self.entries.iter().map(|e| e.tensor.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Matrix]) {
        assert_eq!(values.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(values) {
            assert_eq!(e.tensor.value.shape(), v.shape());
            e.tensor.value = v.clone();
        }
    }

    pub fn to_saved(&self) -> SavedParams {
        SavedParams {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self
                .entries
                .iter()
                .map(|e| SavedParam {
                    name: e.name.clone(),
                    shape: e.tensor.value.shape(),
                    data: e.tensor.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Loads values by name into an already laid-out registry.
    pub fn load_saved(&mut self, saved: &SavedParams) -> std::result::Result<(), CheckpointError> {
        if saved.format != CHECKPOINT_FORMAT || saved.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Header { format: saved.format.clone(), version: saved.version });
        }
        let by_name: HashMap<&str, &SavedParam> = saved.params.iter().map(|p| (p.name.as_str(), p)).collect();
        let mut values = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let p = by_name.get(e.name.as_str()).ok_or_else(|| CheckpointError::Missing(e.name.clone()))?;
            let expected = e.tensor.value.shape();
            if p.shape != expected || p.data.len() != expected[0] * expected[1] {
                return Err(CheckpointError::Shape { name: e.name.clone(), expected, found: p.shape });
            }
            values.push(Matrix::new(p.shape[0], p.shape[1], p.data.clone()));
        }
        self.restore(&values);
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> std::result::Result<(), CheckpointError> {
        std::fs::write(path, serde_json::to_string(&self.to_saved())?)?;
        Ok(())
    }

    pub fn load_json(&mut self, path: &Path) -> std::result::Result<(), CheckpointError> {
        let saved: SavedParams = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        self.load_saved(&saved)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = reg.register(format!("{name}.weight"), d_in, d_out, Init::Glorot);
        let bias = reg.register(format!("{name}.bias"), 1, d_out, Init::Constant(0.0));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<'t>(&self, ps: &ParamVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(ps.get(self.weight))?.add_row(ps.get(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Softplus,
    Tanh,
    Sigmoid,
}

/// Two linear layers with GELU between and an optional output nonlinearity.
#[derive(Clone, Copy, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
    pub activation: OutputActivation,
}

impl MlpHead {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        activation: OutputActivation,
    ) -> Self {
        Self {
            hidden: Linear::new(reg, &format!("{name}.0"), d_in, d_hidden),
            out: Linear::new(reg, &format!("{name}.1"), d_hidden, d_out),
            activation,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.out.d_out
    }

    /// Output before the final activation.
    pub fn pre_activation<'t>(&self, ps: &ParamVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(ps, x)?.gelu();
        self.out.forward(ps, h)
    }

    pub fn forward<'t>(&self, ps: &ParamVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let z = self.pre_activation(ps, x)?;
        Ok(match self.activation {
            OutputActivation::Identity => z,
            OutputActivation::Softplus => z.softplus(),
            OutputActivation::Tanh => z.tanh(),
            OutputActivation::Sigmoid => z.sigmoid(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, dim: usize) -> Self {
        Self {
            gain: reg.register(format!("{name}.gain"), 1, dim, Init::Constant(1.0)),
            bias: reg.register(format!("{name}.bias"), 1, dim, Init::Constant(0.0)),
        }
    }

    pub fn forward<'t>(&self, ps: &ParamVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(ps.get(self.gain), ps.get(self.bias), LAYER_NORM_EPS)
    }
}

/// Dropout(GELU(LayerNorm(xW + b))).
#[derive(Clone, Copy, Debug)]
pub struct PhaseProjection {
    pub linear: Linear,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl PhaseProjection {
    pub fn new(reg: &mut ParamRegistry, name: &str, d_in: usize, d_h: usize, dropout: f64) -> Self {
        Self {
            linear: Linear::new(reg, &format!("{name}.linear"), d_in, d_h),
            norm: LayerNorm::new(reg, &format!("{name}.norm"), d_h),
            dropout,
        }
    }

    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        ps: &ParamVars<'t>,
        x: Var<'t>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        let h = self.norm.forward(ps, self.linear.forward(ps, x)?)?.gelu();
        h.dropout(self.dropout, training, rng)
    }
}
