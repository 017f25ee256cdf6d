//! Loss assembly, AdamW with cosine annealing, clipping and early stopping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::Label;
use crate::data::{counts, Split};
use crate::matrix::Matrix;
use crate::metrics::{evaluate, minority_classes, MetricsError, MinorityRule, RejectPolicy};
use crate::model::{Components, GraphContext, Model, ModelConfig, ModelError, ModelOutput};
use crate::phases::thermo::Integrator;
use crate::nn::{ParamRegistry, ParamVars};
use crate::tensor::{gradcheck_many, Tape, TensorError, Var};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("loss mask is empty")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassBalance {
    /// `β_c = N_train / (C · n_c)`.
    #[default]
    InverseFrequency,
    /// `β_c ∝ (1 − b) / (1 − b^{n_c})`, scaled so `Σ_c β_c n_c = N_train`.
    EffectiveNumber,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_class: f64,
    pub lambda_physics: f64,
    pub focal_gamma: f64,
    pub class_balance: ClassBalance,
    /// `b` for [`ClassBalance::EffectiveNumber`].
    pub effective_beta: f64,
    pub lambda_ent: f64,
    /// Weight of the threshold-head calibration term.
    pub lambda_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_class: 1.0,
            lambda_physics: 1.0,
            focal_gamma: 2.5,
            class_balance: ClassBalance::InverseFrequency,
            effective_beta: 0.999,
            lambda_ent: 0.0,
            lambda_threshold: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lambda_class >= 0.0 && self.lambda_physics >= 0.0 && self.lambda_threshold >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if self.lambda_class == 0.0 && self.lambda_physics == 0.0 {
            return bad("lambda_class and lambda_physics cannot both be zero");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be nonnegative");
        }
        if !(self.effective_beta > 0.0 && self.effective_beta < 1.0) {
            return bad("effective_beta must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Per-class `β` from the training labels; absent classes get 0.
pub fn class_balance_weights(labels: &[usize], mask: &[usize], num_classes: usize, config: &LossConfig) -> Vec<f64> {
    let n = counts(labels, num_classes, Some(mask));
    let total = mask.len() as f64;
    match config.class_balance {
        ClassBalance::Off => vec![1.0; num_classes],
        ClassBalance::InverseFrequency => {
            n.iter().map(|&k| if k == 0 { 0.0 } else { total / (num_classes as f64 * k as f64) }).collect()
        }
        ClassBalance::EffectiveNumber => {
            let b = config.effective_beta;
            let raw: Vec<f64> =
                n.iter().map(|&k| if k == 0 { 0.0 } else { (1.0 - b) / (1.0 - b.powi(k as i32)) }).collect();
            let mass: f64 = raw.iter().zip(&n).map(|(r, &k)| r * k as f64).sum();
            raw.iter().map(|r| r * total / mass).collect()
        }
    }
}

/// Classes with no training node; their `β` is never used.
pub fn absent_classes(labels: &[usize], mask: &[usize], num_classes: usize) -> Vec<usize> {
    let n = counts(labels, num_classes, Some(mask));
    (0..num_classes).filter(|&c| n[c] == 0).collect()
}

/// Mean over `mask` of `β_y (1 − p_y)^γ (−ln p_y)`.
pub fn class_balanced_focal_ce<'t>(
    probs: Var<'t>,
    labels: &[usize],
    mask: &[usize],
    config: &LossConfig,
) -> Result<Var<'t>> {
    if mask.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    let c = probs.shape()[1];
    let beta = class_balance_weights(labels, mask, c, config);
    let positions: Vec<(usize, usize)> = mask.iter().map(|&i| (i, labels[i])).collect();
    let p = probs.gather(&positions)?.clamp(PROB_FLOOR, 1.0);
    let nll = p.ln().neg();
    let weighted = nll.mul_const(Matrix::column(mask.iter().map(|&i| beta[labels[i]]).collect()))?;
    let focal = if config.focal_gamma == 0.0 {
        weighted
    } else {
        weighted.mul(p.neg().add_scalar(1.0).powf(config.focal_gamma))?
    };
    Ok(focal.mean())
}

/// `λ_class L_class + λ_physics Σ_m w̄_m L_m + λ_ent Σ_m w̄_m ln w̄_m`, `w̄` the
/// node-mean ensemble weights.
pub fn total_loss<'t>(
    class_loss: Var<'t>,
    consistencies: &[Var<'t>],
    weights: Var<'t>,
    config: &LossConfig,
) -> Result<Var<'t>> {
    let mut loss = class_loss.scale(config.lambda_class);
    let mean_w = weights.mean_rows();
    if config.lambda_physics != 0.0 {
        for (m, l) in consistencies.iter().enumerate() {
            loss = loss.add(mean_w.slice_cols(m, 1)?.mul(*l)?.scale(config.lambda_physics))?;
        }
    }
    if config.lambda_ent != 0.0 {
        let ent = mean_w.mul(mean_w.clamp(PROB_FLOOR, 1.0).ln())?.sum();
        loss = loss.add(ent.scale(config.lambda_ent))?;
    }
    Ok(loss)
}

/// Rows of `w ⊙ y` renormalized to sum to one.
pub fn weighted_probs<'t>(probs: Var<'t>, class_weights: Var<'t>) -> Result<Var<'t>> {
    let scored = probs.mul(class_weights)?;
    Ok(scored.mul_col(scored.sum_cols().recip())?)
}

/// Logistic loss pushing `τ_i` towards 1 where the current candidate label
/// is wrong and towards 0 where it is right, over `mask`.
pub fn threshold_loss<'t>(
    threshold_logits: Var<'t>,
    candidates: &[Label],
    labels: &[usize],
    mask: &[usize],
) -> Result<Var<'t>> {
    if mask.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    let z = threshold_logits.select_rows(mask)?;
    let target = Matrix::column(mask.iter().map(|&i| f64::from(candidates[i] != Label::Class(labels[i]))).collect());
    Ok(z.softplus().sub(z.mul_const(target)?)?.mean())
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub class: Var<'t>,
}

/// Training objective for one forward pass.
pub fn objective<'t>(out: &ModelOutput<'t>, labels: &[usize], mask: &[usize], config: &LossConfig) -> Result<LossParts<'t>> {
    let c = &out.consensus;
    let probs = match c.class_weights {
        Some(w) => weighted_probs(c.final_probs, w)?,
        None => c.final_probs,
    };
    let class = class_balanced_focal_ce(probs, labels, mask, config)?;
    let mut total = total_loss(class, &out.consistencies(), c.weights, config)?;
    if let (Some(logits), true) = (c.threshold_logits, config.lambda_threshold > 0.0) {
        let candidates = c.decide(false);
        total = total.add(threshold_loss(logits, &candidates, labels, mask)?.scale(config.lambda_threshold))?;
    }
    Ok(LossParts { total, class })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub patience: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            clip_norm: 1.0,
            epochs: 300,
            patience: 30,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::InvalidConfig("patience must be at least 1".into()));
        }
        Ok(())
    }

    /// `lr·½(1 + cos(π·epoch/epochs))` under the cosine schedule.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: i32,
}

/// Scales all gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients(reg: &mut ParamRegistry, max_norm: f64) -> f64 {
    let ids: Vec<_> = reg.ids().collect();
    let norm = ids
        .iter()
        .filter_map(|&id| reg.tensor(id).grad.as_ref())
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for id in ids {
            if let Some(g) = reg.tensor_mut(id).grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub learning_rate: f64,
}

/// Clip, then one decoupled-weight-decay Adam update on every trainable
/// parameter that has a gradient.
pub fn adamw_step(reg: &mut ParamRegistry, state: &mut AdamState, config: &OptimConfig, epoch: usize) -> StepInfo {
    let grad_norm = clip_gradients(reg, config.clip_norm);
    let lr = config.learning_rate_at(epoch);
    let ids: Vec<_> = reg.ids().collect();
    if state.m.len() != ids.len() {
        state.m = ids.iter().map(|&id| zeros_like(reg.value(id))).collect();
        state.v = state.m.clone();
        state.step = 0;
    }
    state.step += 1;
    let (b1, b2) = config.betas;
    let bc1 = 1.0 - b1.powi(state.step);
    let bc2 = 1.0 - b2.powi(state.step);
    for (k, id) in ids.into_iter().enumerate() {
        let t = reg.tensor_mut(id);
        let Some(g) = t.grad.as_ref().filter(|_| t.requires_grad) else { continue };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let w = t.value.data_mut();
        for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * config.weight_decay * *w;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + config.eps);
        }
    }
    StepInfo { grad_norm, learning_rate: lr }
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

/// Patience counter on a score that should go up.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Records `score`; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bacc: f64,
    pub val_f1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_bacc: f64,
    /// Number of epochs actually run.
    pub epochs_run: usize,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_bacc,val_f1,lr\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_bacc, r.val_f1, r.lr));
        }
        s
    }
}

/// Eval-mode forward: final probabilities and decisions.
pub fn predict(model: &Model, ctx: &GraphContext, reject_enabled: bool) -> Result<(Matrix, Vec<Label>)> {
    let tape = Tape::new();
    let ps = model.registry.bind(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&ps, ctx, false, &mut rng)?;
    let labels = out.consensus.decide(reject_enabled);
    Ok((out.consensus.final_probs.value().as_ref().clone(), labels))
}

/// Full-graph training with early stopping on validation balanced accuracy;
/// the best-on-validation parameters are restored at the end.
pub fn fit(
    model: &mut Model,
    ctx: &GraphContext,
    labels: &[usize],
    split: &Split,
    loss: &LossConfig,
    optim: &OptimConfig,
    reject_enabled: bool,
) -> Result<TrainReport> {
    loss.validate()?;
    optim.validate()?;
    let c = model.config.num_classes;
    let mut warnings = Vec::new();
    let absent = absent_classes(labels, &split.train, c);
    if !absent.is_empty() {
        warnings.push(format!("classes {absent:?} have no training nodes"));
    }
    let minority = minority_classes(&split.train_counts(labels, c), MinorityRule::BelowMeanCount);
    let val_truth: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let mut adam = AdamState::default();
    let mut stopper = EarlyStopping::new(optim.patience);
    let mut best = model.registry.snapshot();
    let mut history = Vec::new();

    for epoch in 0..optim.epochs {
        let train_loss = {
            let tape = Tape::new();
            let ps: ParamVars<'_> = model.registry.bind(&tape);
            let out = model.forward(&ps, ctx, true, &mut rng)?;
            let parts = objective(&out, labels, &split.train, loss)?;
            let grads = tape.backward(parts.total)?;
            model.registry.collect_grads(&ps, &grads);
            parts.total.value().item()
        };
        let info = adamw_step(&mut model.registry, &mut adam, optim, epoch);

        let (_, pred) = predict(model, ctx, reject_enabled)?;
        let val_pred: Vec<Label> = split.val.iter().map(|&i| pred[i]).collect();
        let report = evaluate(&val_truth, &val_pred, c, &minority, RejectPolicy::CountAsError)?;
        let val_bacc = report.balanced_accuracy.unwrap_or(0.0);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_bacc,
            val_f1: report.macro_f1.unwrap_or(0.0),
            lr: info.learning_rate,
        });
        let (improved, stop) = stopper.update(epoch, val_bacc);
        if improved {
            best = model.registry.snapshot();
        }
        if stop {
            break;
        }
    }
    model.registry.restore(&best);
    model.registry.zero_grads();
    let (best_epoch, best_val_bacc) = stopper.best();
    Ok(TrainReport { epochs_run: history.len(), history, best_epoch, best_val_bacc, warnings })
}

/// Worst relative error between tape and finite-difference gradients of the
/// full training objective with respect to every parameter, on a small
/// random graph with three feature-aligned classes. Dropout is off.
pub fn end_to_end_gradcheck(nodes: usize, components: Components, integrator: Integrator, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = crate::graph::fixtures::random_connected(&mut rng, nodes, 0.25);
    let labels: Vec<usize> = (0..nodes).map(|i| i % 3).collect();
    let x = Matrix::new(
        nodes,
        4,
        (0..nodes * 4).map(|k| rng.random_range(-0.5..0.5) + if k % 4 == labels[k / 4] { 1.0 } else { 0.0 }).collect(),
    );
    let mut config = ModelConfig::new(4, 3);
    config.hidden_dim = 4;
    config.dropout = 0.0;
    config.thermo.steps = 5;
    config.thermo.integrator = integrator;
    config.thermo.cg_tolerance = 1e-14;
    config.sync.steps = 5;
    config.spectral.k = 3;
    config.components = components;
    let ctx = GraphContext::new(&g, x, &config)?;
    let model = Model::new(config, nodes, seed)?;
    let mask: Vec<usize> = (0..nodes).collect();
    let loss = LossConfig { lambda_ent: 0.01, ..LossConfig::default() };
    Ok(gradcheck_many(
        |_, v| {
            let ps = ParamVars::new(v.to_vec());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = model.forward(&ps, &ctx, false, &mut rng)?;
            Ok::<_, TrainError>(objective(&out, &labels, &mask, &loss)?.total)
        },
        &model.registry.snapshot(),
        1e-6,
    ))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::nn::Init;

    fn cfg(gamma: f64, balance: ClassBalance) -> LossConfig {
        LossConfig { focal_gamma: gamma, class_balance: balance, ..LossConfig::default() }
    }

    #[test]
    fn focal_ce_examples() {
        let tape = Tape::new();
        let probs = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.1, 0.9]]);
        let labels = [0, 1, 1, 0];
        let mask = [0, 1, 2, 3];
        let l = class_balanced_focal_ce(tape.constant(probs.clone()), &labels, &mask, &cfg(0.0, ClassBalance::InverseFrequency))
            .unwrap()
            .value()
            .item();
        let ce = -(0.7f64.ln() + 0.8f64.ln() + 0.4f64.ln() + 0.1f64.ln()) / 4.0;
        assert!((l - ce).abs() < 1e-12);

        let perfect = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = class_balanced_focal_ce(tape.constant(perfect), &[0, 1], &[0, 1], &LossConfig::default()).unwrap();
        assert_eq!(l.value().item(), 0.0);

        // counts (9, 1): β = (10/18, 10/2)
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i == 9)).collect();
        let mask: Vec<usize> = (0..10).collect();
        let beta = class_balance_weights(&labels, &mask, 2, &LossConfig::default());
        assert!((beta[0] - 10.0 / 18.0).abs() < 1e-15 && (beta[1] - 5.0).abs() < 1e-15);
        let uniform = tape.constant(Matrix::filled(10, 2, 0.5));
        let l = class_balanced_focal_ce(uniform, &labels, &mask, &LossConfig::default()).unwrap().value().item();
        let oracle = (9.0 * beta[0] + beta[1]) / 10.0 * 0.5f64.powf(2.5) * 2f64.ln();
        assert!((l - oracle).abs() < 1e-12);

        assert!(matches!(
            class_balanced_focal_ce(tape.constant(probs), &[0, 1, 1, 0], &[], &LossConfig::default()),
            Err(TrainError::EmptyMask)
        ));
        assert_eq!(absent_classes(&[0, 0, 2], &[0, 1, 2], 3), vec![1]);
    }

    #[test]
    fn effective_number_normalization() {
        let labels: Vec<usize> = (0..30).map(|i| usize::from(i >= 25)).collect();
        let mask: Vec<usize> = (0..30).collect();
        let c = LossConfig { class_balance: ClassBalance::EffectiveNumber, effective_beta: 0.9, ..LossConfig::default() };
        let beta = class_balance_weights(&labels, &mask, 2, &c);
        assert!((25.0 * beta[0] + 5.0 * beta[1] - 30.0).abs() < 1e-12);
        assert!(beta[1] > beta[0]);
    }

    #[test]
    fn total_loss_examples() {
        let tape = Tape::new();
        let class = tape.constant(Matrix::scalar(0.8));
        let cons = [tape.constant(Matrix::scalar(0.3)), tape.constant(Matrix::scalar(0.5)), tape.constant(Matrix::scalar(0.1))];
        let w = tape.constant(Matrix::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.4, 0.3, 0.3]]));
        let mut c = LossConfig { lambda_class: 2.0, lambda_physics: 0.0, ..LossConfig::default() };
        assert!((total_loss(class, &cons, w, &c).unwrap().value().item() - 1.6).abs() < 1e-15);
        c.lambda_physics = 1.5;
        let expected = 1.6 + 1.5 * (0.3 * 0.3 + 0.3 * 0.5 + 0.4 * 0.1);
        assert!((total_loss(class, &cons, w, &c).unwrap().value().item() - expected).abs() < 1e-14);
        let zero = [tape.constant(Matrix::scalar(0.0)); 3];
        let c = LossConfig { lambda_class: 0.0, lambda_physics: 1.0, ..LossConfig::default() };
        assert_eq!(total_loss(class, &zero, w, &c).unwrap().value().item(), 0.0);
        let c = LossConfig { lambda_ent: 0.01, ..c };
        let ent: f64 = [0.3f64, 0.3, 0.4].iter().map(|x| x * x.ln()).sum();
        assert!((total_loss(class, &zero, w, &c).unwrap().value().item() - 0.01 * ent).abs() < 1e-15);
        assert!(LossConfig { lambda_class: 0.0, lambda_physics: 0.0, ..LossConfig::default() }.validate().is_err());
    }

    fn scalar_registry(value: f64, grad: f64) -> (ParamRegistry, crate::nn::ParamId) {
        let mut reg = ParamRegistry::new();
        let id = reg.register("w", 1, 1, Init::Constant(value));
        reg.init_params(0);
        reg.tensor_mut(id).grad = Some(Matrix::scalar(grad));
        (reg, id)
    }

    #[test]
    fn adamw_examples() {
        let opt = OptimConfig { schedule: Schedule::Constant, weight_decay: 0.0, learning_rate: 0.1, ..OptimConfig::default() };
        let (mut reg, id) = scalar_registry(1.5, 0.0);
        adamw_step(&mut reg, &mut AdamState::default(), &opt, 0);
        assert_eq!(reg.value(id).item(), 1.5);

        // single step with g = 0.5: m̂ = g, v̂ = g², update = lr·g/(|g| + eps) + decoupled decay
        let opt = OptimConfig { weight_decay: 0.01, clip_norm: 0.0, ..opt };
        let (mut reg, id) = scalar_registry(2.0, 0.5);
        adamw_step(&mut reg, &mut AdamState::default(), &opt, 0);
        let after_decay = 2.0 - 0.1 * 0.01 * 2.0;
        let expected = after_decay - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((reg.value(id).item() - expected).abs() < 1e-15);

        // two steps against the recurrence written out by hand
        let (mut reg, id) = scalar_registry(2.0, 0.5);
        let mut st = AdamState::default();
        adamw_step(&mut reg, &mut st, &opt, 0);
        reg.tensor_mut(id).grad = Some(Matrix::scalar(-0.2));
        adamw_step(&mut reg, &mut st, &opt, 1);
        let (m, v) = (0.9 * 0.05 + 0.1 * -0.2, 0.999 * 0.00025 + 0.001 * 0.04);
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
        let w2 = expected - 0.1 * 0.01 * expected - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((reg.value(id).item() - w2).abs() < 1e-14);
    }

    #[test]
    fn clipping_and_schedule() {
        let mut reg = ParamRegistry::new();
        let a = reg.register("a", 1, 2, Init::Constant(0.0));
        reg.tensor_mut(a).grad = Some(Matrix::row_vector(vec![6.0, 8.0]));
        assert_eq!(clip_gradients(&mut reg, 1.0), 10.0);
        let g = reg.tensor(a).grad.clone().unwrap();
        assert!((g.get(0, 0) - 0.6).abs() < 1e-15 && (g.get(0, 1) - 0.8).abs() < 1e-15);

        let opt = OptimConfig { learning_rate: 1.0, epochs: 10, ..OptimConfig::default() };
        assert_eq!(opt.learning_rate_at(0), 1.0);
        assert!((opt.learning_rate_at(5) - 0.5).abs() < 1e-15);
        assert!(opt.learning_rate_at(10).abs() < 1e-15);
        assert!(OptimConfig { patience: 0, ..OptimConfig::default() }.validate().is_err());
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.update(0, 0.5), (true, false));
        assert_eq!(s.update(1, 0.4), (false, true));
        let mut s = EarlyStopping::new(3);
        let scores = [0.1, 0.2, 0.2, 0.15, 0.3, 0.3, 0.3, 0.3];
        let stopped = scores.iter().enumerate().position(|(e, &x)| s.update(e, x).1);
        assert_eq!(stopped, Some(7));
        assert_eq!(s.best(), (4, 0.3));
    }

    fn tiny_problem(n: usize, seed: u64) -> (crate::graph::SparseGraph, Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = crate::graph::fixtures::random_connected(&mut rng, n, 0.25);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = Matrix::new(
            n,
            4,
            (0..n * 4).map(|k| rng.random_range(-0.5..0.5) + if k % 4 == labels[k / 4] { 1.0 } else { 0.0 }).collect(),
        );
        (g, x, labels)
    }

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::new(4, 3);
        c.hidden_dim = 4;
        c.dropout = 0.0;
        c.thermo.steps = 5;
        c.thermo.integrator = Integrator::ExplicitEuler;
        c.sync.steps = 5;
        c.spectral.k = 3;
        c
    }

    #[test]
    fn end_to_end_gradcheck_full_model() {
        let err = end_to_end_gradcheck(10, Components::default(), Integrator::ExplicitEuler, 2).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (g, x, labels) = tiny_problem(30, 3);
        let split = Split {
            train: (0..30).filter(|i| i % 2 == 0).collect(),
            val: (0..30).filter(|i| i % 4 == 1).collect(),
            test: (0..30).filter(|i| i % 4 == 3).collect(),
            imbalance_ratio: None,
        };
        for seed in 0..5 {
            let config = tiny_config();
            let ctx = GraphContext::new(&g, x.clone(), &config).unwrap();
            let optim = OptimConfig { epochs: 50, patience: 100, learning_rate: 0.01, seed, ..OptimConfig::default() };
            let mut a = Model::new(config.clone(), 30, seed).unwrap();
            let ra = fit(&mut a, &ctx, &labels, &split, &LossConfig::default(), &optim, false).unwrap();
            assert_eq!(ra.epochs_run, 50);
            assert!(ra.history[49].train_loss < ra.history[0].train_loss, "seed {seed}");
            if seed == 0 {
                let mut b = Model::new(config, 30, seed).unwrap();
                let rb = fit(&mut b, &ctx, &labels, &split, &LossConfig::default(), &optim, false).unwrap();
                assert_eq!(ra, rb);
                assert_eq!(a.registry.snapshot(), b.registry.snapshot());
            }
        }
    }

    #[test]
    fn separable_problem_fits_training_set() {
        let (g, x, labels) = tiny_problem(24, 5);
        let all: Vec<usize> = (0..24).collect();
        let split = Split { train: all.clone(), val: all.clone(), test: all, imbalance_ratio: None };
        let config = tiny_config();
        let ctx = GraphContext::new(&g, x, &config).unwrap();
        let mut model = Model::new(config, 24, 1).unwrap();
        let optim = OptimConfig { epochs: 200, patience: 200, learning_rate: 0.01, ..OptimConfig::default() };
        let report = fit(&mut model, &ctx, &labels, &split, &LossConfig::default(), &optim, false).unwrap();
        assert_eq!(report.best_val_bacc, 1.0, "{:?}", report.history.last());
        let (_, pred) = predict(&model, &ctx, false).unwrap();
        assert!(pred.iter().zip(&labels).all(|(p, &l)| *p == Label::Class(l)));
    }
}
