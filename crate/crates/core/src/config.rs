//! The experiment record: every hyperparameter of a run, loadable from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{ImbalanceMode, SplitConfig};
use crate::graph::LaplacianKind;
use crate::metrics::RejectPolicy;
use crate::model::{Components, ModelConfig};
use crate::phases::spectral::SpectralConfig;
use crate::phases::sync::SyncConfig;
use crate::phases::thermo::{Integrator, ThermoConfig};
use crate::spectral::CoordinateMode;
use crate::training::{ClassBalance, LossConfig, OptimConfig, Schedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub hidden_dim: usize,
    pub dropout: f64,
    pub laplacian: LaplacianKind,
    pub heat: ThermoConfig,
    pub sync: SyncConfig,
    pub spectral: SpectralConfig,
    pub integrator: Integrator,
    pub coordinate_mode: CoordinateMode,
    pub components: Components,
    pub alpha_frozen: bool,

    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub clip_norm: f64,
    pub epochs: usize,
    pub patience: usize,
    pub schedule: Schedule,

    pub focal_gamma: f64,
    pub class_balance: ClassBalance,
    pub effective_beta: f64,
    pub lambda_class: f64,
    pub lambda_physics: f64,
    pub lambda_ent: f64,
    pub lambda_threshold: f64,

    pub reject_enabled: bool,
    pub reject_policy: RejectPolicy,

    pub imbalance_ratio: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub imbalance_mode: ImbalanceMode,
    /// Use `split.json` from the dataset directory when it exists.
    pub use_dataset_split: bool,

    /// Drives parameter init, dropout and split sampling.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let optim = OptimConfig::default();
        let split = SplitConfig::default();
        Self {
            hidden_dim: 128,
            dropout: 0.1,
            laplacian: LaplacianKind::Combinatorial,
            heat: ThermoConfig::default(),
            sync: SyncConfig::default(),
            spectral: SpectralConfig::default(),
            integrator: Integrator::ExplicitEuler,
            coordinate_mode: CoordinateMode::EigenvectorRows,
            components: Components::default(),
            alpha_frozen: false,
            lr: optim.learning_rate,
            weight_decay: optim.weight_decay,
            betas: optim.betas,
            clip_norm: optim.clip_norm,
            epochs: optim.epochs,
            patience: optim.patience,
            schedule: optim.schedule,
            focal_gamma: loss.focal_gamma,
            class_balance: loss.class_balance,
            effective_beta: loss.effective_beta,
            lambda_class: loss.lambda_class,
            lambda_physics: loss.lambda_physics,
            lambda_ent: loss.lambda_ent,
            lambda_threshold: loss.lambda_threshold,
            reject_enabled: false,
            reject_policy: RejectPolicy::CountAsError,
            imbalance_ratio: split.imbalance_ratio,
            train_fraction: split.train_fraction,
            val_fraction: split.val_fraction,
            imbalance_mode: split.mode,
            use_dataset_split: true,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if self.components.phases().is_empty() {
            return bad("at least one of components.thermo/sync/spectral must be true".into());
        }
        self.loss().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.optim().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.imbalance_ratio >= 1.0) {
            return bad(format!("imbalance_ratio {} must be >= 1", self.imbalance_ratio));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Returns a copy with `key` (dot path, e.g. `heat.steps`) set to `value`,
    /// parsed as JSON when possible and as a string otherwise.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        let parsed = serde_json::from_str::<Value>(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| ConfigError::Invalid(format!("{key}: {} is not a section", parts[..i].join("."))))?;
            if !obj.contains_key(*part) {
                let valid: Vec<&String> = obj.keys().collect();
                return Err(ConfigError::Invalid(format!("unknown key `{key}`; valid keys here: {valid:?}")));
            }
            node = obj.get_mut(*part).expect("checked");
        }
        *node = parsed;
        let cfg: Self = serde_json::from_value(tree).map_err(|e| ConfigError::Invalid(format!("{key}={value}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self, d_in: usize, num_classes: usize) -> ModelConfig {
        let mut heat = self.heat.clone();
        heat.integrator = self.integrator;
        let mut spectral = self.spectral.clone();
        spectral.coordinate_mode = self.coordinate_mode;
        ModelConfig {
            d_in,
            hidden_dim: self.hidden_dim,
            num_classes,
            dropout: self.dropout,
            laplacian: self.laplacian,
            thermo: heat,
            sync: self.sync.clone(),
            spectral,
            components: self.components,
            alpha_frozen: self.alpha_frozen,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_class: self.lambda_class,
            lambda_physics: self.lambda_physics,
            focal_gamma: self.focal_gamma,
            class_balance: self.class_balance,
            effective_beta: self.effective_beta,
            lambda_ent: self.lambda_ent,
            lambda_threshold: self.lambda_threshold,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            betas: self.betas,
            eps: 1e-8,
            clip_norm: self.clip_norm,
            epochs: self.epochs,
            patience: self.patience,
            schedule: self.schedule,
            seed: self.seed,
        }
    }

    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            imbalance_ratio: self.imbalance_ratio,
            train_fraction: self.train_fraction,
            val_fraction: self.val_fraction,
            mode: self.imbalance_mode,
            seed: self.seed,
        }
    }

    /// The configuration with learned fusion, adaptive heads and physics
    /// losses all switched off.
    pub fn classification_only(&self) -> Self {
        Self {
            lambda_physics: 0.0,
            components: Components { fusion: false, adaptive: false, ..self.components },
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!((c.hidden_dim, c.heat.steps, c.sync.steps, c.spectral.k), (128, 25, 50, 16));
        assert_eq!((c.focal_gamma, c.lambda_class, c.lambda_physics), (2.5, 1.0, 1.0));
        assert!(!c.reject_enabled);
        let m = c.model(10, 3);
        assert_eq!(m.thermo.integrator, Integrator::ExplicitEuler);
    }

    #[test]
    fn empty_json_materializes_defaults_and_round_trips() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let c = ExperimentConfig::from_json(r#"{"heat": {"steps": 7}, "integrator": "implicit_euler_cg", "coordinate_mode": "pseudoinverse_rows"}"#)
            .unwrap();
        assert_eq!(c.heat.steps, 7);
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let m = c.model(4, 2);
        assert_eq!(m.thermo.integrator, Integrator::ImplicitEulerCg);
        assert_eq!(m.spectral.coordinate_mode, CoordinateMode::PseudoinverseRows);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_valid_list() {
        let err = ExperimentConfig::from_json(r#"{"hiden_dim": 3}"#).unwrap_err().to_string();
        assert!(err.contains("hiden_dim") && err.contains("hidden_dim"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"heat": {"stepz": 3}}"#).unwrap_err().to_string();
        assert!(err.contains("stepz") && err.contains("steps"), "{err}");
        assert!(ExperimentConfig::from_json(r#"{"lambda_class": 0, "lambda_physics": 0}"#).is_err());
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::default();
        assert_eq!(c.with_override("imbalance_ratio", "25").unwrap().imbalance_ratio, 25.0);
        assert_eq!(c.with_override("heat.steps", "3").unwrap().heat.steps, 3);
        assert_eq!(c.with_override("integrator", "implicit_euler_cg").unwrap().integrator, Integrator::ImplicitEulerCg);
        assert!(c.with_override("nope", "1").unwrap_err().to_string().contains("hidden_dim"));
        assert!(c.with_override("imbalance_ratio", "0.5").is_err());
        assert!(c.with_override("hidden_dim", "\"x\"").is_err());
    }

    #[test]
    fn classification_only_switches_off_the_extras() {
        let c = ExperimentConfig::default().classification_only();
        assert_eq!(c.lambda_physics, 0.0);
        assert!(!c.components.fusion && !c.components.adaptive);
        assert!(c.components.thermo && c.components.sync && c.components.spectral);
    }
}
