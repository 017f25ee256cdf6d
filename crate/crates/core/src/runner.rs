//! One training run end to end, the files it leaves behind, and sweeps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::consensus::Label;
use crate::data::{make_imbalanced_split, DataError, Dataset, Split};
use crate::metrics::{evaluate, minority_classes, write_metrics_json, write_per_class_csv, EvalReport, MetricsError, MinorityRule};
use crate::model::{GraphContext, Model, ModelError};
use crate::nn::CheckpointError;
use crate::training::{fit, predict, TrainError, TrainReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RESOLVED_CONFIG_FILE: &str = "config-resolved.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    /// Whether the failure came from the file system.
    pub fn is_io(&self) -> bool {
        match self {
            RunError::Io { .. } | RunError::Config(ConfigError::Io { .. }) => true,
            RunError::Data(DataError::Io { .. } | DataError::MissingFile(_)) => true,
            RunError::Metrics(MetricsError::Io(_)) => true,
            RunError::Checkpoint { source: CheckpointError::Io(_), .. } => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, RunError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// The dataset's own split when allowed and present, else a fresh imbalanced one.
pub fn resolve_split(dataset: &Dataset, shipped: Option<&Split>, cfg: &ExperimentConfig) -> Result<Split> {
    match shipped {
        Some(s) if cfg.use_dataset_split => Ok(s.clone()),
        _ => Ok(make_imbalanced_split(dataset, &cfg.split())?),
    }
}

pub struct RunResult {
    pub config: ExperimentConfig,
    pub split: Split,
    pub train: TrainReport,
    pub test: EvalReport,
    pub model: Model,
}

fn build(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<(Model, GraphContext)> {
    let mc = cfg.model(dataset.feature_dim(), dataset.num_classes);
    let ctx = GraphContext::new(&dataset.graph, dataset.features.clone(), &mc)?;
    let model = Model::new(mc, dataset.num_nodes(), cfg.seed)?;
    Ok((model, ctx))
}

/// Scores predictions on one part of the split.
pub fn score(dataset: &Dataset, split: &Split, pred: &[Label], part: SplitPart, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let idx = split.part(part);
    let truth: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
    let p: Vec<Label> = idx.iter().map(|&i| pred[i]).collect();
    let minority = minority_classes(&split.train_counts(&dataset.labels, dataset.num_classes), MinorityRule::BelowMeanCount);
    Ok(evaluate(&truth, &p, dataset.num_classes, &minority, cfg.reject_policy)?)
}

pub fn run(dataset: &Dataset, split: &Split, cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    split.validate(&dataset.labels, dataset.num_classes)?;
    let (mut model, ctx) = build(dataset, cfg)?;
    let train = fit(&mut model, &ctx, &dataset.labels, split, &cfg.loss(), &cfg.optim(), cfg.reject_enabled)?;
    let (_, pred) = predict(&model, &ctx, cfg.reject_enabled)?;
    let test = score(dataset, split, &pred, SplitPart::Test, cfg)?;
    Ok(RunResult { config: cfg.clone(), split: split.clone(), train, test, model })
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| RunError::Io { path, source: e })
}

/// Checkpoint, resolved config, split, history and test metrics.
pub fn write_run(dir: &Path, result: &RunResult, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| RunError::Io { path: dir.to_path_buf(), source: e })?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    result.model.registry.save_json(&ckpt).map_err(|e| RunError::Checkpoint { path: ckpt, source: e })?;
    write(dir.join(RESOLVED_CONFIG_FILE), &result.config.to_json())?;
    let split = serde_json::to_string_pretty(&result.split).expect("split serializes") + "\n";
    write(dir.join("split.json"), &split)?;
    write(dir.join("history.csv"), &result.train.history_csv())?;
    write_metrics_json(&dir.join("metrics.json"), &result.test)?;
    let counts = result.split.train_counts(&dataset.labels, dataset.num_classes);
    write_per_class_csv(&dir.join("per_class.csv"), &result.test, &counts)?;
    Ok(())
}

/// Rebuilds the model described by `cfg` and loads checkpoint values into it.
pub fn load_model(dataset: &Dataset, cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(Model, GraphContext)> {
    let (mut model, ctx) = build(dataset, cfg)?;
    model
        .registry
        .load_json(checkpoint)
        .map_err(|e| RunError::Checkpoint { path: checkpoint.to_path_buf(), source: e })?;
    Ok((model, ctx))
}

/// Evaluates a saved model on one part of the split.
pub fn evaluate_checkpoint(
    dataset: &Dataset,
    split: &Split,
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    part: SplitPart,
) -> Result<EvalReport> {
    let (model, ctx) = load_model(dataset, cfg, checkpoint)?;
    let (_, pred) = predict(&model, &ctx, cfg.reject_enabled)?;
    score(dataset, split, &pred, part, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub minority_recall: Option<f64>,
    pub coverage: f64,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub setting: String,
    pub runs: usize,
    pub bacc_mean: f64,
    pub bacc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub minority_recall_mean: f64,
    pub minority_recall_std: f64,
}

/// One labelled configuration in a sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub setting: String,
    pub config: ExperimentConfig,
}

/// Runs every point for every seed (seeds override `config.seed`). Splits are
/// regenerated per run unless the dataset ships one and the config allows it.
pub fn sweep(
    dataset: &Dataset,
    shipped: Option<&Split>,
    points: &[SweepPoint],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let tasks: Vec<(usize, u64)> = (0..points.len()).flat_map(|p| seeds.iter().map(move |&s| (p, s))).collect();
    let one = |&(p, seed): &(usize, u64)| -> Result<SweepRow> {
        let point = &points[p];
        let cfg = ExperimentConfig { seed, ..point.config.clone() };
        let split = resolve_split(dataset, shipped, &cfg)?;
        let r = run(dataset, &split, &cfg)?;
        Ok(SweepRow {
            setting: point.setting.clone(),
            seed,
            accuracy: r.test.accuracy,
            balanced_accuracy: r.test.balanced_accuracy,
            macro_f1: r.test.macro_f1,
            minority_recall: r.test.minority_recall,
            coverage: r.test.coverage,
            epochs_run: r.train.epochs_run,
        })
    };
    if jobs <= 1 {
        tasks.iter().map(one).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().expect("thread pool");
        pool.install(|| tasks.par_iter().map(one).collect())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Mean ± sample std per setting, in first-appearance order. Undefined
/// metrics count as 0.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.setting.as_str()) {
            order.push(&r.setting);
        }
    }
    order
        .into_iter()
        .map(|setting| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.setting == setting).collect();
            let col = |f: fn(&SweepRow) -> Option<f64>| group.iter().map(|r| f(r).unwrap_or(0.0)).collect::<Vec<_>>();
            let (bacc_mean, bacc_std) = mean_std(&col(|r| r.balanced_accuracy));
            let (f1_mean, f1_std) = mean_std(&col(|r| r.macro_f1));
            let (minority_recall_mean, minority_recall_std) = mean_std(&col(|r| r.minority_recall));
            SweepSummary {
                setting: setting.to_string(),
                runs: group.len(),
                bacc_mean,
                bacc_std,
                f1_mean,
                f1_std,
                minority_recall_mean,
                minority_recall_std,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let wrap = |e: csv::Error| RunError::Metrics(MetricsError::Csv(e));
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for r in rows {
        w.serialize(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| RunError::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sbm, load_dataset, SbmSpec};

    fn small() -> (Dataset, ExperimentConfig) {
        let d = generate_sbm(&SbmSpec {
            class_sizes: vec![30, 25, 20],
            p_within: 0.2,
            p_between: 0.02,
            feature_dim: 6,
            separation: 1.0,
            noise: 1.0,
            seed: 1,
            name: "s".into(),
        })
        .unwrap();
        let cfg = ExperimentConfig {
            hidden_dim: 8,
            epochs: 5,
            heat: crate::phases::thermo::ThermoConfig { steps: 3, ..Default::default() },
            sync: crate::phases::sync::SyncConfig { steps: 3, ..Default::default() },
            train_fraction: 0.3,
            imbalance_ratio: 3.0,
            ..ExperimentConfig::default()
        };
        (d, cfg)
    }

    #[test]
    fn run_write_and_reload() {
        let (d, cfg) = small();
        let split = resolve_split(&d, None, &cfg).unwrap();
        let r = run(&d, &split, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &r, &d).unwrap();
        for f in [CHECKPOINT_FILE, RESOLVED_CONFIG_FILE, "split.json", "history.csv", "metrics.json", "per_class.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = ExperimentConfig::load(&dir.path().join(RESOLVED_CONFIG_FILE)).unwrap();
        assert_eq!(back, cfg);
        let again =
            evaluate_checkpoint(&d, &split, &back, &dir.path().join(CHECKPOINT_FILE), SplitPart::Test).unwrap();
        assert_eq!(again, r.test);
        let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert_eq!(history.lines().count(), r.train.epochs_run + 1);
    }

    #[test]
    fn shipped_split_preference() {
        let (d, cfg) = small();
        let dir = tempfile::tempdir().unwrap();
        let shipped = make_imbalanced_split(&d, &crate::data::SplitConfig { seed: 99, ..cfg.split() }).unwrap();
        crate::data::write_dataset(dir.path(), &d, Some(&shipped)).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let s = resolve_split(&loaded.dataset, loaded.split.as_ref(), &cfg).unwrap();
        assert_eq!(s, shipped);
        let fresh = ExperimentConfig { use_dataset_split: false, ..cfg };
        assert_ne!(resolve_split(&loaded.dataset, loaded.split.as_ref(), &fresh).unwrap(), shipped);
    }

    #[test]
    fn sweep_is_order_stable_across_jobs() {
        let (d, cfg) = small();
        let points: Vec<SweepPoint> = [1.0, 3.0]
            .iter()
            .map(|&r| SweepPoint { setting: format!("imbalance_ratio={r}"), config: ExperimentConfig { imbalance_ratio: r, ..cfg.clone() } })
            .collect();
        let a = sweep(&d, None, &points, &[0, 1], 1).unwrap();
        let b = sweep(&d, None, &points, &[0, 1], 2).unwrap();
        assert_eq!(a, b);
        let s = summarize(&a);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].runs, 2);
    }
}
