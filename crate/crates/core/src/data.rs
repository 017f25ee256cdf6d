//! Dataset directories, synthetic block-model graphs and imbalanced splits.
//!
//! Directory layout: `edges.csv` (`src,dst` per line, 0-indexed),
//! `features.csv` (N rows of D decimals), `labels.csv` (N integers) and an
//! optional `split.json` with `train`/`val`/`test` index arrays.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CanonicalizationReport, GraphError, SparseGraph};
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {message}")]
    MalformedRow { file: PathBuf, line: u64, message: String },
    #[error("{file}:{line}: label {label} is negative or not an integer")]
    LabelOutOfRange { file: PathBuf, line: u64, label: String },
    #[error("class {class} has {available} nodes but the split needs {needed}")]
    InsufficientClassPopulation { class: usize, available: usize, needed: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid block-model spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graph: SparseGraph,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        counts(&self.labels, self.num_classes, None)
    }
}

/// Per-class counts, optionally restricted to `subset`.
pub fn counts(labels: &[usize], num_classes: usize, subset: Option<&[usize]>) -> Vec<usize> {
    let mut out = vec![0; num_classes];
    match subset {
        Some(idx) => idx.iter().for_each(|&i| out[labels[i]] += 1),
        None => labels.iter().for_each(|&l| out[l] += 1),
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceMode {
    /// Geometric interpolation of training counts across classes.
    #[default]
    Graded,
    /// Only the smallest class is shrunk.
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance_ratio: Option<f64>,
}

impl Split {
    /// Disjointness, index range and test coverage of every class.
    pub fn validate(&self, labels: &[usize], num_classes: usize) -> Result<()> {
        let n = labels.len();
        let mut seen = vec![false; n];
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in set.iter() {
                if i >= n {
                    return Err(DataError::InvalidSplit(format!("{name} index {i} out of range for {n} nodes")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(DataError::InvalidSplit(format!("node {i} appears twice")));
                }
            }
        }
        let test = counts(labels, num_classes, Some(&self.test));
        if let Some(c) = test.iter().position(|&k| k == 0) {
            return Err(DataError::InvalidSplit(format!("class {c} absent from test")));
        }
        Ok(())
    }

    pub fn train_counts(&self, labels: &[usize], num_classes: usize) -> Vec<usize> {
        counts(labels, num_classes, Some(&self.train))
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io { path: path.to_path_buf(), source: e },
    })
}

fn read_rows(path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::MalformedRow {
            file: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn malformed(path: &Path, line: u64, message: impl Into<String>) -> DataError {
    DataError::MalformedRow { file: path.to_path_buf(), line, message: message.into() }
}

/// A loaded directory plus what canonicalization dropped from `edges.csv`.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub dataset: Dataset,
    pub split: Option<Split>,
    pub edge_report: CanonicalizationReport,
}

pub fn load_dataset(dir: &Path) -> Result<Loaded> {
    let labels_path = dir.join("labels.csv");
    let mut labels = Vec::new();
    for (line, row) in read_rows(&labels_path)? {
        if row.len() != 1 {
            return Err(malformed(&labels_path, line, format!("expected 1 field, found {}", row.len())));
        }
        let label = row[0]
            .parse::<usize>()
            .map_err(|_| DataError::LabelOutOfRange { file: labels_path.clone(), line, label: row[0].clone() })?;
        labels.push(label);
    }
    let n = labels.len();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);

    let features_path = dir.join("features.csv");
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (line, row) in read_rows(&features_path)? {
        let d = *dim.get_or_insert(row.len());
        if row.len() != d {
            return Err(malformed(&features_path, line, format!("expected {d} fields, found {}", row.len())));
        }
        for field in &row {
            let v: f64 = field.parse().map_err(|_| malformed(&features_path, line, format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(malformed(&features_path, line, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(malformed(&features_path, rows as u64, format!("{rows} feature rows for {n} labels")));
    }
    let features = Matrix::new(n, dim.unwrap_or(0), data);

    let edges_path = dir.join("edges.csv");
    let mut edges = Vec::new();
    for (line, row) in read_rows(&edges_path)? {
        if row.len() != 2 {
            return Err(malformed(&edges_path, line, format!("expected 2 fields, found {}", row.len())));
        }
        let mut ends = [0usize; 2];
        for (slot, field) in ends.iter_mut().zip(&row) {
            *slot = field.parse().map_err(|_| malformed(&edges_path, line, format!("bad node index {field:?}")))?;
            if *slot >= n {
                return Err(malformed(&edges_path, line, format!("node {slot} out of range for {n} nodes")));
            }
        }
        edges.push((ends[0], ends[1]));
    }
    let graph = SparseGraph::from_edges(n, edges)?;
    let edge_report = graph.canonicalization();

    let split_path = dir.join("split.json");
    let split = if split_path.exists() {
        let text = std::fs::read_to_string(&split_path).map_err(|e| DataError::Io { path: split_path.clone(), source: e })?;
        let split: Split =
            serde_json::from_str(&text).map_err(|e| DataError::Json { path: split_path.clone(), source: e })?;
        split.validate(&labels, num_classes)?;
        Some(split)
    } else {
        None
    };

    let name = dir.file_name().map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Loaded { dataset: Dataset { name, graph, features, labels, num_classes }, split, edge_report })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
}

/// Writes the directory format; features use 17 significant digits.
pub fn write_dataset(dir: &Path, dataset: &Dataset, split: Option<&Split>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
    let mut edges = String::new();
    for &(a, b) in dataset.graph.edges() {
        edges.push_str(&format!("{a},{b}\n"));
    }
    write_text(&dir.join("edges.csv"), &edges)?;

    let mut features = String::new();
    for i in 0..dataset.num_nodes() {
        let row: Vec<String> = dataset.features.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        features.push_str(&row.join(","));
        features.push('\n');
    }
    write_text(&dir.join("features.csv"), &features)?;

    let labels: String = dataset.labels.iter().map(|l| format!("{l}\n")).collect();
    write_text(&dir.join("labels.csv"), &labels)?;

    if let Some(split) = split {
        let path = dir.join("split.json");
        let text = serde_json::to_string_pretty(split).map_err(|e| DataError::Json { path: path.clone(), source: e })?;
        write_text(&path, &(text + "\n"))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmSpec {
    pub class_sizes: Vec<usize>,
    pub p_within: f64,
    pub p_between: f64,
    pub feature_dim: usize,
    /// Distance of each class mean from the origin along its own axis.
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_sbm_name")]
    pub name: String,
}

fn default_sbm_name() -> String {
    "sbm".to_string()
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.class_sizes.is_empty() || self.class_sizes.contains(&0) {
            return bad("class sizes must be nonempty and at least 1");
        }
        for p in [self.p_within, self.p_between] {
            if !(0.0..=1.0).contains(&p) {
                return bad("edge probabilities must lie in [0, 1]");
            }
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.separation.is_finite()) {
            return bad("noise must be finite and nonnegative, separation finite");
        }
        Ok(())
    }
}

/// Bernoulli(p) selection over `0..count` by geometric skipping.
fn sample_indices(rng: &mut ChaCha8Rng, count: usize, p: f64, mut emit: impl FnMut(usize)) {
    if p <= 0.0 || count == 0 {
        return;
    }
    if p >= 1.0 {
        (0..count).for_each(emit);
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut i = 0usize;
    loop {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let skip = (u.ln() / log_q).floor();
        if skip >= (count - i) as f64 {
            return;
        }
        i += skip as usize;
        emit(i);
        i += 1;
        if i >= count {
            return;
        }
    }
}

/// Planted-partition graph with nodes ordered by class; features are the
/// class mean plus isotropic Gaussian noise.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> =
        spec.class_sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
    let n = labels.len();
    let mut edges = Vec::new();
    // walk the strict upper triangle row by row, in blocks of equal probability
    for i in 0..n {
        let mut j = i + 1;
        while j < n {
            let same = labels[j] == labels[i];
            let mut end = j;
            while end < n && (labels[end] == labels[i]) == same {
                end += 1;
            }
            let p = if same { spec.p_within } else { spec.p_between };
            sample_indices(&mut rng, end - j, p, |k| edges.push((i, j + k)));
            j = end;
        }
    }
    let graph = SparseGraph::from_edges(n, edges)?;

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = spec.feature_dim;
    let mut features = Matrix::zeros(n, d);
    for (i, &c) in labels.iter().enumerate() {
        let row = features.row_mut(i);
        for v in row.iter_mut() {
            *v = spec.noise * normal.sample(&mut rng);
        }
        row[c % d] += spec.separation;
    }
    Ok(Dataset { name: spec.name.clone(), graph, features, labels, num_classes: spec.class_sizes.len() })
}

/// Training count per class rank (rank 0 = majority).
pub fn imbalance_profile(n_major: usize, num_classes: usize, ratio: f64, mode: ImbalanceMode) -> Vec<usize> {
    let floor = |x: f64| (x.round() as usize).max(1);
    (0..num_classes)
        .map(|r| {
            if num_classes == 1 || r == 0 {
                return n_major.max(1);
            }
            match mode {
                ImbalanceMode::Graded => {
                    let t = r as f64 / (num_classes - 1) as f64;
                    floor(n_major as f64 * ratio.powf(-t))
                }
                ImbalanceMode::Step if r == num_classes - 1 => floor(n_major as f64 / ratio),
                ImbalanceMode::Step => n_major.max(1),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub imbalance_ratio: f64,
    /// Training share of the largest class; sets the majority count.
    pub train_fraction: f64,
    /// Share of each class's leftover nodes that goes to validation.
    pub val_fraction: f64,
    pub mode: ImbalanceMode,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { imbalance_ratio: 10.0, train_fraction: 0.2, val_fraction: 0.5, mode: ImbalanceMode::Graded, seed: 0 }
    }
}

/// Classes are ranked by population (largest first, ties by index) and
/// receive the imbalance profile in that order. Leftover nodes are split
/// per class into validation and test; each gets at least one node.
pub fn make_imbalanced_split(dataset: &Dataset, config: &SplitConfig) -> Result<Split> {
    if !(config.imbalance_ratio >= 1.0 && config.imbalance_ratio.is_finite()) {
        return Err(DataError::InvalidSplit(format!("imbalance ratio {} must be >= 1", config.imbalance_ratio)));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(DataError::InvalidSplit("train_fraction must lie in (0, 1)".into()));
    }
    let c = dataset.num_classes;
    let population = dataset.class_counts();
    let mut ranked: Vec<usize> = (0..c).collect();
    ranked.sort_by_key(|&k| (std::cmp::Reverse(population[k]), k));
    let n_major = ((config.train_fraction * population[ranked[0]] as f64).round() as usize).max(1);
    let profile = imbalance_profile(n_major, c, config.imbalance_ratio, config.mode);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut split = Split { train: vec![], val: vec![], test: vec![], imbalance_ratio: Some(config.imbalance_ratio) };
    for (rank, &class) in ranked.iter().enumerate() {
        let want = profile[rank];
        if population[class] < want + 2 {
            return Err(DataError::InsufficientClassPopulation {
                class,
                available: population[class],
                needed: want + 2,
            });
        }
        let mut members: Vec<usize> = (0..dataset.num_nodes()).filter(|&i| dataset.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let rest = members.len() - want;
        let n_val = ((config.val_fraction * rest as f64).round() as usize).clamp(1, rest - 1);
        split.train.extend_from_slice(&members[..want]);
        split.val.extend_from_slice(&members[want..want + n_val]);
        split.test.extend_from_slice(&members[want + n_val..]);
    }
    for set in [&mut split.train, &mut split.val, &mut split.test] {
        set.sort_unstable();
    }
    split.validate(&dataset.labels, c)?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: Vec<usize>, p_in: f64, p_out: f64, seed: u64) -> SbmSpec {
        SbmSpec {
            class_sizes: sizes,
            p_within: p_in,
            p_between: p_out,
            feature_dim: 4,
            separation: 1.0,
            noise: 0.5,
            seed,
            name: "t".into(),
        }
    }

    #[test]
    fn sbm_structure() {
        let d = generate_sbm(&spec(vec![10, 15, 5], 0.4, 0.0, 1)).unwrap();
        assert!(d.graph.edges().iter().all(|&(a, b)| d.labels[a] == d.labels[b]));
        let d = generate_sbm(&spec(vec![6, 7], 1.0, 0.0, 2)).unwrap();
        assert_eq!(d.graph.num_edges(), 15 + 21);
        assert_eq!(d.graph.num_components(), 2);
        assert_eq!(d, generate_sbm(&spec(vec![6, 7], 1.0, 0.0, 2)).unwrap());
        assert_eq!(d.features.shape(), [13, 4]);
    }

    #[test]
    fn sbm_edge_count_moments() {
        let (sizes, p_in, p_out) = (vec![30, 20, 10], 0.2, 0.03);
        let within: usize = sizes.iter().map(|s| s * (s - 1) / 2).sum();
        let total = 60 * 59 / 2;
        let between = total - within;
        let mean = within as f64 * p_in + between as f64 * p_out;
        let sd = (within as f64 * p_in * (1.0 - p_in) + between as f64 * p_out * (1.0 - p_out)).sqrt();
        let mut sum = 0.0;
        for seed in 0..20 {
            let e = generate_sbm(&spec(sizes.clone(), p_in, p_out, seed)).unwrap().graph.num_edges() as f64;
            assert!((e - mean).abs() < 4.0 * sd, "{e} vs {mean} ± {sd}");
            sum += e;
        }
        // the 20-seed mean has standard error sd/√20
        assert!((sum / 20.0 - mean).abs() < 3.0 * sd / 20f64.sqrt());
    }

    #[test]
    fn sbm_rejects_bad_specs() {
        assert!(generate_sbm(&spec(vec![], 0.1, 0.1, 0)).is_err());
        assert!(generate_sbm(&spec(vec![3, 0], 0.1, 0.1, 0)).is_err());
        assert!(generate_sbm(&spec(vec![3], 1.5, 0.1, 0)).is_err());
    }

    #[test]
    fn profile_examples() {
        assert_eq!(imbalance_profile(30, 4, 1.0, ImbalanceMode::Graded), vec![30; 4]);
        assert_eq!(imbalance_profile(100, 2, 50.0, ImbalanceMode::Graded), vec![100, 2]);
        assert_eq!(imbalance_profile(100, 3, 10.0, ImbalanceMode::Step), vec![100, 100, 10]);
        assert_eq!(imbalance_profile(100, 3, 10.0, ImbalanceMode::Graded), vec![100, 32, 10]);
        assert_eq!(imbalance_profile(5, 2, 50.0, ImbalanceMode::Graded), vec![5, 1]);
    }

    #[test]
    fn split_counts_and_audit() {
        let d = generate_sbm(&spec(vec![120, 100, 80], 0.05, 0.01, 3)).unwrap();
        for ratio in [1.0, 2.5, 5.0, 10.0, 25.0] {
            for mode in [ImbalanceMode::Graded, ImbalanceMode::Step] {
                let cfg = SplitConfig { imbalance_ratio: ratio, train_fraction: 0.4, mode, seed: 9, ..Default::default() };
                let s = make_imbalanced_split(&d, &cfg).unwrap();
                s.validate(&d.labels, 3).unwrap();
                let tc = s.train_counts(&d.labels, 3);
                let (max, min) = (*tc.iter().max().unwrap(), *tc.iter().min().unwrap());
                assert_eq!(max, 48);
                let target = max as f64 / ratio;
                assert!((min as f64 - target).abs() <= 1.0, "{ratio}: {tc:?}");
                assert_eq!(s.train.len() + s.val.len() + s.test.len(), 300);
                assert_eq!(s, make_imbalanced_split(&d, &cfg).unwrap());
            }
        }
        let balanced = make_imbalanced_split(&d, &SplitConfig { imbalance_ratio: 1.0, ..Default::default() }).unwrap();
        assert_eq!(balanced.train_counts(&d.labels, 3), vec![24, 24, 24]);
    }

    #[test]
    fn split_errors() {
        let d = generate_sbm(&spec(vec![50, 3], 0.2, 0.1, 4)).unwrap();
        let cfg = SplitConfig { imbalance_ratio: 1.0, train_fraction: 0.5, ..Default::default() };
        assert!(matches!(make_imbalanced_split(&d, &cfg), Err(DataError::InsufficientClassPopulation { class: 1, .. })));
        let bad = SplitConfig { imbalance_ratio: 0.5, ..Default::default() };
        assert!(make_imbalanced_split(&d, &bad).is_err());
        let overlap = Split { train: vec![0, 1], val: vec![1], test: vec![50, 2], imbalance_ratio: None };
        assert!(overlap.validate(&d.labels, 2).is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_sbm(&spec(vec![12, 9], 0.3, 0.05, 5)).unwrap();
        let s = make_imbalanced_split(&d, &SplitConfig { imbalance_ratio: 2.0, train_fraction: 0.3, ..Default::default() })
            .unwrap();
        write_dataset(dir.path(), &d, Some(&s)).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.dataset.graph, d.graph);
        assert_eq!(back.dataset.labels, d.labels);
        assert_eq!(back.dataset.num_classes, 2);
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.dataset.features), bits(&d.features));
        assert_eq!(back.split, Some(s));
    }

    fn write(dir: &Path, edges: &str, features: &str, labels: &str) {
        std::fs::write(dir.join("edges.csv"), edges).unwrap();
        std::fs::write(dir.join("features.csv"), features).unwrap();
        std::fs::write(dir.join("labels.csv"), labels).unwrap();
    }

    #[test]
    fn loader_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        write(p, "", "1.0,2\n3,4e-1\n0,0\n", "0\n1\n1\n");
        let l = load_dataset(p).unwrap();
        assert_eq!(l.dataset.graph.num_edges(), 0);
        assert_eq!(l.dataset.features.get(1, 1), 0.4);

        write(p, "2,1\n1,2\n0,0\n", "1\n2\n3\n", "0\n1\n1\n");
        let l = load_dataset(p).unwrap();
        assert_eq!(l.dataset.graph.edges(), &[(1, 2)]);
        assert_eq!(l.edge_report.duplicates, 1);
        assert_eq!(l.edge_report.self_loops, 1);

        write(p, "0,1\n1,x\n", "1\n2\n", "0\n1\n");
        assert!(matches!(load_dataset(p), Err(DataError::MalformedRow { line: 2, .. })));
        write(p, "0,1\n", "1\n2\n", "0\n-1\n");
        assert!(matches!(load_dataset(p), Err(DataError::LabelOutOfRange { line: 2, .. })));
        write(p, "0,5\n", "1\n2\n", "0\n1\n");
        assert!(matches!(load_dataset(p), Err(DataError::MalformedRow { line: 1, .. })));
        write(p, "", "1,2\n3\n", "0\n1\n");
        assert!(matches!(load_dataset(p), Err(DataError::MalformedRow { line: 2, .. })));
        std::fs::remove_file(p.join("labels.csv")).unwrap();
        assert!(matches!(load_dataset(p), Err(DataError::MissingFile(f)) if f.ends_with("labels.csv")));
    }
}
