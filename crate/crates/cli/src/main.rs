use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pimpc_core::config::{ConfigError, ExperimentConfig};
use pimpc_core::data::{generate_sbm, load_dataset, write_dataset, DataError, Loaded, SbmSpec, Split};
use pimpc_core::metrics::{write_metrics_json, write_per_class_csv, MetricsError};
use pimpc_core::model::Components;
use pimpc_core::phases::thermo::Integrator;
use pimpc_core::runner::{
    evaluate_checkpoint, resolve_split, run, summarize, sweep, write_csv, write_run, RunError, SplitPart, SweepPoint,
    RESOLVED_CONFIG_FILE,
};
use pimpc_core::tensor::primitive_gradchecks;
use pimpc_core::training::end_to_end_gradcheck;
use pimpc_core::verify::{run_suite, SuiteOptions, VerifyError};

const EXIT_USAGE: u8 = 1;
const EXIT_CHECK: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "pimpc", version, about = "Physics-informed multi-phase consensus GNN for imbalanced node classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic block-model dataset directory.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the size and class balance of a dataset directory as JSON.
    Inspect {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one model and write the run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. `--set heat.steps=10`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a saved checkpoint on one part of the split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: PartArg,
        /// Defaults to config-resolved.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to split.json beside the checkpoint.
        #[arg(long)]
        split_file: Option<PathBuf>,
        /// Defaults to eval-<split>/ beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the theory checks; exits 2 if any fails.
    Verify {
        /// Comma-separated subset of checks.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        #[arg(long, default_value = "verify_report.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks of every primitive and the full model.
    Gradcheck {
        #[arg(long, value_enum, default_value = "small")]
        scale: Scale,
    },
    /// One run per setting per seed, with aggregated CSV output.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=v1,v2,...`, or `k1,k2=a:b,c:d` for paired values. Bare
        /// `lambda_class,lambda_physics` uses a standard loss-weight grid.
        #[arg(long, conflicts_with = "ablate")]
        vary: Option<String>,
        /// `phase=thermo|sync|spectral|fusion|adaptive` (any subset, `|` or `,` separated).
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PartArg {
    Train,
    Val,
    Test,
}

impl PartArg {
    fn part(self) -> SplitPart {
        match self {
            PartArg::Train => SplitPart::Train,
            PartArg::Val => SplitPart::Val,
            PartArg::Test => SplitPart::Test,
        }
    }

    fn name(self) -> &'static str {
        match self {
            PartArg::Train => "train",
            PartArg::Val => "val",
            PartArg::Test => "test",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    Small,
    Full,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, error: e.into() }
    }

    fn check(msg: impl Display) -> Self {
        Self { code: EXIT_CHECK, error: anyhow!("{msg}") }
    }

    fn io(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_IO, error: e.into() }
    }
}

fn data_failure(e: DataError) -> Failure {
    match e {
        DataError::Io { .. } | DataError::MissingFile(_) => Failure::io(e),
        _ => Failure::usage(e),
    }
}

fn config_failure(e: ConfigError) -> Failure {
    match e {
        ConfigError::Io { .. } => Failure::io(e),
        _ => Failure::usage(e),
    }
}

fn run_failure(e: RunError) -> Failure {
    if e.is_io() {
        Failure::io(e)
    } else {
        Failure::usage(e)
    }
}

fn metrics_failure(e: MetricsError) -> Failure {
    Failure::io(e)
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate { spec, out } => generate(&spec, &out),
        Command::Inspect { data } => inspect(&data),
        Command::Train { data, config, out, set } => train(&data, config.as_deref(), &out, &set),
        Command::Eval { data, checkpoint, split, config, split_file, out } => {
            eval(&data, &checkpoint, split, config.as_deref(), split_file.as_deref(), out.as_deref())
        }
        Command::Verify { only, out, seed } => verify(&only, &out, seed),
        Command::Gradcheck { scale } => gradcheck(scale),
        Command::Sweep { data, config, vary, ablate, seeds, jobs, out } => {
            sweep_cmd(&data, config.as_deref(), vary.as_deref(), ablate.as_deref(), &seeds, jobs, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).with_context(|| path.display().to_string()).map_err(Failure::io)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).map_err(config_failure)?,
        None => ExperimentConfig::default(),
    };
    for item in overrides {
        let (k, v) = item.split_once('=').ok_or_else(|| Failure::usage(anyhow!("--set expects KEY=VALUE, got `{item}`")))?;
        cfg = cfg.with_override(k, v).map_err(config_failure)?;
    }
    Ok(cfg)
}

fn load(data: &Path) -> Result<Loaded, Failure> {
    load_dataset(data).map_err(data_failure)
}

fn generate(spec: &Path, out: &Path) -> Outcome {
    let text = std::fs::read_to_string(spec).with_context(|| spec.display().to_string()).map_err(Failure::io)?;
    let spec: SbmSpec =
        serde_json::from_str(&text).with_context(|| format!("{}: invalid block-model spec", spec.display())).map_err(Failure::usage)?;
    let ds = generate_sbm(&spec).map_err(data_failure)?;
    write_dataset(out, &ds, None).map_err(data_failure)?;
    println!(
        "wrote {} ({} nodes, {} edges, {} features, {} classes)",
        out.display(),
        ds.num_nodes(),
        ds.graph.num_edges(),
        ds.feature_dim(),
        ds.num_classes
    );
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    name: String,
    nodes: usize,
    edges: usize,
    features: usize,
    classes: usize,
    class_counts: Vec<usize>,
    self_loops_dropped: usize,
    duplicate_edges_dropped: usize,
    has_split: bool,
}

fn inspect(data: &Path) -> Outcome {
    let loaded = load(data)?;
    let ds = &loaded.dataset;
    let s = Summary {
        name: ds.name.clone(),
        nodes: ds.num_nodes(),
        edges: ds.graph.num_edges(),
        features: ds.feature_dim(),
        classes: ds.num_classes,
        class_counts: ds.class_counts(),
        self_loops_dropped: loaded.edge_report.self_loops,
        duplicate_edges_dropped: loaded.edge_report.duplicates,
        has_split: loaded.split.is_some(),
    };
    println!("{}", serde_json::to_string_pretty(&s).expect("serializable"));
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path, overrides: &[String]) -> Outcome {
    let cfg = load_config(config, overrides)?;
    let loaded = load(data)?;
    let split = resolve_split(&loaded.dataset, loaded.split.as_ref(), &cfg).map_err(run_failure)?;
    let result = run(&loaded.dataset, &split, &cfg).map_err(run_failure)?;
    write_run(out, &result, &loaded.dataset).map_err(run_failure)?;
    for w in &result.train.warnings {
        eprintln!("warning: {w}");
    }
    let t = &result.test;
    println!(
        "epochs {} (best {}), val bAcc {:.4}; test acc {} bAcc {} macro-F1 {} minority recall {}",
        result.train.epochs_run,
        result.train.best_epoch,
        result.train.best_val_bacc,
        fmt(t.accuracy),
        fmt(t.balanced_accuracy),
        fmt(t.macro_f1),
        fmt(t.minority_recall)
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn beside(file: &Path, name: &str) -> PathBuf {
    file.parent().unwrap_or(Path::new(".")).join(name)
}

fn eval(
    data: &Path,
    checkpoint: &Path,
    part: PartArg,
    config: Option<&Path>,
    split_file: Option<&Path>,
    out: Option<&Path>,
) -> Outcome {
    let config_path = config.map(Path::to_path_buf).unwrap_or_else(|| beside(checkpoint, RESOLVED_CONFIG_FILE));
    let cfg = ExperimentConfig::load(&config_path).map_err(config_failure)?;
    let loaded = load(data)?;
    let split_path = split_file.map(Path::to_path_buf).unwrap_or_else(|| beside(checkpoint, "split.json"));
    let split: Split = if split_path.exists() {
        let text = std::fs::read_to_string(&split_path).with_context(|| split_path.display().to_string()).map_err(Failure::io)?;
        serde_json::from_str(&text).with_context(|| format!("{}: invalid split", split_path.display())).map_err(Failure::usage)?
    } else {
        resolve_split(&loaded.dataset, loaded.split.as_ref(), &cfg).map_err(run_failure)?
    };
    let report = evaluate_checkpoint(&loaded.dataset, &split, &cfg, checkpoint, part.part()).map_err(run_failure)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| beside(checkpoint, &format!("eval-{}", part.name())));
    std::fs::create_dir_all(&out).with_context(|| out.display().to_string()).map_err(Failure::io)?;
    write_metrics_json(&out.join("metrics.json"), &report).map_err(metrics_failure)?;
    let counts = split.train_counts(&loaded.dataset.labels, loaded.dataset.num_classes);
    write_per_class_csv(&out.join("per_class.csv"), &report, &counts).map_err(metrics_failure)?;
    println!(
        "{} split: acc {} bAcc {} macro-F1 {} minority recall {} coverage {:.4}",
        part.name(),
        fmt(report.accuracy),
        fmt(report.balanced_accuracy),
        fmt(report.macro_f1),
        fmt(report.minority_recall),
        report.coverage
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn verify(only: &[String], out: &Path, seed: u64) -> Outcome {
    let opts = SuiteOptions { seed, timing_csv: Some(beside(out, "scaling.csv")), ..SuiteOptions::default() };
    let report = run_suite(only, &opts).map_err(|e| match e {
        VerifyError::Io { .. } => Failure::io(e),
        VerifyError::UnknownCheck(_) => Failure::usage(e),
        VerifyError::Internal(_) => Failure::check(e),
    })?;
    for c in &report.checks {
        println!(
            "{:<9} {:?}  predicted {:.6e}  measured {:.6e}  tolerance {:.1e}  ({} trials, {:.2}s)",
            c.name,
            c.verdict,
            c.predicted,
            c.measured,
            c.tolerance,
            c.trials.len(),
            c.seconds
        );
    }
    report.write_json(out).map_err(Failure::io)?;
    println!("wrote {}", out.display());
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
        Err(Failure::check(format!("failed checks: {}", failed.join(", "))))
    }
}

fn gradcheck(scale: Scale) -> Outcome {
    let (draws, nodes) = if scale == Scale::Small { (20, 10) } else { (100, 16) };
    let mut breaches = Vec::new();
    for (name, worst) in primitive_gradchecks(draws, 2024) {
        let ok = worst < 1e-6;
        println!("primitive {name:<14} {worst:.3e} {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            breaches.push(name.to_string());
        }
    }
    let full = Components::default();
    let mut blocks: Vec<(String, Components, Integrator)> = vec![("full model".into(), full, Integrator::ExplicitEuler)];
    for phase in ["thermo", "sync", "spectral"] {
        let only = Components {
            thermo: phase == "thermo",
            sync: phase == "sync",
            spectral: phase == "spectral",
            ..full
        };
        blocks.push((format!("{phase} branch"), only, Integrator::ExplicitEuler));
    }
    blocks.push(("no fusion".into(), Components { fusion: false, ..full }, Integrator::ExplicitEuler));
    blocks.push(("no adaptive".into(), Components { adaptive: false, ..full }, Integrator::ExplicitEuler));
    if scale == Scale::Full {
        blocks.push(("implicit heat".into(), full, Integrator::ImplicitEulerCg));
    }
    for (name, comps, integrator) in blocks {
        let err = end_to_end_gradcheck(nodes, comps, integrator, 2).map_err(Failure::check)?;
        let ok = err < 1e-4;
        println!("end-to-end {name:<13} {err:.3e} {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            breaches.push(name);
        }
    }
    if breaches.is_empty() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(Failure::check(format!("tolerance exceeded: {}", breaches.join(", "))))
    }
}

const LOSS_WEIGHT_GRID: [(f64, f64); 9] =
    [(1.0, 1.0), (2.0, 0.5), (0.5, 2.0), (1.0, 0.0), (0.0, 1.0), (1.2, 1.2), (0.8, 0.8), (3.0, 0.3), (0.3, 3.0)];

fn vary_points(base: &ExperimentConfig, spec: &str) -> Result<Vec<SweepPoint>, Failure> {
    let (keys, values) = match spec.split_once('=') {
        Some((k, v)) => (k, Some(v)),
        None => (spec, None),
    };
    let keys: Vec<&str> = keys.split(',').map(str::trim).collect();
    let rows: Vec<Vec<String>> = match (keys.as_slice(), values) {
        (_, Some(v)) => v.split(',').map(|item| item.split(':').map(|s| s.trim().to_string()).collect()).collect(),
        (["lambda_class", "lambda_physics"], None) => {
            LOSS_WEIGHT_GRID.iter().map(|(a, b)| vec![a.to_string(), b.to_string()]).collect()
        }
        _ => return Err(Failure::usage(anyhow!("--vary expects KEY=V1,V2,... or K1,K2=A:B,C:D"))),
    };
    rows.into_iter()
        .map(|vals| {
            if vals.len() != keys.len() {
                return Err(Failure::usage(anyhow!("--vary: {} keys but values {:?}", keys.len(), vals)));
            }
            let mut cfg = base.clone();
            let mut label = Vec::new();
            for (k, v) in keys.iter().zip(&vals) {
                cfg = cfg.with_override(k, v).map_err(config_failure)?;
                label.push(format!("{k}={v}"));
            }
            Ok(SweepPoint { setting: label.join(" "), config: cfg })
        })
        .collect()
}

fn ablate_points(base: &ExperimentConfig, spec: &str) -> Result<Vec<SweepPoint>, Failure> {
    let list = spec.strip_prefix("phase=").ok_or_else(|| Failure::usage(anyhow!("--ablate expects phase=NAME[|NAME...]")))?;
    let mut points = vec![SweepPoint { setting: "full".into(), config: base.clone() }];
    for name in list.split(['|', ',']).map(str::trim).filter(|s| !s.is_empty()) {
        let comps = base
            .components
            .without(name)
            .ok_or_else(|| Failure::usage(anyhow!("cannot ablate `{name}`; choose from {:?}", Components::NAMES)))?;
        if comps.phases().is_empty() {
            return Err(Failure::usage(anyhow!("removing `{name}` leaves no phase")));
        }
        points.push(SweepPoint { setting: format!("without {name}"), config: ExperimentConfig { components: comps, ..base.clone() } });
    }
    Ok(points)
}

fn sweep_cmd(
    data: &Path,
    config: Option<&Path>,
    vary: Option<&str>,
    ablate: Option<&str>,
    seeds: &[u64],
    jobs: usize,
    out: &Path,
) -> Outcome {
    let base = load_config(config, &[])?;
    let points = match (vary, ablate) {
        (Some(v), None) => vary_points(&base, v)?,
        (None, Some(a)) => ablate_points(&base, a)?,
        _ => return Err(Failure::usage(anyhow!("give exactly one of --vary or --ablate"))),
    };
    if seeds.is_empty() {
        return Err(Failure::usage(anyhow!("--seeds must not be empty")));
    }
    let loaded = load(data)?;
    let rows = sweep(&loaded.dataset, loaded.split.as_ref(), &points, seeds, jobs.max(1)).map_err(run_failure)?;
    let summary = summarize(&rows);
    std::fs::create_dir_all(out).with_context(|| out.display().to_string()).map_err(Failure::io)?;
    write_csv(&out.join("runs.csv"), &rows).map_err(run_failure)?;
    write_csv(&out.join("summary.csv"), &summary).map_err(run_failure)?;
    write_json(&out.join("base-config.json"), &base)?;
    println!("{:<36} {:>15} {:>15} {:>15}", "setting", "bAcc", "macro-F1", "minority recall");
    for s in &summary {
        println!(
            "{:<36} {:>7.4}±{:<7.4} {:>7.4}±{:<7.4} {:>7.4}±{:<7.4}",
            s.setting, s.bacc_mean, s.bacc_std, s.f1_mean, s.f1_std, s.minority_recall_mean, s.minority_recall_std
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
