use pimpc_core::config::ExperimentConfig;
use pimpc_core::data::{generate_sbm, load_dataset, write_dataset, SbmSpec};
use pimpc_core::model::{Components, GraphContext, Model};
use pimpc_core::phases::sync::SyncConfig;
use pimpc_core::phases::thermo::ThermoConfig;
use pimpc_core::runner::{evaluate_checkpoint, resolve_split, run, write_run, SplitPart, CHECKPOINT_FILE};
use pimpc_core::tensor::Tape;
use pimpc_core::training::predict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec() -> SbmSpec {
    SbmSpec {
        class_sizes: vec![40, 30, 20],
        p_within: 0.15,
        p_between: 0.01,
        feature_dim: 6,
        separation: 2.0,
        noise: 0.5,
        seed: 5,
        name: "it".into(),
    }
}

fn quick() -> ExperimentConfig {
    ExperimentConfig {
        hidden_dim: 12,
        epochs: 30,
        lr: 0.01,
        heat: ThermoConfig { steps: 5, ..Default::default() },
        sync: SyncConfig { steps: 5, ..Default::default() },
        imbalance_ratio: 4.0,
        train_fraction: 0.3,
        ..ExperimentConfig::default()
    }
}

#[test]
fn generate_store_train_reload() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    write_dataset(&data_dir, &generate_sbm(&spec()).unwrap(), None).unwrap();
    let loaded = load_dataset(&data_dir).unwrap();
    let ds = loaded.dataset;
    assert_eq!((ds.num_nodes(), ds.feature_dim(), ds.num_classes), (90, 6, 3));

    let cfg = quick();
    let split = resolve_split(&ds, loaded.split.as_ref(), &cfg).unwrap();
    let result = run(&ds, &split, &cfg).unwrap();
    assert!(result.train.epochs_run >= 1);
    let acc = result.test.balanced_accuracy.unwrap();
    assert!(acc > 1.0 / 3.0, "well separated data should beat chance, got {acc}");

    let run_dir = dir.path().join("run");
    write_run(&run_dir, &result, &ds).unwrap();
    let again = evaluate_checkpoint(&ds, &split, &cfg, &run_dir.join(CHECKPOINT_FILE), SplitPart::Test).unwrap();
    assert_eq!(again, result.test);
}

#[test]
fn dropping_a_phase_renormalizes_the_ensemble() {
    let ds = generate_sbm(&spec()).unwrap();
    for drop in ["thermo", "sync", "spectral"] {
        let cfg = ExperimentConfig { components: Components::default().without(drop).unwrap(), ..quick() };
        let mc = cfg.model(ds.feature_dim(), ds.num_classes);
        let ctx = GraphContext::new(&ds.graph, ds.features.clone(), &mc).unwrap();
        let model = Model::new(mc, ds.num_nodes(), 3).unwrap();
        assert_eq!(model.phases().len(), 2);
        let tape = Tape::new();
        let ps = model.registry.bind(&tape);
        let out = model.forward(&ps, &ctx, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = out.consensus.weights.value();
        assert_eq!(w.cols(), 2);
        for i in 0..w.rows() {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(model.registry.names().all(|n| !n.contains(drop)), "{drop} parameters remain");
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let ds = generate_sbm(&spec()).unwrap();
    let cfg = ExperimentConfig { epochs: 8, ..quick() };
    let split = resolve_split(&ds, None, &cfg).unwrap();
    let a = run(&ds, &split, &cfg).unwrap();
    let b = run(&ds, &split, &cfg).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    let other = run(&ds, &split, &ExperimentConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.train.history, other.train.history);
}

#[test]
fn reject_option_only_removes_predictions() {
    let ds = generate_sbm(&spec()).unwrap();
    let cfg = ExperimentConfig { epochs: 10, ..quick() };
    let split = resolve_split(&ds, None, &cfg).unwrap();
    let r = run(&ds, &split, &cfg).unwrap();
    let mc = cfg.model(ds.feature_dim(), ds.num_classes);
    let ctx = GraphContext::new(&ds.graph, ds.features.clone(), &mc).unwrap();
    let (_, plain) = predict(&r.model, &ctx, false).unwrap();
    let (_, guarded) = predict(&r.model, &ctx, true).unwrap();
    for (p, g) in plain.iter().zip(&guarded) {
        assert!(g == p || g.class().is_none());
    }
}
