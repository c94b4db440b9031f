use std::fs;
use std::path::Path;

use coldgraph::checkpoint::Checkpoint;
use coldgraph::config::ExperimentConfig;
use coldgraph::eval::Setting;
use coldgraph::experiment::*;
use coldgraph::Error;

fn config(dir: &Path, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.paths.output = dir.to_path_buf();
    cfg.train.epochs = epochs;
    cfg
}

#[test]
fn build_is_deterministic_and_reports_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&tmp.path().join("a"), 1);
    let out = cmd_build(&cfg).unwrap();
    assert_eq!((out.stats.users, out.stats.items), (300, 150));
    assert_eq!(out.stats.warm_items + out.stats.cold_items, 150);
    // Sparsity is printed with three decimals.
    let printed: DatasetStats = out.stats.to_string().parse().unwrap();
    assert!((printed.sparsity - out.stats.sparsity).abs() < 5e-4);
    assert_eq!(printed.to_string(), out.stats.to_string());
    assert_eq!(fs::read_to_string(out.dir.join(STATS_FILE)).unwrap(), out.stats.to_string());

    let first = fs::read(out.dir.join(SPLIT_FILE)).unwrap();
    let graphs = fs::read(out.dir.join(GRAPHS_FILE)).unwrap();
    cmd_build(&cfg).unwrap();
    assert_eq!(fs::read(out.dir.join(SPLIT_FILE)).unwrap(), first);
    assert_eq!(fs::read(out.dir.join(GRAPHS_FILE)).unwrap(), graphs);
}

#[test]
fn train_eval_export_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&tmp.path().join("run"), 3);
    let built = cmd_build(&cfg).unwrap();
    let trained = cmd_train(&cfg, None).unwrap();
    assert_eq!(trained.epochs, 3);
    let log = fs::read_to_string(built.dir.join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 4);

    let reports = cmd_eval(&cfg, None, &[Setting::Cold, Setting::Warm]).unwrap();
    let tags: Vec<&str> = reports.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(tags, ["cold", "warm", "hm"]);
    let text = fs::read_to_string(built.dir.join(METRICS_FILE)).unwrap();
    assert!(text.lines().any(|l| l.starts_with("hm\trecall@20\t")));
    assert!(built.dir.join(METRICS_TSV_FILE).exists());

    let path = cmd_export_embeddings(&cfg, None, None).unwrap();
    let first = fs::read(&path).unwrap();
    let arts = Artifacts::load(&cfg).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert_eq!(text.lines().count(), arts.items.len());
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields[0], arts.items.name(i));
        assert_eq!(fields[1], if arts.split.cold_items.contains(&i) { "cold" } else { "warm" });
        assert_eq!(fields.len(), 2 + cfg.train.d);
    }
    cmd_export_embeddings(&cfg, None, None).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);

    // Resuming after two epochs reproduces the third epoch of a straight run.
    let two = config(&tmp.path().join("two"), 2);
    cmd_build(&two).unwrap();
    let ck = cmd_train(&two, None).unwrap().checkpoint;
    let three = ExperimentConfig {
        train: cfg.train.clone(),
        ..two.clone()
    };
    cmd_train(&three, Some(&ck)).unwrap();
    let resumed = Checkpoint::load(&ck).unwrap().state.history;
    let straight = Checkpoint::load(&trained.checkpoint).unwrap().state.history;
    assert_eq!(resumed.len(), 3);
    for (a, b) in resumed.iter().zip(&straight) {
        assert_eq!((a.losses, a.val_recall, a.beta), (b.losses, b.val_recall, b.beta));
    }
}

#[test]
fn preflight_rejects_mismatched_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&tmp.path().join("run"), 1);
    assert!(matches!(cmd_train(&cfg, None), Err(Error::Config(_))));
    cmd_build(&cfg).unwrap();
    cmd_train(&cfg, None).unwrap();

    let mut k = cfg.clone();
    k.train.k_item = 7;
    assert!(matches!(cmd_train(&k, None), Err(Error::Config(_))));

    let mut d = cfg.clone();
    d.train.d = 32;
    d.train.d_know = 32;
    d.train.heads = 2;
    assert!(matches!(cmd_eval(&d, None, &[Setting::Warm]), Err(Error::Checkpoint(_))));
}

#[test]
fn noise_injection_rebuilds_graphs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(&tmp.path().join("run"), 1);
    let before = cmd_build(&cfg).unwrap().stats;
    assert!(cmd_inject_noise(&cfg).is_err());
    cfg.noise.mode = "discrepancy".into();
    cfg.noise.fraction = 0.2;
    let report = cmd_inject_noise(&cfg).unwrap();
    let after: DatasetStats = fs::read_to_string(output_dir(&cfg).join(STATS_FILE)).unwrap().parse().unwrap();
    assert_eq!(report.added, (0.2 * before.triplets as f64).round() as usize);
    assert_eq!(after.triplets, before.triplets + report.added);
    cmd_train(&cfg, None).unwrap();
}

#[test]
fn synthetic_files_round_trip_through_build() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&tmp.path().join("gen"), 1);
    let files = cmd_synth(&cfg).unwrap();
    let direct = cmd_build(&cfg).unwrap();

    let mut from_files = config(&tmp.path().join("files"), 1);
    from_files.paths.interactions = Some(files.interactions);
    from_files.paths.kg_entities = Some(files.kg_entities);
    from_files.paths.kg_triples = Some(files.kg_triples);
    for (m, p) in files.features {
        match m.as_str() {
            "text" => from_files.paths.text_features = Some(p),
            _ => from_files.paths.image_features = Some(p),
        }
    }
    let rebuilt = cmd_build(&from_files).unwrap();
    assert_eq!(rebuilt.stats.users, direct.stats.users);
    assert_eq!(rebuilt.stats.items, direct.stats.items);
    assert_eq!(rebuilt.stats.interactions, direct.stats.interactions);
    assert_eq!(rebuilt.stats.triplets, direct.stats.triplets);
}
