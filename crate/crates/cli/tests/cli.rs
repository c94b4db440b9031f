use std::path::Path;
use std::process::{Command, Output};

fn coldgraph(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coldgraph"))
        .args(args)
        .env("COLDGRAPH_OUT", root)
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn build_train_eval_export() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(root.join("exp.toml"), "[paths]\noutput = \"exp\"\n\n[train]\nepochs = 2\n").unwrap();
    let cfg = ["--config", "exp.toml"];

    let stats = stdout(&coldgraph(root, &[&["build"], &cfg[..]].concat()));
    for key in ["users", "items", "warm_items", "cold_items", "interactions", "sparsity", "entities", "relations", "triplets"] {
        assert!(stats.lines().any(|l| l.starts_with(&format!("{key}\t"))), "missing {key}");
    }
    assert!(root.join("exp/graphs.bin").exists());

    let train = stdout(&coldgraph(root, &[&["train"], &cfg[..]].concat()));
    assert!(train.contains("epochs\t2"));

    let eval = stdout(&coldgraph(root, &[&["eval", "--setting", "cold", "--setting", "warm"], &cfg[..]].concat()));
    assert!(eval.lines().any(|l| l.starts_with("cold\trecall@20\t")));
    assert!(eval.lines().any(|l| l.starts_with("hm\tndcg@20\t")));
    assert!(!eval.contains("normal_cold"));

    let all = stdout(&coldgraph(root, &[&["eval"], &cfg[..]].concat()));
    assert!(all.contains("normal_cold\trecall@20\t"));

    let path = stdout(&coldgraph(root, &[&["export-embeddings"], &cfg[..]].concat()));
    let rows = std::fs::read_to_string(path.trim()).unwrap().lines().count();
    assert_eq!(rows, 150);
}

#[test]
fn rejects_bad_arguments() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let bad = coldgraph(root, &["build", "--ablate", "ba,ka,ma_text,ma_image"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));
    assert!(!coldgraph(root, &["eval", "--setting", "lukewarm"]).status.success());
    assert!(!coldgraph(root, &["train"]).status.success());
    assert!(!coldgraph(root, &["build", "--config", "missing.toml"]).status.success());
}

#[test]
fn seed_flag_changes_the_split() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(root.join("a.toml"), "[paths]\noutput = \"a\"\n").unwrap();
    std::fs::write(root.join("b.toml"), "[paths]\noutput = \"b\"\n").unwrap();
    std::fs::write(root.join("c.toml"), "[paths]\noutput = \"c\"\n").unwrap();
    stdout(&coldgraph(root, &["build", "--config", "a.toml", "--seed", "5"]));
    stdout(&coldgraph(root, &["build", "--config", "b.toml", "--seed", "5"]));
    stdout(&coldgraph(root, &["build", "--config", "c.toml", "--seed", "6"]));
    let read = |d: &str| std::fs::read(root.join(d).join("split.txt")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn synth_then_inject_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = stdout(&coldgraph(root, &["synth"]));
    assert!(out.contains("kg_triples\t"));
    stdout(&coldgraph(root, &["build"]));
    std::fs::write(root.join("noise.toml"), "[noise]\nmode = \"outlier\"\nfraction = 0.1\n").unwrap();
    let noise = stdout(&coldgraph(root, &["inject-noise", "--config", "noise.toml"]));
    assert!(noise.contains("mode\toutlier"));
}
