use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use taxolink::checkpoint::Checkpoint;
use taxolink::config::Manifest;
use taxolink::encoders::{encode_scope_note, EmbeddingTable};
use taxolink::taxonomy::Taxonomy;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic").join(name)
}

fn taxolink(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taxolink"))
        .arg("--config")
        .arg(fixture("config.toml"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("TAXOLINK_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn validate_prints_counts() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&taxolink(&["validate"], dir.path()));
    assert!(stdout.contains("train.abstracts\t20"), "{stdout}");
    assert!(stdout.contains("taxonomy.concepts\t10"), "{stdout}");
    let m = Manifest::load(dir.path().join("validate.manifest.toml")).unwrap();
    assert_eq!(m.counts["train.mentions"], 56);
    assert_eq!(m.counts["train.warnings"], 0);
}

#[test]
fn zero_epoch_type2_keeps_scope_note_initialization() {
    let dir = tempfile::tempdir().unwrap();
    ok(&taxolink(&["train-el", "--node-source", "type2", "--epochs", "0"], dir.path()));
    let ck = Checkpoint::load(dir.path().join("model.json")).unwrap();
    let nodes = ck.get("node_matrix").unwrap();
    let tax = Taxonomy::load(fixture("taxonomy.jsonl")).unwrap();
    let table = EmbeddingTable::load(fixture("embeddings.txt")).unwrap();
    for i in 0..tax.len() {
        assert_eq!(nodes.row(i), encode_scope_note(&table, &tax.node(i).scope_note).as_slice());
    }
    let m = Manifest::load(dir.path().join("train-el.manifest.toml")).unwrap();
    assert_eq!(m.config.linker.epochs, 0);
    assert_eq!(m.config.node2vec.epochs, 0);
}

#[test]
fn evaluate_after_train_ner_memorizes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&taxolink(&["train-ner"], dir.path()));
    let eval_dir = dir.path().join("eval");
    let model = dir.path().join("model.json");
    ok(&taxolink(&["evaluate", "--model", model.to_str().unwrap()], &eval_dir));
    let m = Manifest::load(eval_dir.join("evaluate.manifest.toml")).unwrap();
    assert!(m.metrics["eval.train.F1"] >= 0.95, "{:?}", m.metrics);
    assert!(eval_dir.join("eval.train.txt").is_file());
}

#[test]
fn predict_writes_mentions_and_links() {
    let dir = tempfile::tempdir().unwrap();
    ok(&taxolink(&["train-mtl", "--epochs", "40"], dir.path()));
    let model = dir.path().join("model.json");
    ok(&taxolink(&["predict", "--model", model.to_str().unwrap(), "--split", "train"], dir.path()));
    let mentions = fs::read_to_string(dir.path().join("predict.train.mentions.tsv")).unwrap();
    let links = fs::read_to_string(dir.path().join("predict.train.links.tsv")).unwrap();
    assert_eq!(mentions.lines().count(), links.lines().count());
    let first: Vec<&str> = mentions.lines().next().unwrap().split('\t').collect();
    assert_eq!(first.len(), 6);
    assert_eq!(first[4], "Disease");
}

#[test]
fn manifest_rerun_reproduces_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&taxolink(&["train-el", "--node-source", "type1", "--epochs", "20"], a.path()));
    let out = Command::new(env!("CARGO_BIN_EXE_taxolink"))
        .arg("--config")
        .arg(a.path().join("train-el.manifest.toml"))
        .arg("--out")
        .arg(b.path())
        .arg("train-el")
        .output()
        .unwrap();
    ok(&out);
    for f in ["model.json", "train.txt", "train.kv", "history.tsv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = taxolink(&["validate", "--set", "ner.hiden=3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = taxolink(&["validate", "--set", "paths.train=/nonexistent/train.txt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.train"));
    let out = taxolink(&["train-el", "--node-source", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = taxolink(&["no-such-command"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = taxolink(&["train-ner", "--epochs", "3", "--set", "ner.lr=1e300"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_path_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_taxolink"))
        .env("TAXOLINK_CONFIG", fixture("config.toml"))
        .arg("--out")
        .arg(dir.path())
        .arg("validate")
        .output()
        .unwrap();
    ok(&out);
}
