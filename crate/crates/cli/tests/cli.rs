use std::path::Path;
use std::process::{Command, Output};

use dmnil::datagen::{load_features, save_features};
use dmnil::encoder::{write_checkpoint, EncoderParams, Layer};
use dmnil::metrics::EvalReport;
use dmnil::{Matrix, View};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL: &str = r#"
[train]
epochs = 2
batch_size = 8
p_clusters = 4
z_instances = 2
iters_per_epoch = 4
replication = 5
k1 = 2
k2 = 4
eps = 0.1
hidden_dims = [12]
embed_dim = 6

[data.synthetic]
num_locations = 12
latent_dim = 4
input_dim = 8
drone_per_loc = 4
noise_std = 0.02
seed = 5
"#;

fn dmnil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmnil")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &TempDir) -> std::path::PathBuf {
    let p = dir.path().join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn train_small(dir: &TempDir, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let cfg = small_config(dir);
    let run = dir.path().join(name);
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&run)];
    args.extend_from_slice(extra);
    ok(&dmnil(&args));
    run
}

fn records(run: &Path) -> Vec<Value> {
    std::fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v.get("summary").is_none())
        .collect()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn generate_defaults_round_trip() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c");
    ok(&dmnil(&["generate", "--out", s(&out)]));
    let corpus = load_features(&out.join("drone.dmfv"), &out.join("satellite.dmfv")).unwrap();
    assert_eq!(corpus.num_drone(), 512);
    assert_eq!(corpus.num_satellite(), 64);
    assert_eq!(corpus.input_dim(), 32);
    assert!(corpus.ground_truth().is_some());
}

#[test]
fn generate_count_field_matches_arithmetic() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c");
    ok(&dmnil(&["generate", "--out", s(&out), "--locations", "64", "--drone-per-loc", "8"]));
    let bytes = std::fs::read(out.join("drone.dmfv")).unwrap();
    // 4-byte magic, u32 version, 1-byte view tag, then the count
    let count = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
    assert_eq!(count, 512);
}

#[test]
fn generate_is_reproducible_per_seed() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&dmnil(&["generate", "--out", s(&a), "--seed", "9", "--locations", "8"]));
    ok(&dmnil(&["generate", "--out", s(&b), "--seed", "9", "--locations", "8"]));
    ok(&dmnil(&["generate", "--out", s(&c), "--seed", "10", "--locations", "8"]));
    for f in ["drone.dmfv", "satellite.dmfv"] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)));
        assert_ne!(sha(&a.join(f)), sha(&c.join(f)));
    }
}

#[test]
fn zero_epochs_writes_manifest_and_empty_metrics() {
    let dir = TempDir::new().unwrap();
    let run = train_small(&dir, "run", &["--epochs", "0"]);
    assert!(run.join("manifest.json").exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn manifest_records_winning_layer_per_key() {
    let dir = TempDir::new().unwrap();
    let run = train_small(&dir, "run", &["--epochs", "0", "--set", "lr=0.01", "--locations", "10"]);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["epochs"], 0);
    assert_eq!(m["config"]["lr"], 0.01);
    assert_eq!(m["config"]["batch_size"], 8);
    assert_eq!(m["sources"]["epochs"], "flag");
    assert_eq!(m["sources"]["lr"], "flag");
    assert_eq!(m["sources"]["batch_size"], "file");
    assert_eq!(m["sources"]["alpha"], "default");
    assert_eq!(m["sources"]["data.synthetic.num_locations"], "flag");
    assert_eq!(m["sources"]["data.synthetic.latent_dim"], "file");
    assert_eq!(m["sources"]["data.synthetic.sat_per_loc"], "default");
    assert_eq!(m["corpus"]["kind"], "synthetic");
    assert_eq!(m["corpus"]["spec"]["num_locations"], 10);
}

#[test]
fn ablation_changes_enabled_components() {
    let dir = TempDir::new().unwrap();
    let base = train_small(&dir, "base", &["--ablation", "baseline"]);
    let full = train_small(&dir, "full", &["--ablation", "full"]);
    let (rb, rf) = (records(&base), records(&full));
    assert_eq!(rb.len(), 2);
    assert_eq!(rb[0]["components"], serde_json::json!({"dhml": false, "icel": false, "ple": false}));
    assert_eq!(rf[0]["components"], serde_json::json!({"dhml": true, "icel": true, "ple": true}));
    for r in rb.iter().chain(&rf) {
        assert!(r["loss_total"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn eval_reproduces_final_record_exactly() {
    let dir = TempDir::new().unwrap();
    let run = train_small(&dir, "run", &[]);
    ok(&dmnil(&["eval", "--run", s(&run)]));
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    let last: EvalReport = serde_json::from_value(records(&run).last().unwrap()["eval"].clone()).unwrap();
    assert_eq!(report, last);
}

#[test]
fn training_from_feature_files_matches_regenerated_corpus_layout() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&dmnil(&[
        "generate", "--out", s(&corpus), "--locations", "12", "--latent-dim", "4", "--input-dim", "8",
        "--drone-per-loc", "4", "--seed", "5",
    ]));
    let cfg = small_config(&dir);
    let run = dir.path().join("run");
    let out = dmnil(&[
        "train", "--config", s(&cfg), "--out", s(&run), "--drone", s(&corpus.join("drone.dmfv")),
        "--satellite", s(&corpus.join("satellite.dmfv")),
    ]);
    ok(&out);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["corpus"]["kind"], "files");
    assert_eq!(m["sources"]["data.drone"], "flag");
    assert_eq!(records(&run).len(), 2);
}

#[test]
fn corrupt_checkpoint_is_a_clean_data_error() {
    let dir = TempDir::new().unwrap();
    let run = train_small(&dir, "run", &["--epochs", "1"]);
    let ck = run.join("checkpoint.dmpw");
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&ck, bytes).unwrap();
    let out = dmnil(&["eval", "--run", s(&run)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn identity_encoder_on_separable_pair_is_perfect() {
    let dir = TempDir::new().unwrap();
    let drone = Matrix::from_rows(&[[1.0, 0.1], [1.0, -0.1], [0.1, 1.0], [-0.1, 1.0]]).unwrap();
    let sat = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let (dp, sp) = (dir.path().join("d.dmfv"), dir.path().join("s.dmfv"));
    save_features(&dp, View::Drone, &drone, Some(&[0, 0, 1, 1])).unwrap();
    save_features(&sp, View::Satellite, &sat, Some(&[0, 1])).unwrap();
    let identity = EncoderParams {
        layers: vec![Layer {
            weight: Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            bias: vec![0.0, 0.0],
        }],
    };
    let ck = dir.path().join("id.dmpw");
    write_checkpoint(&identity, std::fs::File::create(&ck).unwrap()).unwrap();
    let report_path = dir.path().join("eval.json");
    ok(&dmnil(&[
        "eval", "--checkpoint", s(&ck), "--drone", s(&dp), "--satellite", s(&sp), "--out", s(&report_path),
    ]));
    let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(r.drone_to_sat.r1, 1.0);
    assert_eq!(r.sat_to_drone.r1, 1.0);
}

#[test]
fn eval_rejects_dimension_mismatch() {
    let dir = TempDir::new().unwrap();
    let run = train_small(&dir, "run", &["--epochs", "1"]);
    let corpus = dir.path().join("other");
    ok(&dmnil(&["generate", "--out", s(&corpus), "--locations", "4", "--input-dim", "20"]));
    let out = dmnil(&[
        "eval", "--checkpoint", s(&run.join("checkpoint.dmpw")), "--drone", s(&corpus.join("drone.dmfv")),
        "--satellite", s(&corpus.join("satellite.dmfv")), "--out", s(&dir.path().join("e.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn diag_trace_and_histogram_conserve_counts() {
    let dir = TempDir::new().unwrap();
    let run = train_small(&dir, "run", &["--epochs", "3"]);
    ok(&dmnil(&["diag", "--run", s(&run), "--bins", "10"]));
    assert_eq!(csv_rows(&run.join("cluster_trace.csv")).len(), 3);
    let hist = csv_rows(&run.join("similarity_histogram.csv"));
    assert_eq!(hist.len(), 20);
    // 48 drone instances against 12 satellites
    for encoder in ["untrained", "trained"] {
        let total: u64 = hist
            .iter()
            .filter(|r| &r[0] == encoder)
            .map(|r| r[3].parse::<u64>().unwrap() + r[4].parse::<u64>().unwrap())
            .sum();
        assert_eq!(total, 48 * 12);
    }
}

#[test]
fn diag_separates_positive_pairs_on_noiseless_shared_corpus() {
    let dir = TempDir::new().unwrap();
    let run = train_small(&dir, "run", &["--shared-view-map", "--noise", "0", "--epochs", "2"]);
    ok(&dmnil(&["diag", "--run", s(&run)]));
    let stats: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("similarity_stats.json")).unwrap()).unwrap();
    let trained = stats.as_array().unwrap().iter().find(|s| s["encoder"] == "trained").unwrap();
    assert!(trained["positive_mean"].as_f64().unwrap() > trained["negative_mean"].as_f64().unwrap());
}

#[test]
fn diag_without_run_artifacts_fails() {
    let dir = TempDir::new().unwrap();
    let out = dmnil(&["diag", "--run", s(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn inconsistent_batch_is_rejected_before_training() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir);
    let run = dir.path().join("run");
    let out = dmnil(&["train", "--config", s(&cfg), "--out", s(&run), "--set", "batch_size=10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.join("manifest.json").exists());
}

#[test]
fn unknown_flags_and_keys_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    assert_eq!(dmnil(&["train", "--out", s(&run), "--bogus", "1"]).status.code(), Some(2));
    assert_eq!(dmnil(&["train", "--out", s(&run), "--set", "bogus=1"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    assert_eq!(dmnil(&["train", "--out", s(&run), "--config", s(&cfg)]).status.code(), Some(2));
    std::fs::write(&cfg, "[extra]\nx = 1\n").unwrap();
    assert_eq!(dmnil(&["train", "--out", s(&run), "--config", s(&cfg)]).status.code(), Some(2));
    assert_eq!(dmnil(&["train", "--out", s(&run), "--ablation", "most"]).status.code(), Some(2));
}
