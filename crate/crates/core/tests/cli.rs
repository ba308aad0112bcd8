use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_hypertopic");

/// Small enough for a few seconds per epoch.
const TINY: [&str; 8] = [
    "--set",
    "model.dim=7",
    "--set",
    "model.layers=2",
    "--set",
    "model.heads=2",
    "--set",
    "optim.epochs=2",
];

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("HYPERTOPIC_OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn train(dir: &Path, out_dir: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--docs",
        "data/docs.tsv",
        "--edges",
        "data/edges.txt",
        "--output-dir",
        out_dir,
    ];
    args.extend(TINY);
    args.extend(extra);
    run(&args, dir)
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn train_eval_infer_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&run(&["synth", "--output-dir", "data"], dir));
    ok(&train(dir, "run", &[]));

    for f in [
        "config.json",
        "split.json",
        "epochs.jsonl",
        "tree_changes.jsonl",
        "checkpoint.json",
    ] {
        assert!(dir.join("run").join(f).is_file(), "missing {f}");
    }
    let cfg: Value = serde_json::from_str(&read(dir.join("run/config.json"))).unwrap();
    assert_eq!(cfg["model"]["dim"], 7);
    assert_eq!(cfg["loss"]["tau"], 10.0);
    let epochs = read(dir.join("run/epochs.jsonl"));
    assert_eq!(epochs.lines().count(), 2);
    for line in epochs.lines() {
        let e: Value = serde_json::from_str(line).unwrap();
        assert!(e["total_loss"].as_f64().unwrap().is_finite());
    }

    // Same seed, same epoch log.
    ok(&train(dir, "rerun", &[]));
    assert_eq!(epochs, read(dir.join("rerun/epochs.jsonl")));

    // Eval is deterministic and reports bounded metrics.
    let first = ok(&run(&["eval", "--checkpoint", "run/checkpoint.json"], dir));
    let report1 = read(dir.join("run/eval/report.json"));
    let second = ok(&run(&["eval", "--checkpoint", "run/checkpoint.json"], dir));
    assert_eq!(first, second);
    assert_eq!(report1, read(dir.join("run/eval/report.json")));
    let report: Value = serde_json::from_str(&report1).unwrap();
    for key in ["micro_f1", "macro_f1", "link_auc"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!((-1.0..=1.0).contains(&report["npmi"].as_f64().unwrap()));
    assert!(report["perplexity_exponent"].as_f64().unwrap() > 0.0);
    assert!(dir.join("run/eval/config.json").is_file());

    // Inference: one row per input document, theta on the simplex, empty
    // documents still embedded.
    fs::write(
        dir.join("new.tsv"),
        "a\talpha0w03 alphacore1 common1\nb\t\nc\tbeta1w00 beta1w01 unknownword\n",
    )
    .unwrap();
    ok(&run(
        &["infer", "--checkpoint", "run/checkpoint.json", "--docs", "new.tsv"],
        dir,
    ));
    let rows: Vec<Value> = read(dir.join("run/infer/documents.jsonl"))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1]["id"], "b");
    for r in &rows {
        let theta: f64 = r["theta"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((theta - 1.0).abs() < 1e-8);
        assert_eq!(r["d"].as_array().unwrap().len(), 8);
    }

    // Tree export: every topic once, top-4 words, children consistent.
    let tree: Value =
        serde_json::from_str(&ok(&run(&["export-tree", "--checkpoint", "run/checkpoint.json"], dir))).unwrap();
    let nodes = tree["nodes"].as_array().unwrap();
    let ck: Value = serde_json::from_str(&read(dir.join("run/checkpoint.json"))).unwrap();
    assert_eq!(nodes.len(), ck["tree"]["nodes"].as_object().map_or(0, |m| m.len()));
    for n in nodes {
        assert_eq!(n["words"].as_array().unwrap().len(), 4);
        for c in n["children"].as_array().unwrap() {
            let child = nodes.iter().find(|m| m["id"] == *c).expect("child exported");
            assert_eq!(child["parent"], n["id"]);
        }
    }
    assert_eq!(nodes[0]["parent"], Value::Null);
    let saved: Value = serde_json::from_str(&read(dir.join("run/tree/tree.json"))).unwrap();
    assert_eq!(saved, tree);
}

#[test]
fn ablation_and_supervised_flags_reach_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&run(&["synth", "--output-dir", "data"], dir));
    ok(&train(
        dir,
        "abl",
        &[
            "--flat-tree",
            "--euclidean",
            "--no-graph-injection",
            "--supervised",
            "--set",
            "optim.epochs=1",
        ],
    ));
    let cfg: Value = serde_json::from_str(&read(dir.join("abl/config.json"))).unwrap();
    assert_eq!(cfg["ablation"]["flat_tree"], true);
    assert_eq!(cfg["ablation"]["euclidean"], true);
    assert_eq!(cfg["ablation"]["no_graph_injection"], true);
    assert_eq!(cfg["ablation"]["fixed_tree"], false);
    assert_eq!(cfg["loss"]["supervised"], true);
    let epoch: Value = serde_json::from_str(read(dir.join("abl/epochs.jsonl")).lines().next().unwrap()).unwrap();
    assert!(epoch["sup_loss"].as_f64().unwrap() > 0.0);
}

#[test]
fn output_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["synth", "--kind", "ds", "--seed", "3"])
        .current_dir(tmp.path())
        .env("HYPERTOPIC_OUTPUT_DIR", "envdir")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(read(tmp.path().join("envdir/docs.tsv")).lines().count(), 1703);
    assert_eq!(read(tmp.path().join("envdir/edges.txt")).lines().count(), 3234);
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&run(&["synth", "--output-dir", "data"], dir));
    fs::write(
        dir.join("run.cfg"),
        "# tiny run\npaths.docs = data/docs.tsv\npaths.edges = data/edges.txt\nmodel.dim = 5\nmodel.layers = 2\noptim.epochs = 1\n",
    )
    .unwrap();
    ok(&run(
        &[
            "train",
            "--config",
            "run.cfg",
            "--output-dir",
            "cfgrun",
            "--set",
            "model.heads=3",
        ],
        dir,
    ));
    let cfg: Value = serde_json::from_str(&read(dir.join("cfgrun/config.json"))).unwrap();
    assert_eq!(cfg["model"]["dim"], 5);
    assert_eq!(cfg["model"]["heads"], 3);
    assert_eq!(cfg["optim"]["epochs"], 1);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let code = |args: &[&str]| run(args, dir).status.code();

    // Configuration errors.
    assert_eq!(code(&["train", "--docs", "x.tsv", "--set", "model.levels=1"]), Some(2));
    assert_eq!(code(&["train", "--docs", "x.tsv", "--set", "model.bogus=1"]), Some(2));
    assert_eq!(code(&["train"]), Some(2));
    fs::write(dir.join("bad.cfg"), "this is not a setting\n").unwrap();
    assert_eq!(code(&["train", "--config", "bad.cfg"]), Some(2));

    // Data errors.
    assert_eq!(code(&["train", "--docs", "missing.tsv"]), Some(3));
    fs::write(dir.join("docs.tsv"), "a\tone two\nb\ttwo three\n").unwrap();
    fs::write(dir.join("edges.txt"), "a zzz\n").unwrap();
    assert_eq!(code(&["train", "--docs", "docs.tsv", "--edges", "edges.txt"]), Some(3));
    fs::write(dir.join("junk.json"), "{}").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "junk.json"]), Some(3));
    assert_eq!(code(&["eval", "--checkpoint", "nothing.json"]), Some(3));

    // Divergence: a non-finite loss stops training but keeps the epoch log.
    ok(&run(&["synth", "--output-dir", "data"], dir));
    let out = train(dir, "diverged", &["--set", "optim.lr=1e300"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(dir.join("diverged/epochs.jsonl").is_file());
}
