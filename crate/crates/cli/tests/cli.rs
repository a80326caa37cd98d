//! End-to-end tests driving the compiled `xmcl` binary through temp
//! directories: every verb, file layout, and the grid's exit-code contract.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn xmcl(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmcl"))
        .args(args)
        .output()
        .expect("spawn xmcl")
}

fn ok_stdout(out: Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn strings(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn data_flags(dir: &Path) -> Vec<String> {
    strings(&[
        "--images",
        &p(&dir.join("images.xmft")),
        "--texts",
        &p(&dir.join("texts.xmft")),
        "--relevance",
        &p(&dir.join("relevance.json")),
    ])
}

/// Two tasks, two categories each, ten pairs per category — milliseconds to
/// train, and wide enough hidden layers downstream keep every item's
/// embedding well-defined under dropout.
fn gen_small(dir: &Path) -> String {
    let mut args = strings(&[
        "gen",
        "--image-dim",
        "10",
        "--text-dim",
        "12",
        "--latent-dim",
        "4",
        "--tasks",
        "2",
        "--categories-per-task",
        "2",
        "--pairs-per-category",
        "10",
        "--noise-std",
        "0.1",
        "--seed",
        "5",
    ]);
    args.extend(strings(&["--out-dir", &p(dir)]));
    ok_stdout(xmcl(&args))
}

fn train_flags() -> Vec<String> {
    strings(&[
        "--epochs",
        "2",
        "--hidden-dim",
        "48",
        "--embed-dim",
        "4",
        "--batch-size",
        "8",
        "--learning-rate",
        "1e-3",
        "--seed",
        "11",
    ])
}

#[test]
fn full_pipeline_round_trips_through_files() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");

    let gen_out = gen_small(&data);
    assert!(gen_out.contains("content hash "), "gen output: {gen_out}");
    for f in ["images.xmft", "texts.xmft", "relevance.json", "generator.json"] {
        assert!(data.join(f).is_file(), "gen did not write {f}");
    }

    let mut args = strings(&["train"]);
    args.extend(data_flags(&data));
    args.extend(train_flags());
    args.extend(strings(&["--regularizer", "ewc", "--out-dir", &p(&run)]));
    ok_stdout(xmcl(&args));
    for f in [
        "config.toml",
        "summary.json",
        "model-task1.xmcl",
        "model-task2.xmcl",
        "importance-task1.xmcl",
        "importance-task2.xmcl",
    ] {
        assert!(run.join(f).is_file(), "train did not write {f}");
    }
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["task_ids"], serde_json::json!([1, 2]));
    assert_eq!(summary["config"]["epochs"], serde_json::json!(2));
    assert_eq!(summary["stage_evals"].as_array().unwrap().len(), 2);

    let index = run.join("index.xmix");
    let mut args = strings(&["index"]);
    args.extend(data_flags(&data));
    args.extend(strings(&["--run-dir", &p(&run), "--policy", "no-reindex", "--out", &p(&index)]));
    let out = ok_stdout(xmcl(&args));
    assert!(out.contains("no-reindex"), "index output: {out}");
    assert!(index.is_file());

    // A query restricted to task 1 may only surface task-1 train items,
    // ranked by non-decreasing distance.
    let sidecar: Value =
        serde_json::from_str(&fs::read_to_string(data.join("relevance.json")).unwrap()).unwrap();
    let train1: BTreeSet<u64> = sidecar["tasks"][0]["train"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let probe = sidecar["tasks"][0]["test"][0].as_u64().unwrap().to_string();
    let model = p(&run.join("model-task2.xmcl"));
    let mut args = strings(&["query"]);
    args.extend(data_flags(&data));
    args.extend(strings(&[
        "--index",
        &p(&index),
        "--model",
        &model,
        "--id",
        &probe,
        "--direction",
        "im2txt",
        "--task",
        "1",
        "--k",
        "5",
        "--format",
        "json",
    ]));
    let ranking: Value = serde_json::from_str(&ok_stdout(xmcl(&args))).unwrap();
    let hits = ranking["ranking"].as_array().unwrap();
    assert_eq!(hits.len(), 5);
    for hit in hits {
        let id = hit["item_id"].as_u64().unwrap();
        assert!(train1.contains(&id), "hit {id} is not a task-1 train item");
    }
    let dists: Vec<f64> = hits.iter().map(|h| h["distance"].as_f64().unwrap()).collect();
    assert!(dists.windows(2).all(|w| w[0] <= w[1]), "unsorted ranking: {dists:?}");

    // Recall cells: only the requested cutoffs, a pooled row per direction,
    // and known-task scoping never loses to unknown-task on the same cell.
    let mut args = strings(&["eval"]);
    args.extend(data_flags(&data));
    args.extend(strings(&[
        "--index",
        &p(&index),
        "--model",
        &model,
        "--k",
        "1",
        "--k",
        "10",
        "--format",
        "json",
    ]));
    let cells: Value = serde_json::from_str(&ok_stdout(xmcl(&args))).unwrap();
    let cells = cells.as_array().unwrap();
    assert!(cells.iter().all(|c| {
        let k = c["k"].as_u64().unwrap();
        k == 1 || k == 10
    }));
    assert_eq!(cells.iter().filter(|c| c["task"].is_null()).count(), 4);
    for known in cells.iter().filter(|c| c["known_scope"] == true) {
        let twin = cells
            .iter()
            .find(|c| {
                c["known_scope"] == false
                    && c["task"] == known["task"]
                    && c["k"] == known["k"]
                    && c["direction"] == known["direction"]
            })
            .expect("every known cell has an unknown twin");
        assert!(known["recall"].as_f64().unwrap() >= twin["recall"].as_f64().unwrap());
    }

    let mut args = strings(&["diagnose"]);
    args.extend(data_flags(&data));
    args.extend(strings(&["--run-dir", &p(&run), "--index", &p(&index), "--format", "json"]));
    let report: Value = serde_json::from_str(&ok_stdout(xmcl(&args))).unwrap();
    assert_eq!(report["current_task"], serde_json::json!(2));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row["image_drift"].as_f64().unwrap() >= 0.0);
        assert!(row["overlap"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn grid_writes_results_and_exit_codes_track_cell_failures() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);

    let grid_dir = tmp.path().join("grid");
    let mut args = strings(&["grid"]);
    args.extend(data_flags(&data));
    args.extend(train_flags());
    args.extend(strings(&["--reps", "1", "--k", "10", "--workers", "2", "--out-dir", &p(&grid_dir)]));
    let stdout = ok_stdout(xmcl(&args));
    assert!(stdout.contains("config hash "), "grid output: {stdout}");
    assert!(grid_dir.join("grid.json").is_file());

    let csv = fs::read_to_string(grid_dir.join("results.csv")).unwrap();
    assert!(csv.starts_with("sharing,policy,variant,direction,scope,task,k,recall,repetitions\n"));
    // 18 cells x 2 directions x (2 known + average + 2 unknown + total)
    assert_eq!(csv.lines().count(), 1 + 18 * 2 * 6);
    let table: Value =
        serde_json::from_str(&fs::read_to_string(grid_dir.join("results.json")).unwrap()).unwrap();
    assert_eq!(table["cells"].as_array().unwrap().len(), 18);
    assert_eq!(table["repetitions"], serde_json::json!(1));

    // A config that cannot train fails every cell: the table is still
    // written (header only) but the exit code flips.
    let bad_dir = tmp.path().join("bad");
    let mut args = strings(&["grid"]);
    args.extend(data_flags(&data));
    args.extend(strings(&["--reps", "1", "--k", "10", "--batch-size", "0", "--out-dir", &p(&bad_dir)]));
    let out = xmcl(&args);
    assert!(!out.status.success(), "grid must fail when cells fail");
    let csv = fs::read_to_string(bad_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "failed cells must emit no rows");
}

#[test]
fn config_file_fields_merge_under_flag_overrides() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);

    let cfg = tmp.path().join("base.toml");
    fs::write(&cfg, "epochs = 3\nhidden_dim = 40\n\n[loss]\nmargin = 0.2\n").unwrap();

    let run = tmp.path().join("run");
    let mut args = strings(&["train"]);
    args.extend(data_flags(&data));
    args.extend(strings(&[
        "--config",
        &p(&cfg),
        "--epochs",
        "2",
        "--embed-dim",
        "4",
        "--batch-size",
        "8",
        "--seed",
        "3",
        "--out-dir",
        &p(&run),
    ]));
    ok_stdout(xmcl(&args));

    let summary: Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let config = &summary["config"];
    assert_eq!(config["epochs"], serde_json::json!(2), "flag overrides the file");
    assert_eq!(config["hidden_dim"], serde_json::json!(40), "file overrides the default");
    assert_eq!(config["embed_dim"], serde_json::json!(4));
    assert_eq!(config["loss"]["margin"], serde_json::json!(0.2));
    assert_eq!(
        config["learning_rate"].as_f64().unwrap(),
        1e-4,
        "untouched fields keep the default"
    );
}

#[test]
fn decoupled_training_writes_one_run_per_direction() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);

    let run = tmp.path().join("run");
    let mut args = strings(&["train"]);
    args.extend(data_flags(&data));
    args.extend(train_flags());
    args.extend(strings(&["--decoupled", "--regularizer", "mas", "--out-dir", &p(&run)]));
    ok_stdout(xmcl(&args));

    let mut scopes = Vec::new();
    let mut directions = Vec::new();
    for branch in ["image", "text"] {
        let dir = run.join(branch);
        for f in ["summary.json", "model-task1.xmcl", "model-task2.xmcl"] {
            assert!(dir.join(f).is_file(), "{branch} run is missing {f}");
        }
        let summary: Value =
            serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
        scopes.push(summary["config"]["reg"]["scope"].clone());
        let dirs: BTreeSet<String> = summary["stage_evals"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|s| s["cells"].as_array().unwrap())
            .map(|c| c["direction"].to_string())
            .collect();
        assert_eq!(dirs.len(), 1, "{branch} run must evaluate one direction, got {dirs:?}");
        directions.push(dirs);
    }
    assert_ne!(scopes[0], scopes[1], "each branch regularizes its own side");
    assert_ne!(directions[0], directions[1], "each branch answers its own direction");
}
