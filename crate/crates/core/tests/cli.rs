use std::path::Path;
use std::process::{Command, Output};

use mbr_core::trainer::{read_log, METRICS_FILE};

fn mbr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbr"))
        .args(args)
        .env_remove("MBR_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "preset": "R50",
        "architecture": {"base_width": 8, "input_size": 32},
        "dataset": {"root": data, "layout": "csv"},
        "sampler": {"p": 2, "k": 2},
        "trainer": {"epochs": 2, "warmup_epochs": 1, "decay_epochs": [], "checkpoint_every": 1},
        "eval": {"batch_size": 8},
        "output_dir": dir.join("runs"),
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn synth(data: &Path) {
    ok(&mbr(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--set",
        "n_ids=4",
        "--set",
        "imgs_per_id=4",
        "--set",
        "image_size=32",
    ]));
}

#[test]
fn train_resume_embed_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let cfg = tiny_config(dir.path(), &data);
    let run_dir = ok(&mbr(&["train", "-c", cfg.to_str().unwrap(), "--evaluate"]));
    let run_dir = Path::new(run_dir.lines().last().unwrap().trim()).to_path_buf();
    assert!(run_dir.join("config.json").exists());
    assert!(run_dir.join("final.safetensors").exists());
    assert!(run_dir.join("epoch_001.safetensors").exists());
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval.json")).unwrap()).unwrap();
    assert!(eval["mAP"].as_f64().unwrap() > 0.0);

    // The stored config reproduces the logged losses.
    let stored = run_dir.join("config.json");
    let rerun = ok(&mbr(&["train", "-c", stored.to_str().unwrap()]));
    let rerun_dir = Path::new(rerun.lines().last().unwrap().trim()).to_path_buf();
    assert_ne!(rerun_dir, run_dir);
    let a = read_log(&run_dir.join(METRICS_FILE)).unwrap();
    let b = read_log(&rerun_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);

    // Resuming after epoch 1 ends at the same weights as the full run.
    let resumed_dir = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed_dir).unwrap();
    std::fs::copy(run_dir.join("epoch_001.safetensors"), resumed_dir.join("epoch_001.safetensors")).unwrap();
    std::fs::copy(&stored, resumed_dir.join("config.json")).unwrap();
    ok(&mbr(&["train", "--resume", resumed_dir.join("epoch_001.safetensors").to_str().unwrap()]));
    let full = mbr_core::model::read_tensors(&run_dir.join("final.safetensors")).unwrap();
    let resumed = mbr_core::model::read_tensors(&resumed_dir.join("final.safetensors")).unwrap();
    assert_eq!(full.keys().collect::<Vec<_>>(), resumed.keys().collect::<Vec<_>>());
    for (k, t) in &full {
        assert_eq!(t.data, resumed[k].data, "{k}");
    }

    // Embedding files give the same numbers as evaluating the checkpoint.
    let ckpt = run_dir.join("final.safetensors");
    let (q, g) = (dir.path().join("q.emb"), dir.path().join("g.emb"));
    for (split, path) in [("query", &q), ("gallery", &g)] {
        ok(&mbr(&["embed", "-c", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--split", split, "--out", path.to_str().unwrap()]));
    }
    let from_files: serde_json::Value =
        serde_json::from_str(&ok(&mbr(&["eval", "--query", q.to_str().unwrap(), "--gallery", g.to_str().unwrap()]))).unwrap();
    assert_eq!(from_files, eval);

    // Identical query and gallery with filtering off: every query finds itself first.
    let selfq = ok(&mbr(&[
        "eval",
        "-c",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--gallery-split",
        "query",
        "--no-filter",
        "--out",
        dir.path().join("self.json").to_str().unwrap(),
    ]));
    let selfq: serde_json::Value = serde_json::from_str(&selfq).unwrap();
    assert_eq!(selfq["cmc1"].as_f64(), Some(1.0));
}

#[test]
fn invalid_inputs_exit_with_validation_code() {
    let out = mbr(&["train", "--set", "preset=R51", "--set", "dataset.root=/nonexistent"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("MBR-4B") && err.contains("R50"), "{err}");

    let out = mbr(&["train", "--set", "trainer.epochz=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let out = mbr(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MBR_DATA_ROOT"));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let out = mbr(&["train", "--set", "dataset.root=/nonexistent/data"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn audit_single_row_and_unknown_preset() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("audit.json");
    let out = mbr(&["audit", "R50", "--json", json.to_str().unwrap()]);
    let table = ok(&out);
    assert!(table.contains("R50") && table.contains("overall: PASS"), "{table}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);
    assert_eq!(mbr(&["audit", "R51"]).status.code(), Some(1));
}
