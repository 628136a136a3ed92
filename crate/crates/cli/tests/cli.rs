use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
seed = 0
bank_size = 40

[data]
image_size = 16
clean_train = 40
degraded_train = 24
restoration_pretrain = 24
restoration_val = 8
test = 12

[task.optim]
epochs = 1
batch_size = 8

[restorer.optim]
epochs = 1
batch_size = 8

[train]
batch_size = 2
max_iterations = 3
validation_samples = 6
"#;

fn vat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vat"))
        .args(args)
        .env_remove("VAT_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = vat(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flag_exits_2() {
    let out = vat(&["oracle-check", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_check_reports_tiny_residual() {
    let dir = tempfile::tempdir().unwrap();
    let out = vat(&["oracle-check", "--trials", "100", "--seed", "0", "--out", s(dir.path())]);
    ok(&out);
    let line = String::from_utf8_lossy(&out.stdout);
    let report: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!(report["max_residual"].as_f64().unwrap() < 1e-9);
    assert_eq!(report["stable"], true);
    assert!(dir.path().join("oracle/oracle.json").exists());
    assert!(dir.path().join("oracle/manifest.json").exists());
}

#[test]
fn train_without_stubs_names_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = vat(&["train", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let line: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(line["error"], "missing_checkpoint");
    let message = line["message"].as_str().unwrap();
    assert!(message.contains("missing checkpoint"), "{message}");
    assert!(message.contains("classifier.safetensors"), "{message}");
}

#[test]
fn missing_config_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = vat(&["gen-data", "--config", s(&dir.path().join("absent.toml")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"config\""));
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write_png(path: &Path, w: u32, h: u32) {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 8) as u8, (y * 8) as u8, 40]));
    img.save(path).unwrap();
}

/// gen-data, pretrain, train, eval and translate on a tiny config.
#[test]
fn full_pipeline_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out_dir = dir.path().join("run");
    let common = ["--config", s(&cfg), "--out", s(&out_dir), "--deterministic"];
    let run = |cmd: &[&str]| {
        let mut args: Vec<&str> = cmd.to_vec();
        args.extend_from_slice(&common);
        let out = vat(&args);
        ok(&out);
        out
    };

    run(&["gen-data"]);
    let data = out_dir.join("data");
    let m = manifest(&data);
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["config"]["data"]["clean_train"], 40);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 6);

    run(&["pretrain"]);
    assert!(out_dir.join("models/classifier.safetensors").exists());
    assert!(out_dir.join("models/manifest.json").exists());

    // CLI flags override the file.
    run(&["train", "--max-iterations", "2", "--dump-pseudo"]);
    let m = manifest(&out_dir.join("train"));
    assert_eq!(m["config"]["train"]["max_iterations"], 2);
    assert_eq!(m["config"]["train"]["dump_pseudo"], true);
    assert_eq!(m["config"]["train"]["batch_size"], 2);
    let history = fs::read_to_string(out_dir.join("train/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(out_dir.join("train/pseudo_labels.jsonl").exists());

    // The manifest alone reruns the command bit for bit.
    let snapshot = dir.path().join("snap/manifest.json");
    fs::create_dir_all(snapshot.parent().unwrap()).unwrap();
    fs::copy(out_dir.join("train/manifest.json"), &snapshot).unwrap();
    ok(&vat(&["train", "--config", s(&snapshot), "--out", s(&out_dir), "--deterministic"]));
    assert_eq!(fs::read_to_string(out_dir.join("train/history.csv")).unwrap(), history);

    let out = run(&["eval", "--panels", "1"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for p in ["degraded-direct", "restored-direct", "vat-translated"] {
        assert!(text.contains(p), "{text}");
    }
    assert!(out_dir.join("eval/eval.csv").exists());
    assert!(out_dir.join("eval/roc_class0.svg").exists());
    assert!(out_dir.join("eval/gate_panel0.png").exists());

    let inputs = dir.path().join("inputs");
    fs::create_dir_all(&inputs).unwrap();
    write_png(&inputs.join("a.png"), 18, 14);
    write_png(&inputs.join("b.png"), 16, 16);
    run(&["translate", s(&inputs), "--panel"]);
    let translated = out_dir.join("translated");
    let a = image::open(translated.join("a_translated.png")).unwrap();
    assert_eq!((a.width(), a.height()), (18, 14));
    assert!(translated.join("b_translated.png").exists());
    assert!(translated.join("a_panel.png").exists());
    let m = manifest(&translated);
    let notes = m["notes"].as_array().unwrap();
    assert_eq!(notes.len(), 1, "only the 18x14 input needs padding: {notes:?}");

    // Identical input twice gives identical outputs.
    let first = fs::read(translated.join("b_translated.png")).unwrap();
    run(&["translate", s(&inputs.join("b.png"))]);
    assert_eq!(fs::read(translated.join("b_translated.png")).unwrap(), first);

    for sub in ["data", "models", "train", "eval", "translated"] {
        let entries: Vec<PathBuf> = fs::read_dir(out_dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap() == "manifest.json")
            .collect();
        assert_eq!(entries.len(), 1, "{sub}");
    }
}
