use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gradcomp::cli::ExperimentConfig;

fn gradcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradcomp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_CHECK: &str = r#"
[collective_check]
oracle_instances = 5
settings = [
  { d = 4096, chunk_size = 64, chunks = 8, k = 100 },
  { d = 1024, chunk_size = 16, chunks = 4, k = 10 },
]
"#;

const SMALL_TRAIN: &str = r#"
[data]
source = "clusters"
features = 256
train_size = 512
val_size = 256

[train]
rounds = 100
lr = 0.002
thresholds = [0.8]

[[schemes]]
kind = "dense-fp16"

[[schemes]]
kind = "dense-fp32"
"#;

#[test]
fn print_config_round_trips() {
    let out = gradcomp(&["--print-config", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(
        cfg,
        ExperimentConfig {
            seed: 9,
            ..ExperimentConfig::default()
        }
    );
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nrounds = 10\nlearning_rate = 0.1\n");
    let out = gradcomp(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn bad_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["workers = 0\n", "[gradients]\nrho = 1.0\n", "seed = \"x\"\n"] {
        let cfg = write_config(dir.path(), text);
        let out = gradcomp(&["nmse-sweep", "--config", &cfg]);
        assert_eq!(out.status.code(), Some(2), "{text}: {}", stderr(&out));
    }
    let out = gradcomp(&["train", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let out = gradcomp(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[data]\nsource = \"csv\"\npath = \"/nonexistent/data.csv\"\n[[schemes]]\nkind = \"dense-fp32\"\n",
    );
    let out = gradcomp(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data.csv"), "{}", stderr(&out));
    assert!(!dir.path().join("tta_curves.csv").exists());
}

#[test]
fn collective_check_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CHECK);
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = gradcomp(&["collective-check", "--config", &cfg, "--seed", "4", "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        runs.push((
            fs::read(out_dir.join("collective_check.csv")).unwrap(),
            fs::read(out_dir.join("collective-check.manifest.json")).unwrap(),
        ));
    }
    assert_eq!(runs[0], runs[1]);
    let manifest: serde_json::Value = serde_json::from_slice(&runs[0].1).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["command"], "collective-check");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn single_worker_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("workers = 1\n{SMALL_CHECK}"));
    let out = gradcomp(&["collective-check", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS zero-traffic"), "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn fault_injection_fails_the_named_check() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_CHECK.replace("oracle_instances = 5", "oracle_instances = 5\nfault_value_bits = 8");
    let cfg = write_config(dir.path(), &text);
    let out = gradcomp(&["collective-check", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL topkc-bits d=4096 C=64 J=8"), "{stdout}");
    assert!(stdout.contains("PASS ring-egress"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("collective_check.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("check,expected,measured,pass"));
}

#[test]
fn train_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_TRAIN);
    let out = gradcomp(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let curves = fs::read_to_string(dir.path().join("tta_curves.csv")).unwrap();
    let fp32_rows = curves.lines().filter(|l| l.starts_with("dense-fp32,")).count();
    assert_eq!(fp32_rows, 100);

    let summary: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("train_summary.json")).unwrap()).unwrap();
    let tta = |scheme: &str| {
        let s = summary.iter().find(|s| s["scheme"] == scheme).unwrap();
        s["time_to"]["0.8"].as_f64().unwrap_or(f64::INFINITY)
    };
    assert!(tta("dense-fp16") < tta("dense-fp32"));
    assert!(tta("dense-fp32").is_finite());
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[model]\nkind = \"mlp\"\nhidden = 8\n[data]\nsource = \"clusters\"\nfeatures = 32\ntrain_size = 128\nval_size = 64\n\
         [train]\nrounds = 30\nlr = 1e30\n[[schemes]]\nkind = \"dense-fp32\"\n",
    );
    let out = gradcomp(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(dir.path().join("train_summary.json").exists());
}

#[test]
fn nmse_sweep_writes_rows_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[gradients]\nd = 4096\n[nmse_sweep]\nseeds = 3\nrounds = 2\n\
         [[schemes]]\nkind = \"topkc\"\nbudgets = [2.0, 8.0]\n[[schemes]]\nkind = \"dense-fp16\"\n",
    );
    let out = gradcomp(&["nmse-sweep", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("nmse_sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("scheme,b,seed,mean_nmse,bits_per_coord"));
    assert_eq!(lines.count(), 9);
    assert!(dir.path().join("nmse-sweep.manifest.json").exists());
}
