use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dsaa"))
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let body = format!(
        r#"seed = 5

[paths]
data_dir = "{data}"
out_dir = "{out}"

[world]
text_dim = 32

[encoder]
num_layers = 2
dim = 32
ff_dim = 64

[dsaa]
modulated_layers = [1, 2]

[data]
train_records = 16
eval_records_per_subset = 2

[training]
steps = 2
batch_size = 4
{extra}
"#,
        data = dir.join("data").display(),
        out = dir.join("out").display(),
    );
    std::fs::write(&path, body).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn no_subcommand_is_a_usage_error() {
    let out = bin().output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn help_exits_clean() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    for sub in ["gen-data", "train", "eval", "analyze", "extract"] {
        assert!(text.contains(sub), "{text}");
    }
}

#[test]
fn malformed_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = \"not a number\"").unwrap();
    let out = bin()
        .args(["--config", path.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn invalid_setting_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[eval]\nnms_iou = 1.5\n");
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nms_iou"), "{}", stderr(&out));
}

#[test]
fn gen_then_train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let out = bin().args(["--config", cfg, "gen-data"]).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("data/train.jsonl").exists());
    assert!(dir.path().join("data/eval.jsonl").exists());
    assert!(dir.path().join("data/manifest.json").exists());

    let out = bin().args(["--config", cfg, "train"]).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = dir.path().join("out/ckpt_final.dsaa");
    assert!(ckpt.exists());
    assert!(dir.path().join("out/steps.jsonl").exists());

    let out = bin()
        .args(["--config", cfg, "eval", ckpt.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.contains("Average"), "{table}");
    assert!(dir.path().join("out/eval_ckpt_final.csv").exists());
}

#[test]
fn train_without_a_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gen-data"), "{}", stderr(&out));
}

#[test]
fn eval_with_a_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    bin()
        .args(["--config", cfg.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "eval", "/nonexistent.dsaa"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn numeric_blowup_exits_4_and_keeps_last_good_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lr = 1e308\n");
    let cfg = cfg.to_str().unwrap();
    let out = bin().args(["--config", cfg, "gen-data"]).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = bin().args(["--config", cfg, "train"]).output().unwrap();
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let lastgood = dir.path().join("out/ckpt_lastgood.dsaa");
    assert!(lastgood.exists());
    assert!(!dir.path().join("out/ckpt_final.dsaa").exists());
    assert!(dir.path().join("out/steps.jsonl").exists());
    let ck = dsaa_cli::ckpt::load(&lastgood).unwrap();
    for (name, t) in &ck.params {
        assert!(t.data().iter().all(|v| v.is_finite()), "{name}");
    }
}

#[test]
fn environment_overrides_paths_and_flags_override_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let env_data = dir.path().join("env_data");
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "gen-data"])
        .env("DSAA_DATA_DIR", &env_data)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(env_data.join("train.jsonl").exists());
    assert!(!dir.path().join("data/train.jsonl").exists());

    let flag_data = dir.path().join("flag_data");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--data-dir",
            flag_data.to_str().unwrap(),
            "gen-data",
        ])
        .env("DSAA_DATA_DIR", &env_data)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(flag_data.join("train.jsonl").exists());
}
