//! End-to-end CLI checks on a tiny configuration: every subcommand runs,
//! artifacts land where they should, and determinism holds at the byte
//! level.

use std::path::{Path, PathBuf};
use std::process::Command;

fn mqedit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mqedit"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mqedit_cli_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let cfg = r#"{
        "preset": "desk",
        "train": {"steps": 3, "base_steps": 2, "batch": 2, "log_every": 1},
        "corpus": {"size": 4},
        "eval": {"scenes": 2},
        "schedule": {"sample_steps": 4}
    }"#;
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn gen_data_writes_corpus_and_manifest() {
    let dir = workdir("gendata");
    let config = write_tiny_config(&dir);
    let out = dir.join("corpus");
    let status = mqedit()
        .args(["gen-data", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("manifest.tsv").exists());
    assert!(out.join("scene_00000.mqim").exists());
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 5);
}

#[test]
fn train_edit_inspect_round_trip() {
    let dir = workdir("train");
    let config = write_tiny_config(&dir);
    let corpus = dir.join("corpus");
    assert!(mqedit()
        .args(["gen-data", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&corpus)
        .status()
        .unwrap()
        .success());

    let ckpt = dir.join("model.mqck");
    let out = mqedit()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&corpus)
        .arg("--out")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.join("model.mqck.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("phase=base step=1")));
    assert!(log.lines().any(|l| l.starts_with("phase=adapter step=3")));

    let edited = dir.join("edited.mqim");
    let out = mqedit()
        .args(["edit", "--ckpt"])
        .arg(&ckpt)
        .arg("--image")
        .arg(corpus.join("scene_00000.mqim"))
        .args(["--cq", "6 blob", "--seed", "5", "--out"])
        .arg(&edited)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(edited.exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("detected="), "{stdout}");

    let out = mqedit()
        .args(["inspect", "--ckpt"])
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("unet.b04.wq.w"));
    assert!(text.contains("meta.config"));
}

#[test]
fn edit_is_deterministic_across_invocations() {
    let dir = workdir("detedit");
    let config = write_tiny_config(&dir);
    let corpus = dir.join("corpus");
    assert!(mqedit()
        .args(["gen-data", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&corpus)
        .status()
        .unwrap()
        .success());
    let ckpt = dir.join("model.mqck");
    assert!(mqedit()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&corpus)
        .arg("--out")
        .arg(&ckpt)
        .status()
        .unwrap()
        .success());
    let run = |tag: &str| {
        let out = dir.join(format!("edit_{tag}.mqim"));
        assert!(mqedit()
            .args(["edit", "--ckpt"])
            .arg(&ckpt)
            .arg("--image")
            .arg(corpus.join("scene_00001.mqim"))
            .args(["--cq", "4 blob", "--seed", "11", "--lambda", "1.0", "--beta", "1.0", "--out"])
            .arg(&out)
            .status()
            .unwrap()
            .success());
        std::fs::read(&out).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn validation_failures_exit_one() {
    let dir = workdir("badcfg");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"preset": "desk", "unknown_key": 1}"#).unwrap();
    let out = mqedit()
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // missing checkpoint file is a validation problem too
    let out = mqedit()
        .args(["inspect", "--ckpt"])
        .arg(dir.join("missing.mqck"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_writes_structurally_complete_reports() {
    let dir = workdir("ablate");
    let config = dir.join("tiny.json");
    std::fs::write(
        &config,
        r#"{
            "preset": "desk",
            "train": {"steps": 2, "base_steps": 2, "batch": 2, "log_every": 1},
            "corpus": {"size": 4},
            "eval": {"scenes": 1},
            "schedule": {"sample_steps": 2}
        }"#,
    )
    .unwrap();
    let report_path = dir.join("modules.tsv");
    let out = mqedit()
        .args(["ablate", "--study", "modules", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&report_path).unwrap();
    let report = mqedit_core::ablate::AblationReport::parse_tsv(&text).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.row("full").is_some());
    assert!(report.row("wo_fecom").is_some());
    assert!(report.row("wo_qttn").is_some());
}
