mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tabimg_harness::{Checkpoint, EvalReport};

fn tabimg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabimg")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{}{extra}", common::TINY)).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn usage_and_configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&tabimg(&["synth", "--bogus"])), 1);
    assert_eq!(code(&tabimg(&["frobnicate"])), 1);
    let bad_key = write_config(dir.path(), "not_a_key = 3\n");
    let run = tabimg(&["synth", "--config", &bad_key, "--out", out]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("not_a_key"));
    assert_eq!(code(&tabimg(&["synth", "--config", "/nonexistent/run.cfg"])), 1);
    assert_eq!(code(&tabimg(&["--help"])), 0);
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path(), "");
    for dir in [&a, &b] {
        let out = tabimg(&[
            "synth",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in [
        "schema.json",
        "meta.json",
        "train.csv",
        "val.csv",
        "test.csv",
        "train_images.bin",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn pretrain_finetune_eval_sweep_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep_seeds = 0\nsweep_sigmas = 0,0.5\nimpute_sigmas = 0,0.5\n",
    );
    let step = |cmd: &str| {
        let o = tabimg(&[cmd, "--config", &cfg, "--seed", "1", "--out", out]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    };

    // before fine-tuning, eval falls back to imputation
    step("pretrain");
    step("eval");
    let trace = fs::read_to_string(dir.path().join("loss_trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2 * (72 / 16));
    let pre = Checkpoint::load(&dir.path().join("pretrained.ckpt")).unwrap();
    let reports: Vec<EvalReport> =
        serde_json::from_slice(&fs::read(dir.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 4);
    assert!(reports.iter().all(|r| r.config_digest == pre.digest()));
    assert!(reports[0].value.is_none() && reports[1].value.is_some());

    step("finetune");
    step("eval");
    step("sweep");
    let ft = Checkpoint::load(&dir.path().join("finetuned.ckpt")).unwrap();
    let reports: Vec<EvalReport> =
        serde_json::from_slice(&fs::read(dir.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].config_digest, ft.digest());
    let sweep: Vec<EvalReport> =
        serde_json::from_slice(&fs::read(dir.path().join("sweep_report.json")).unwrap()).unwrap();
    assert_eq!(sweep.len(), 4 * 2);
    assert!(fs::read_to_string(dir.path().join("sweep_report.txt"))
        .unwrap()
        .starts_with("task"));
}

#[test]
fn missing_checkpoint_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tabimg(&["sweep", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("pretrained.ckpt"), b"TIPCKPT1 but not really").unwrap();
    let o = tabimg(&["impute", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_writes_its_log() {
    let dir = tempfile::tempdir().unwrap();
    let o = tabimg(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let log = fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("270/270"), "{log}");
}
