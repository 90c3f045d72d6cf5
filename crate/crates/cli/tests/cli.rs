use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
seed = 3

[pretrain]
steps = 5

[trainer]
steps = 2
batch_size = 3
group_size = 4

[run]
checkpoint_every = 1
eval_tasks = 2
eval_group_size = 2
";

fn hygrpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hygrpo"))
        .args(args)
        .env("HYGRPO_LOG_LEVEL", "error")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), SMALL);
    let a = t.path().join("a").display().to_string();
    let b = t.path().join("b").display().to_string();
    let o = hygrpo(&["train", "--config", &cfg, "--out", &a]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(hygrpo(&["train", "--config", &cfg, "--out", &b])
        .status
        .success());
    for f in [
        "metrics.jsonl",
        "curve.csv",
        "checkpoint.ckpt",
        "summary.json",
    ] {
        assert!(Path::new(&a).join(f).exists(), "{f}");
    }
    let ma = std::fs::read(Path::new(&a).join("metrics.jsonl")).unwrap();
    let mb = std::fs::read(Path::new(&b).join("metrics.jsonl")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 6);
}

#[test]
fn steps_flag_overrides_config() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), SMALL);
    let out = t.path().join("o");
    let o = hygrpo(&[
        "train",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn unknown_key_fails_and_names_it() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "[trainer]\ngroup_sise = 4\n");
    let o = hygrpo(&[
        "train",
        "--config",
        &cfg,
        "--out",
        t.path().join("o").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("trainer.group_sise"), "{}", stderr(&o));
}

#[test]
fn invalid_value_fails_and_names_it() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "[trainer]\nclip_eps_discrete = 2.0\n");
    let o = hygrpo(&["train", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("trainer.clip_eps_discrete"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_variant_fails() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), SMALL);
    let o = hygrpo(&[
        "ablate",
        "--config",
        &cfg,
        "--variant",
        "bogus",
        "--out",
        t.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn ablate_prints_the_table() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), SMALL);
    let out = t.path().join("abl");
    let o = hygrpo(&[
        "ablate",
        "--config",
        &cfg,
        "--seed",
        "0",
        "--out",
        out.to_str().unwrap(),
        "--variant",
        "deterministic_head",
        "--variant",
        "hygrpo",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(
        table.contains("baseline") && table.contains("hygrpo"),
        "{table}"
    );
    assert!(out.join("curves/hygrpo_seed0.csv").exists());
}

#[test]
fn sample_is_deterministic_and_checks_config() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), SMALL);
    let out = t.path().join("o");
    assert!(
        hygrpo(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])
            .status
            .success()
    );
    let ckpt = out.join("checkpoint.ckpt").display().to_string();
    let args = [
        "sample",
        "--checkpoint",
        &ckpt,
        "--task",
        "image2pose",
        "--seed",
        "5",
    ];
    let a = hygrpo(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, hygrpo(&args).stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.contains("answer:") && text.contains("rewards:"));

    let other = t.path().join("other.toml");
    std::fs::write(&other, SMALL.replace("seed = 3", "seed = 4")).unwrap();
    let other = other.display().to_string();
    let refused = hygrpo(&["sample", "--checkpoint", &ckpt, "--config", &other]);
    assert!(!refused.status.success());
    assert!(stderr(&refused).contains("--force"));
    let forced = hygrpo(&[
        "sample",
        "--checkpoint",
        &ckpt,
        "--config",
        &other,
        "--force",
    ]);
    assert!(forced.status.success(), "{}", stderr(&forced));

    let traj = t.path().join("traj.jsonl");
    let o = hygrpo(&[
        "sample",
        "--checkpoint",
        &ckpt,
        "--checkpoint",
        &ckpt,
        "--trajectory",
        traj.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(traj).unwrap().lines().count(), 2);
}

#[test]
fn eval_reports_every_task() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), SMALL);
    let out = t.path().join("o");
    assert!(
        hygrpo(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])
            .status
            .success()
    );
    let o = hygrpo(&[
        "eval",
        "--checkpoint",
        out.join("checkpoint.ckpt").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["tasks"].as_array().unwrap().len(), 3);
}

#[test]
fn corrupted_checkpoint_is_a_clean_error() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("bad.ckpt");
    std::fs::write(&p, b"HYGRPOCK garbage").unwrap();
    let o = hygrpo(&["eval", "--checkpoint", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn bad_log_level_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_hygrpo"))
        .args(["eval", "--checkpoint", "missing.ckpt"])
        .env("HYGRPO_LOG_LEVEL", "loud")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("HYGRPO_LOG_LEVEL"));
}
