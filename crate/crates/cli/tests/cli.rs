use std::path::Path;
use std::process::{Command, Output};

fn recycle(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recycle"))
        .args(args)
        .current_dir(dir)
        .env_remove("RECYCLE_POOL")
        .output()
        .unwrap()
}

const TINY: &[&str] = &[
    "gen-tasks", "--families", "1", "--tasks-per-family", "2", "--classes-per-task", "3",
    "--classes-per-family", "6", "--samples-per-class", "8", "--out", "tasks",
];

#[test]
fn usage_and_validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(recycle(dir.path(), &["bogus"]).status.code(), Some(2));
    let bad = recycle(dir.path(), &["gen-tasks", "--classes-per-task", "9", "--out", "x"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());
    let no_pool = recycle(dir.path(), &["select", "--task", "t.json", "--pool", "missing", "--out", "s.json"]);
    assert_eq!(no_pool.status.code(), Some(2));
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    assert!(recycle(dir.path(), TINY).status.success());
    let index = std::fs::read(dir.path().join("tasks/suite.json")).unwrap();
    let again = recycle(dir.path(), TINY);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let mut forced = TINY.to_vec();
    forced.push("--force");
    assert!(recycle(dir.path(), &forced).status.success());
    assert_eq!(std::fs::read(dir.path().join("tasks/suite.json")).unwrap(), index);
}

#[test]
fn pool_select_and_mix_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert!(recycle(dir.path(), TINY).status.success());
    let built = recycle(dir.path(), &["build-pool", "--tasks", "tasks/f0-t0.json", "--pool", "pool", "--epochs", "1"]);
    assert!(built.status.success(), "{}", String::from_utf8_lossy(&built.stderr));
    let sel = recycle(dir.path(), &["select", "--task", "tasks/f0-t1.json", "--pool", "pool", "--out", "sel.json"]);
    assert!(sel.status.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("sel.json")).unwrap()).unwrap();
    assert_eq!(report["selected"], serde_json::json!([0]));

    let mix = recycle(dir.path(), &["mix", "--white", "--task", "tasks/f0-t1.json", "--pool", "pool", "--epochs", "1", "--out", "mix.json"]);
    assert!(mix.status.success(), "{}", String::from_utf8_lossy(&mix.stderr));
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("mix.json")).unwrap()).unwrap();
    let acc = run["test_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let env_pool = Command::new(env!("CARGO_BIN_EXE_recycle"))
        .args(["select", "--task", "tasks/f0-t1.json", "--pool", "elsewhere", "--out", "sel2.json"])
        .current_dir(dir.path())
        .env("RECYCLE_POOL", dir.path().join("pool"))
        .output()
        .unwrap();
    assert!(env_pool.status.success());
}
