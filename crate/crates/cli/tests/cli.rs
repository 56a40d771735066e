use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
n_public = 120
n_train = 60
n_test = 40

[pretrain]
steps = 40
batch_size = 8

[federation]
clients = 2
rounds = 2

[sweep]
snr_db = [0.0, 12.0]
seeds = [1]
"#;

fn mtsc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtsc"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn full_run() -> Vec<u8> {
    let dir = workdir();
    ok(mtsc(dir.path(), &["pretrain"]));
    ok(mtsc(dir.path(), &["fed-train", "--trace"]));
    assert!(
        dir.path()
            .join("out/seed-1/trace.bin")
            .metadata()
            .unwrap()
            .len()
            > 0
    );
    ok(mtsc(dir.path(), &["sweep"]));
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(summary.lines().count() > 1);
    std::fs::read(dir.path().join("out/metrics.csv")).unwrap()
}

#[test]
fn pipeline_is_reproducible_across_processes() {
    let a = full_run();
    let b = full_run();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn fed_train_needs_pretrained_checkpoint() {
    let dir = workdir();
    let o = mtsc(dir.path(), &["fed-train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain"));
}

#[test]
fn sweep_needs_checkpoints() {
    let dir = workdir();
    assert!(!mtsc(dir.path(), &["sweep"]).status.success());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = workdir();
    std::fs::write(dir.path().join("tiny.toml"), "[sweep]\nbudget_x = 3\n").unwrap();
    let o = mtsc(dir.path(), &["pretrain"]);
    assert!(!o.status.success());
}

#[test]
fn kb_insert_then_retrieve() {
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("kb.bin");
    let kb = kb.to_str().unwrap();
    let vec = |hot: usize| {
        (0..32)
            .map(|i| if i == hot { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(",")
    };
    let run = |args: &[&str]| {
        ok(Command::new(env!("CARGO_BIN_EXE_mtsc"))
            .args(args)
            .output()
            .unwrap())
    };
    run(&["kb", "insert", "--kb", kb, "--tag", "a", "--key", &vec(0)]);
    run(&["kb", "insert", "--kb", kb, "--tag", "b", "--key", &vec(1)]);
    let out = run(&["kb", "retrieve", "--kb", kb, "--query", &vec(1), "--k", "1"]);
    let first = out.lines().next().unwrap();
    assert!(first.starts_with("1\tb\t"), "{first}");
}

#[test]
fn kb_rejects_wrong_dimension() {
    let o = Command::new(env!("CARGO_BIN_EXE_mtsc"))
        .args(["kb", "retrieve", "--kb", "missing.bin", "--query", "1,2,3"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("expected 32 numbers"));
}
