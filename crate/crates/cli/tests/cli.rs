//! Command-line behaviour: exit codes, output safety, determinism, and a
//! miniature end-to-end workflow.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn alchemy(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alchemy")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Tiny run so the workflow finishes in seconds.
const SMALL: [&str; 10] = [
    "--set",
    "n_per_class=12",
    "--set",
    "recon_epochs=1",
    "--set",
    "clf_epochs=1",
    "--set",
    "calib_epochs=1",
    "--set",
    "calib_batch=2",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

fn dir_digest(dir: &Path) -> String {
    let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&p).unwrap());
    }
    hex::encode(h.finalize())
}

#[test]
fn usage_errors_exit_with_one() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&alchemy(t.path(), &["--no-such-flag"])), 1);
    assert_eq!(code(&alchemy(t.path(), &["evaluate", "--suite", "table9", "--out", "x"])), 1);
    assert_eq!(code(&alchemy(t.path(), &["--help"])), 0);
    let o = alchemy(t.path(), &["gen-data", "--style-preset", "siteA", "--out", "a", "--set", "learning_rate=1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("recon_lr"), "{}", stderr(&o));
    assert!(!t.path().join("a").exists(), "a rejected config must not create output");
}

#[test]
fn missing_checkpoint_names_its_producer() {
    let t = tempfile::tempdir().unwrap();
    let o = alchemy(t.path(), &["normalize", "--normnet", "n.dalc", "--content", "c.png", "--template", "s.png", "--out", "o.png"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alchemy train-recon"), "{}", stderr(&o));
    let o = alchemy(
        t.path(),
        &["calibrate", "--normnet", "n.dalc", "--classifier", "c.dalc", "--template", "t.png", "--data", "d", "--out", "o"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("n.dalc"), b"DALC\x01\x00").unwrap();
    let o = alchemy(t.path(), &["normalize", "--normnet", "n.dalc", "--content", "c.png", "--template", "s.png", "--out", "o.png"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn gen_data_is_deterministic_and_refuses_to_overwrite() {
    let t = tempfile::tempdir().unwrap();
    for out in ["one", "two"] {
        let o = alchemy(t.path(), &with_small(&["gen-data", "--seed", "4", "--style-preset", "siteB", "--out", out]));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(dir_digest(&t.path().join("one")), dir_digest(&t.path().join("two")));
    assert!(t.path().join("one/split.json").is_file());

    let before = dir_digest(&t.path().join("one"));
    let o = alchemy(t.path(), &with_small(&["gen-data", "--seed", "5", "--style-preset", "siteB", "--out", "one"]));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"));
    assert_eq!(dir_digest(&t.path().join("one")), before);

    let o = alchemy(t.path(), &with_small(&["gen-data", "--seed", "5", "--style-preset", "siteB", "--out", "one", "--force"]));
    assert_eq!(code(&o), 0);
    assert_ne!(dir_digest(&t.path().join("one")), before);
}

#[test]
fn config_file_is_overridden_by_set_and_flags() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("run.cfg"), "# small\nn_per_class=30\nseed=9\n").unwrap();
    let args = [
        "gen-data", "--config", "run.cfg", "--set", "n_per_class=12", "--seed", "3", "--style-preset", "siteA", "--out",
    ];
    let o = alchemy(t.path(), &[&args[..], &["layered"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = alchemy(t.path(), &["gen-data", "--set", "n_per_class=12", "--seed", "3", "--style-preset", "siteA", "--out", "direct"]);
    assert_eq!(code(&o), 0);
    assert_eq!(dir_digest(&t.path().join("layered")), dir_digest(&t.path().join("direct")));
    assert_eq!(fs::read_dir(t.path().join("direct")).unwrap().count(), 2 * 12 + 1);
}

#[test]
fn workflow_leaves_input_checkpoints_untouched() {
    let t = tempfile::tempdir().unwrap();
    let run = |args: Vec<&str>| {
        let o = alchemy(t.path(), &args);
        assert_eq!(code(&o), 0, "alchemy {}: {}", args.join(" "), stderr(&o));
    };
    run(with_small(&["gen-data", "--style-preset", "siteA", "--out", "a"]));
    run(with_small(&["gen-data", "--style-preset", "siteB", "--out", "b"]));
    run(with_small(&["train-recon", "--data", "a", "b", "--out", "n.dalc"]));
    run(with_small(&["train-clf", "--data", "a", "--out", "c.dalc"]));
    let hashes = || [fs::read(t.path().join("n.dalc")).unwrap(), fs::read(t.path().join("c.dalc")).unwrap()];
    let before = hashes();

    run(vec!["normalize", "--normnet", "n.dalc", "--content", "b/tumor_0000.png", "--template", "a/tumor_0001.png", "--out", "n.png"]);
    run(with_small(&[
        "calibrate", "--normnet", "n.dalc", "--classifier", "c.dalc", "--template", "a/tumor_0001.png", "--data", "b", "--out", "cal",
    ]));
    run(vec![
        "eigviz", "--normnet", "n.dalc", "--content", "b/tumor_0000.png", "--template", "a/tumor_0001.png", "--out", "eig",
    ]);
    assert_eq!(hashes(), before);

    assert!(t.path().join("n.png").is_file());
    let freeze = fs::read_to_string(t.path().join("cal/freeze.csv")).unwrap();
    assert_eq!(freeze.lines().filter(|l| l.ends_with(",true")).count(), 2, "{freeze}");
    let blends = (0..=100).step_by(25).filter(|w| t.path().join(format!("eig/blend_{w:03}.png")).is_file()).count();
    assert_eq!(blends, 5);
    assert!(t.path().join("eig/eigensphere_content.csv").is_file());
}
