use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cvturb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvturb"))
        .args(args)
        .output()
        .expect("spawn cvturb")
}

fn ok(args: &[&str]) -> String {
    let out = cvturb(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = cvturb(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

#[test]
fn usage_errors() {
    assert!(ok(&["--help"]).contains("restore"));
    fails(&["frobnicate"]);
    fails(&["train", "--no-such-flag"]);
    let err = fails(&["eval", "--test", "/nonexistent/a", "--ref", "/nonexistent/b"]);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("/nonexistent/a"), "{err}");
}

#[test]
fn synth_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pair");
    ok(&["synth", "--generate", "24x16x3", "--seed", "4", "--output", s(&out)]);
    assert_eq!(pngs(&out.join("clean")), 3);
    assert_eq!(pngs(&out.join("distorted")), 3);
    assert!(out.join("psf").is_dir());

    let csv = dir.path().join("q.csv");
    let text = ok(&[
        "eval",
        "--test",
        s(&out.join("clean")),
        "--ref",
        s(&out.join("clean")),
        "--csv",
        s(&csv),
    ]);
    assert!(text.contains("SSIM 1.0000"), "{text}");
    assert!(fs::read_to_string(&csv).unwrap().lines().count() > 9);

    // same seed, same bytes
    let again = dir.path().join("again");
    ok(&[
        "synth",
        "--input",
        s(&out.join("clean")),
        "--seed",
        "4",
        "--output",
        s(&again),
    ]);
    for i in 0..3 {
        let name = format!("distorted/frame_{i:06}.png");
        assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap());
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# settings\nwindow = 4\n").unwrap();
    let err = fails(&["bench", "--config", s(&cfg), "--size", "32"]);
    assert!(err.contains("line 2") && err.contains("window must be odd"), "{err}");

    // the flag wins over the file
    fs::write(&cfg, "window = 7  # wide\n").unwrap();
    let out = ok(&[
        "bench",
        "--config",
        s(&cfg),
        "--window",
        "3",
        "--preset",
        "tiny",
        "--size",
        "32",
        "--runs",
        "1",
    ]);
    assert!(out.contains("3 frames"), "{out}");
    assert!(out.contains("ratio 4.0"), "{out}");

    fs::write(&cfg, "colour = red\n").unwrap();
    let err = fails(&["bench", "--config", s(&cfg)]);
    assert!(err.contains("unknown key `colour`"), "{err}");
}

#[test]
fn train_restore_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--generate", "32x32x4", "--seed", "2", "--output", s(&data)]);
    let ckpt = dir.path().join("m.cvtr");
    let history = dir.path().join("h.csv");
    let log = ok(&[
        "train",
        "--data",
        s(&data),
        "--preset",
        "tiny",
        "--channels",
        "4",
        "--max-steps",
        "3",
        "--seed",
        "2",
        "--checkpoint-out",
        s(&ckpt),
        "--history",
        s(&history),
        "--log-every",
        "1",
    ]);
    assert!(log.contains("trained 3 steps"), "{log}");
    assert_eq!(fs::read_to_string(&history).unwrap().lines().count(), 4);

    let restored = dir.path().join("restored");
    ok(&[
        "restore",
        "--model",
        s(&ckpt),
        "--input",
        s(&data.join("distorted")),
        "--output",
        s(&restored),
    ]);
    assert_eq!(pngs(&restored), 4);

    let err = fails(&[
        "restore",
        "--model",
        s(&ckpt),
        "--input",
        s(&data.join("distorted")),
        "--output",
        s(&restored),
        "--window",
        "5",
    ]);
    assert!(err.contains("layer mismatch"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--size", "32", "--per-tensor", "1"]);
    assert!(out.contains("max rel. error"), "{out}");
}
