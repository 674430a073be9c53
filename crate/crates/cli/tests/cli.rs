use std::path::Path;
use std::process::{Command, Output};

fn icudil(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icudil"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ICUDIL_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&icudil(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&icudil(&["train", "--seeds", "many"], dir.path())), 1);
    assert_eq!(code(&icudil(&[], dir.path())), 1);
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let help = icudil(&["--help"], dir.path());
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["generate", "train", "grid", "analyze", "report"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    assert_eq!(code(&icudil(&["--version"], dir.path())), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.kv"), "task = ihm\nnot_a_key = 3\n").unwrap();
    let out = icudil(&["train", "-c", "bad.kv"], dir.path());
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&icudil(&["report", "nothing_here"], dir.path())), 2);
    assert_eq!(code(&icudil(&["train", "--task", "ihm", "--region", "Atlantis"], dir.path())), 2);
}

#[test]
fn generate_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let gen = icudil(
        &["generate", "--region", "West", "--cohort-size", "30", "--seed", "4", "--out", "cohort"],
        dir.path(),
    );
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    let out = icudil(&["analyze", "--input", "cohort", "--out", "stats"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let freq = std::fs::read_to_string(dir.path().join("stats/frequency.csv")).unwrap();
    let lines: Vec<&str> = freq.lines().collect();
    assert_eq!(lines.len(), 18);
    assert_eq!(lines[0], "channel,West");
}
