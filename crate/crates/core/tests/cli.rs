use std::path::Path;
use std::process::{Command, Output};

fn idmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idmlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn oracle_is_exact() {
    let o = idmlab(&["oracle", "10"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.contains("pos_accuracy=1.0000") && l.contains("img_accuracy=1.0000")));
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = idmlab(&["verify", "--trials", "10", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("verify_report.txt").exists());
    assert!(dir.path().join("results.csv").exists());
}

#[test]
fn run_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(
        &config,
        "schema = 1\nexperiment = \"complexity_pos\"\nseeds = [0, 1]\nsplits = [0.5, 1.0]\n\
         [training]\nmax_epochs = 20\n[[methods]]\nmethod = \"bc\"\narch = \"lc\"\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = idmlab(&["run", config.to_str().unwrap(), "--jobs", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = out.join("results.csv");
    let o = idmlab(&["plot", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let svg = std::fs::read_to_string(out.join("complexity_pos_maze10.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn seed_offset_reaches_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(
        &config,
        "schema = 1\nexperiment = \"complexity_pos\"\nseeds = [0]\nsplits = [1.0]\n\
         [training]\nmax_epochs = 5\n[[methods]]\nmethod = \"bc\"\narch = \"lc\"\n",
    )
    .unwrap();
    let o = idmlab(&["--seed-offset", "7", "run", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(5) == Some("7")));
}

#[test]
fn errors_exit_with_two() {
    let o = idmlab(&["run", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let o = idmlab(&["plot", Path::new(env!("CARGO_MANIFEST_DIR")).join("Cargo.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
