use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aspire"))
}

fn repo(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(path)
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("run") && text.contains("compare"));
}

#[test]
fn missing_config_is_a_config_error() {
    let out = bin().args(["run", "/definitely/not/here.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("not/here.json"));
}

#[test]
fn unknown_override_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("run")
        .arg(repo("configs/toy.json"))
        .arg("--out")
        .arg(dir.path())
        .arg("--run.no_such_key=1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("run.no_such_key"));
}

#[test]
fn golden_toy_run_reproduces_metrics() {
    let golden = std::fs::read(repo("crates/cli/tests/golden/toy_metrics.csv")).unwrap();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let out = bin().arg("run").arg(repo("configs/toy.json")).arg("--out").arg(dir.path()).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(std::fs::read(dir.path().join("metrics.csv")).unwrap(), golden);
        for file in ["trace.jsonl", "resolved-config.json", "summary.json"] {
            assert!(dir.path().join(file).exists(), "{file} missing");
        }
    }
}

#[test]
fn compare_of_sync_and_async_reports_predicted_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("async");
    let s = dir.path().join("sync");
    let config = repo("configs/timing.json");
    let status = bin().arg("run").arg(&config).arg("--out").arg(&a).output().unwrap().status;
    assert!(status.success());
    let status = bin()
        .arg("run")
        .arg(&config)
        .args(["--mode", "sync", "--run.t_max=500"])
        .arg("--out")
        .arg(&s)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let out = bin().arg("compare").arg(a.join("metrics.csv")).arg(s.join("metrics.csv")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let pair = text.lines().find(|l| l.starts_with("0/1")).unwrap();
    let cols: Vec<&str> = pair.split('\t').collect();
    // 7000 async iterations end at t = 4000; 500 sync ones at t = 2000.
    assert_eq!(cols[4], "2.000000000");
    assert_eq!(cols[5], "2.000000000");
}

#[test]
fn compare_rejects_foreign_columns() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n").unwrap();
    let out = bin().arg("compare").arg(&bad).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
