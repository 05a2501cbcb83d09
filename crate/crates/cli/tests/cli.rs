use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ntk-score"))
}

const SMALL: [&str; 10] = [
    "--set",
    "training.n=16",
    "--set",
    "training.m=512",
    "--set",
    "training.max_iters=300",
    "--set",
    "mc.n_mc=2000",
    "--n-steps",
    "100",
];

#[test]
fn missing_key_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    let out = bin().arg("config").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap().replace("m = 8192\n", "");
    std::fs::write(&cfg, text).unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`m`"));
}

#[test]
fn unknown_key_exits_with_two() {
    let out = bin().args(["run", "--set", "training.widht=4"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_then_sample_from_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let status = bin()
        .arg("run")
        .args(SMALL)
        .args(["--n-samples", "50", "--seed", "3", "--out"])
        .arg(&dir)
        .status()
        .unwrap();
    assert!(status.success());
    let report = std::fs::read_to_string(dir.join("report.json")).unwrap();
    assert!(report.contains("\"seed\": 3"));

    let sdir = tmp.path().join("resample");
    let status = bin()
        .arg("sample")
        .args(SMALL)
        .args(["--n-samples", "20", "--out"])
        .arg(&sdir)
        .arg("--net")
        .arg(dir.join("net_t_hat.txt"))
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(sdir.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .arg("sweep")
        .args(SMALL)
        .args(["--n-samples", "10", "--axis", "training.m", "--values", "256,512", "--out"])
        .arg(tmp.path())
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(tmp.path().join("sweep_training.m.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("training.m,status"));
}
