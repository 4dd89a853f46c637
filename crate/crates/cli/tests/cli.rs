use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualzsl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualzsl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("DUALZSL_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

// Short training so the end-to-end checks stay quick.
const FAST: [&str; 8] = [
    "--set",
    "train.epochs=3",
    "--set",
    "vae.epochs=20",
    "--set",
    "classifier.epochs=20",
    "--set",
    "pretrain.epochs=2",
];

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = dualzsl(tmp.path(), &["--set", &format!("paths.benchmark={out}"), "gen"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("20 seen, 5 unseen"));
    }
    let (a, b) = (dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    assert_eq!(a.len(), 5);
    assert_eq!(a, b);
}

#[test]
fn bad_branching_fails_with_capacity_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dualzsl(tmp.path(), &["--set", "gen.branching=2,2,1,1,1,1,1", "gen"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("capacity"));
}

#[test]
fn config_file_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.conf"), "paths.benchmark = from-env\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dualzsl"))
        .current_dir(tmp.path())
        .env("RUST_LOG", "warn")
        .env("DUALZSL_CONFIG", "c.conf")
        .arg("gen")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("from-env").join("taxonomy.tsv").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dualzsl(tmp.path(), &["--set", "train.momentum=0.9", "gen"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.momentum"));
}

#[test]
fn run_report_and_project_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert!(dualzsl(p, &["gen"]).status.success());
    for regime in ["baseline", "high"] {
        let o = dualzsl(p, &["run", "--regime", regime, "--seed", "2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let base = p.join("out/baseline/seed-2");
    let high = p.join("out/high/seed-2");
    assert!(!base.join("selection.tsv").exists());
    assert_eq!(fs::read_to_string(high.join("selection.tsv")).unwrap().lines().count(), 31);

    let report = fs::read_to_string(base.join("report.tsv")).unwrap();
    let h: f64 = report.lines().nth(1).unwrap().split('\t').nth(3).unwrap().parse().unwrap();
    assert!((0.0..=100.0).contains(&h));

    let o = dualzsl(p, &["report", "out/baseline/seed-2", "out/high/seed-2"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    // recompute the printed rate from the printed H column
    let printed_h = |row: &str| row.split_whitespace().nth(3).unwrap().trim_end_matches('*').parse::<f64>().unwrap();
    let (hb, hh) = (printed_h(lines[1]), printed_h(lines[2]));
    let want = format!("{:+.1}%", (hh - hb) / hb * 100.0);
    assert!(lines[3].starts_with("high vs baseline:") && lines[3].ends_with(&want), "{} vs {want}", lines[3]);

    let o = dualzsl(p, &["project", "out/high/seed-2", "--out", "proj.tsv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(p.join("proj.tsv")).unwrap(), fs::read(high.join("projection.tsv")).unwrap());

    let o = dualzsl(p, &["report", "nowhere"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
}

#[test]
fn sweep_writes_one_row_per_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert!(dualzsl(p, &["gen"]).status.success());
    let mut args = FAST.to_vec();
    args.extend(["sweep-lambda", "--grid", "0,1", "--regime", "low"]);
    let o = dualzsl(p, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(p.join("out/sweep/sweep.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(p.join("out/sweep/lambda-0/report.tsv").exists());
    assert!(p.join("out/sweep/lambda-1/history.tsv").exists());
}
