use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lasir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lasir"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lasir(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const DATA: [&str; 6] = ["--images", "sim/images.toml", "--covariates", "sim/covariates.csv", "--basis", "b.toml"];

/// Small basis and dataset in a fresh directory.
fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["basis", "--dims", "7", "--h", "4", "--out", "b.toml"]);
    ok(dir.path(), &["simulate", "--dims", "7", "--n", "150", "--seed", "3", "--out-dir", "sim"]);
    dir
}

fn with_data<'a>(cmd: &[&'a str]) -> Vec<&'a str> {
    let mut v = cmd.to_vec();
    v.extend_from_slice(&DATA);
    v
}

#[test]
fn fit_without_basis_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = lasir(dir.path(), &["fit", "--images", "a", "--covariates", "b", "--out", "f.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--basis") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_subcommand_and_bad_method_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(lasir(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let mut args = with_data(&["fit", "--method", "em", "--out", "f.toml"]);
    args.push("--k");
    args.push("2");
    assert_eq!(lasir(dir.path(), &args).status.code(), Some(2));
    assert_eq!(lasir(dir.path(), &["basis", "--h", "3", "--h-ref", "5", "--r0", "0.5", "--out", "b"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let out = lasir(dir.path(), &with_data(&["fit", "--out", "f.toml"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn basis_by_variance_target() {
    let dir = TempDir::new().unwrap();
    let out = ok(dir.path(), &["basis", "--dims", "8x9x7", "--h-ref", "6", "--r0", "0.5", "--out", "b.toml"]);
    assert!(out.contains("d\t504"), "{out}");
    let manifest = fs::read_to_string(dir.path().join("b.manifest.toml")).unwrap();
    assert!(manifest.contains("config_sha256"));
    assert!(manifest.contains("command = \"basis\""));
}

#[test]
fn simulate_then_fit_writes_a_fit_bundle() {
    let dir = setup();
    let out = ok(dir.path(), &with_data(&["fit", "--method", "lasir", "--k", "3", "--restarts", "3", "--out", "fit.toml"]));
    assert!(out.contains("method\tlasir") && out.contains("k\t3"), "{out}");
    let bundle = fs::read_to_string(dir.path().join("fit.toml")).unwrap();
    assert!(bundle.contains("kind = \"fit\""));
    assert!(bundle.contains("config_sha256"));
    assert!(dir.path().join("fit.manifest.toml").exists());
    assert!(fs::read_to_string(dir.path().join("sim/manifest.toml")).unwrap().contains("seed = \"3\""));

    // reruns, including on one thread, are bit-identical
    let first = fs::read(dir.path().join("fit.bin")).unwrap();
    ok(dir.path(), &with_data(&["--threads", "1", "fit", "--k", "3", "--restarts", "3", "--out", "again.toml"]));
    assert_eq!(first, fs::read(dir.path().join("again.bin")).unwrap());

    for method in ["kmlr", "svcm"] {
        let out = ok(dir.path(), &with_data(&["fit", "--method", method, "--k", "3", "--out", "base.toml"]));
        assert!(out.contains(&format!("method\t{method}")));
    }
}

#[test]
fn select_infer_metrics_validate() {
    let dir = setup();
    let sel = ok(
        dir.path(),
        &with_data(&["select", "--k-min", "1", "--k-max", "3", "--restarts", "2", "--out", "best.toml"]),
    );
    let lines: Vec<&str> = sel.lines().collect();
    assert_eq!(lines[0], "K\tM\tQ\tBIC");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("chosen_k\t"));
    assert!(dir.path().join("best.toml").exists());

    let inf = ok(dir.path(), &with_data(&["infer", "--fit", "best.toml", "--out-dir", "maps"]));
    assert!(inf.starts_with("k\tj\trejected"));
    assert!(dir.path().join("maps/k0_j1_pval.toml").exists());
    assert!(dir.path().join("maps/k0_j0_reject.raw").exists());
    assert!(dir.path().join("maps/summary.tsv").exists());

    let met = ok(
        dir.path(),
        &[
            "metrics", "--fit", "best.toml", "--truth", "sim/truth.toml", "--basis", "b.toml", "--images",
            "sim/images.toml", "--covariates", "sim/covariates.csv",
        ],
    );
    let row: Vec<&str> = met.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row.len(), 7);
    let nmi: f64 = row[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&nmi));
    let power: f64 = row[5].parse().unwrap();
    assert!((0.0..=1.0).contains(&power));

    let val = ok(dir.path(), &with_data(&["validate", "--fit", "best.toml", "--splits", "3"]));
    assert_eq!(val.lines().filter(|l| l.starts_with("mean\t")).count(), 3);
    assert_eq!(val.lines().count(), 1 + 9 + 3);
}

#[test]
fn simulate_config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("sim.toml"), "dims = [6, 6, 6]\nn = 50\nsigma = 0.5\nseed = 9\n").unwrap();
    let out = ok(dir.path(), &["simulate", "--config", "sim.toml", "--n", "60", "--out-dir", "s"]);
    assert!(out.contains("n\t60") && out.contains("d\t216"), "{out}");
    let manifest = fs::read_to_string(dir.path().join("s/manifest.toml")).unwrap();
    assert!(manifest.contains("sigma = 0.5") && manifest.contains("n = 60"));

    fs::write(dir.path().join("bad.toml"), "side = 6\n").unwrap();
    let bad = lasir(dir.path(), &["simulate", "--config", "bad.toml", "--out-dir", "t"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn reproduce_subcommand_small() {
    let dir = TempDir::new().unwrap();
    let out = ok(
        dir.path(),
        &[
            "reproduce", "table2", "--n", "90", "--dims", "6", "--reps", "1", "--h", "3", "--restarts", "2",
            "--out-dir", "t2",
        ],
    );
    assert!(out.contains("NMI\tlasir") && out.contains("NMI\tkmlr"), "{out}");
    assert!(out.contains("beta_MSE_x1e3\tsvcm"));
    for f in ["replicates.tsv", "summary.tsv", "manifest.toml"] {
        assert!(dir.path().join("t2").join(f).exists(), "{f}");
    }
}
