use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mrlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrlab"))
        .args(args)
        .env_remove("MRLAB_SEED")
        .output()
        .expect("run mrlab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# small enough for a test
variant = g_pmr2
dataset = cond_bimodal
n_train = 300
n_val = 60
n_test = 60
k = 4
batch_d = 16
batch_g = 8
steps = 40
eval_interval = 20
hidden = 8,8,8
pred_max_epochs = 4
eval_k = 20
eval_grid = 5
";

fn write_cfg(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn train_writes_run_directory_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = mrlab(&["train", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "samples.csv", "manifest.json", "generator.ckpt", "predictor.ckpt"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["predictor_best_epoch"].is_u64());
    assert_eq!(manifest["status"], "completed");

    let o = mrlab(&["eval", a.join("generator.ckpt").to_str().unwrap(), &cfg]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("sample_variance "));
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    let out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_mrlab"))
        .args(["train", &cfg, "--out", out.to_str().unwrap()])
        .env("MRLAB_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    assert_eq!(row.split(',').nth(2), Some("42"));
    assert!(row.starts_with("s42-"));
}

#[test]
fn bad_config_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "seed = 1\nvariant = bogus\n");
    let o = mrlab(&["train", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2") && err.contains("variant"), "{err}");
}

#[test]
fn single_value_sweep_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    let train_out = dir.path().join("t");
    let sweep_out = dir.path().join("s");
    assert!(mrlab(&["train", &cfg, "--out", train_out.to_str().unwrap()]).status.success());
    let o = mrlab(&[
        "sweep", &cfg, "--key", "lambda_rec", "--values", "0", "--out",
        sweep_out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read(train_out.join("metrics.csv")).unwrap(),
        fs::read(sweep_out.join("lambda_rec=0").join("metrics.csv")).unwrap()
    );
    let summary = fs::read_to_string(sweep_out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn sweep_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    let out = dir.path().join("s");
    let o = mrlab(&[
        "sweep", &cfg, "--key", "k", "--values", "1,3", "--out",
        out.to_str().unwrap(), "--jobs", "2",
    ]);
    assert!(!o.status.success());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("k,1,,failed,"));
    assert!(lines[2].contains(",completed,"));
}

#[test]
fn gradcheck_and_negative_control() {
    let o = mrlab(&["gradcheck"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.matches("variant ").count(), 12);
    assert!(!mrlab(&["gradcheck", "--include-negative-control"]).status.success());
}

#[test]
fn decompose_and_median_scan() {
    let o = mrlab(&["decompose", "zero_two"]);
    let text = stdout(&o);
    assert!(text.contains("var 1.000000") && text.contains("se 0.000000") && text.contains("ve 0.000000"));

    let o = mrlab(&["decompose", "two_delta"]);
    let text = stdout(&o);
    let residual: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("identity_residual "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(residual < 1e-10);
    assert!(text.contains("ve 0.000000"));

    let text = stdout(&mrlab(&["median-scan", "two_delta"]));
    assert!(text.contains("min_value 1.000000"));
    assert!(text.contains("argmin [-1.000, 1.000]"));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    fs::write(&p, "value,prob\n0,0.25\n1,0.5\n2,0.25\n").unwrap();
    let text = stdout(&mrlab(&["median-scan", p.to_str().unwrap()]));
    assert!(text.contains("argmin [1.000, 1.000]"), "{text}");

    fs::write(&p, "value,prob\n0,0.3\n").unwrap();
    assert!(!mrlab(&["median-scan", p.to_str().unwrap()]).status.success());
    assert!(!mrlab(&["decompose", "/no/such/file.csv"]).status.success());
}
