use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn cccharts(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cccharts"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("CCCHARTS_THREADS")
        .output()
        .expect("binary runs")
}

fn with_config(cmd: &str, cfg: &str, extra: &[&str], out: &Path) -> Output {
    let c = config(cfg);
    let mut args = vec![cmd, "--config", c.to_str().unwrap()];
    args.extend_from_slice(extra);
    cccharts(&args, out)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn euclidean_chart_is_flat() {
    let d = tempfile::tempdir().unwrap();
    let o = with_config("chart", "euclidean2.toml", &[], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = read(&d.path().join("a_grid.csv"));
    let mut lines = grid.lines();
    assert_eq!(lines.next(), Some("n,eta,resolution"));
    lines.next();
    assert!(lines.next().unwrap().starts_with("x1,x2,a11"));
    for row in lines {
        assert!(row.split(',').skip(2).all(|v| v.parse::<f64>().unwrap() == 0.0), "{row}");
    }
    let json: serde_json::Value = serde_json::from_str(&read(&d.path().join("chart.json"))).unwrap();
    assert_eq!(json["schema_version"], 1);
}

#[test]
fn heisenberg_chart_reports_residuals() {
    let d = tempfile::tempdir().unwrap();
    let o = with_config("chart", "heisenberg.toml", &["--grid", "6"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&read(&d.path().join("chart.json"))).unwrap();
    let residuals = json["diagnostics"]["residuals"].as_array().unwrap();
    assert!(residuals.iter().any(|r| r["item"] == "pullback"));
    assert!(residuals.iter().all(|r| r["pass"] == true));
    assert_eq!(json["grid"]["resolution"], 6);
    let ys = read(&d.path().join("y_samples.csv"));
    assert_eq!(ys.lines().count(), 1 + 4 * 3);
}

#[test]
fn non_spanning_chart_fails() {
    let d = tempfile::tempdir().unwrap();
    let o = with_config("chart", "nonspanning.toml", &[], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("do not span"));
}

#[test]
fn config_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "dimension = 1\nbase_point = [0.0]\n[[fields]]\nname = \"F\"\ncoefficients = [\"x1 +\"]\n").unwrap();
    let o = cccharts(&["chart", "--config", bad.to_str().unwrap()], d.path());
    assert_eq!(o.status.code(), Some(2));
    let o = cccharts(&["chart"], d.path());
    assert_eq!(o.status.code(), Some(2));
    let o = cccharts(&["chart", "--bogus"], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn euclidean_ball_is_a_disc() {
    let d = tempfile::tempdir().unwrap();
    let o = with_config("ball", "euclidean2.toml", &[], d.path());
    assert_eq!(o.status.code(), Some(0));
    let mut r = csv::Reader::from_path(d.path().join("ball.csv")).unwrap();
    let row: csv::StringRecord = r.records().next().unwrap().unwrap();
    let h = r.headers().unwrap().clone();
    let get = |k: &str| row.get(h.iter().position(|c| c == k).unwrap()).unwrap().to_string();
    assert_eq!(get("weight"), "lebesgue");
    let (m, se): (f64, f64) = (get("measure").parse().unwrap(), get("stderr").parse().unwrap());
    assert!((m - std::f64::consts::PI).abs() <= 3.0 * se, "{m} +- {se}");
}

#[test]
fn quadratic_flow_reaches_two() {
    let d = tempfile::tempdir().unwrap();
    let o = with_config("flow", "quadratic.toml", &[], d.path());
    assert_eq!(o.status.code(), Some(0));
    let text = read(&d.path().join("flow.csv"));
    let last: Vec<f64> = text.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last[1], 0.5);
    assert!((last[2] - 2.0).abs() < 1e-8, "{last:?}");
}

#[test]
fn abs_zygmund_second_difference() {
    let d = tempfile::tempdir().unwrap();
    let o = with_config("norms", "abs_norm.toml", &[], d.path());
    assert_eq!(o.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_str(&read(&d.path().join("norms.json"))).unwrap();
    assert_eq!(json["schema_version"], 1);
    let sd = json["report"]["parts"]["second_difference"].as_f64().unwrap();
    assert!((sd - 2.0).abs() < 0.05);
}

#[test]
fn heisenberg_distance_is_written() {
    let d = tempfile::tempdir().unwrap();
    let o = with_config("distance", "heisenberg.toml", &[], d.path());
    assert_eq!(o.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_str(&read(&d.path().join("distance.json"))).unwrap();
    let rho = json["rho"].as_f64().unwrap();
    // the straight combination 0.5 X + 0.1 T reaches the target
    assert!(rho > 0.0 && rho <= (0.26f64).sqrt() + 1e-9);
}

#[test]
fn scaling_rows_and_slope() {
    let d = tempfile::tempdir().unwrap();
    let o = with_config("scaling", "heisenberg.toml", &["--deltas", "0.2:1.0:5", "--samples", "20000"], d.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read(&d.path().join("scaling.csv")).lines().count(), 6);
    let json: serde_json::Value = serde_json::from_str(&read(&d.path().join("scaling.json"))).unwrap();
    assert!((json["slope"].as_f64().unwrap() - 4.0).abs() < 0.25);

    let o = with_config("scaling", "heisenberg.toml", &["--deltas", "0.5:0.5:1", "--samples", "5000"], d.path());
    assert_eq!(o.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_str(&read(&d.path().join("scaling.json"))).unwrap();
    assert!(json.get("slope").is_none());
    assert_eq!(json["rows"].as_array().unwrap().len(), 1);
}

#[test]
fn scaling_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(with_config("scaling", "grushin.toml", &["--samples", "0"], d.path()).status.code(), Some(2));
    assert_eq!(with_config("scaling", "quadratic.toml", &[], d.path()).status.code(), Some(2));
    assert_eq!(with_config("scaling", "grushin.toml", &["--deltas", "0.2:1.0"], d.path()).status.code(), Some(2));
}

#[test]
fn outputs_are_reproducible_across_thread_counts() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    with_config("ball", "heisenberg.toml", &["--threads", "1", "--seed", "4"], &a);
    let c = config("heisenberg.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_cccharts"))
        .args(["ball", "--config", c.to_str().unwrap(), "--seed", "4", "--out"])
        .arg(&b)
        .env("CCCHARTS_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read(&a.join("ball.csv")), read(&b.join("ball.csv")));
}

#[test]
fn verify_filter_and_fault() {
    let d = tempfile::tempdir().unwrap();
    let o = cccharts(&["verify", "--suite", "ode"], d.path());
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).all(|l| l.contains("ode::")));
    let xml = read(&d.path().join("verify.xml"));
    assert!(xml.contains("<testsuite name=\"ode\"") && !xml.contains("name=\"euclid\""));
    assert!(!xml.contains("time="));

    let o = cccharts(&["verify", "--suite", "euclid", "--inject-fault"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(read(&d.path().join("verify.xml")).contains("<failure"));
    assert_eq!(cccharts(&["verify", "--suite", "nope"], d.path()).status.code(), Some(2));
}
