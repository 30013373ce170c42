mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{tiny_config, write};

fn fedcarbon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcarbon")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TWO_SITES: &[(&str, &str, &str)] = &[("a", "high", "POL"), ("b", "medium", "SWE")];

fn run_tiny(dir: &Path, name: &str, seed: Option<&str>) -> std::path::PathBuf {
    let config = write(dir, "tiny.json", &tiny_config(3, TWO_SITES, 0.5, 7));
    let out = dir.join(name);
    let mut args = vec!["run", "--config", p(&config), "--out", p(&out)];
    if let Some(s) = seed {
        args.extend(["--seed", s]);
    }
    let res = fedcarbon(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    out
}

#[test]
fn run_writes_three_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path(), "out", None);
    for f in ["rounds.csv", "run.json", "summary.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["run_id"], "tiny-seed7");
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_alpha_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bad.json", &tiny_config(2, TWO_SITES, 0.0, 1));
    let res = fedcarbon(&["run", "--config", p(&config), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("partition.alpha"), "{}", stderr(&res));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_config(2, &[("a", "high", "POL"), ("b", "fast", "SWE")], 1.0, 1);
    let config = write(dir.path(), "bad.json", &text);
    let res = fedcarbon(&["run", "--config", p(&config), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("sites[1].tier"), "{}", stderr(&res));

    let text = tiny_config(2, TWO_SITES, 1.0, 1).replace("\"seed\"", "\"colour\": 1, \"seed\"");
    let config = write(dir.path(), "bad2.json", &text);
    let res = fedcarbon(&["run", "--config", p(&config), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("colour"), "{}", stderr(&res));

    let res = fedcarbon(&["run", "--config", p(&dir.path().join("missing.json")), "--out", "x"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn report_on_empty_directory_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let res = fedcarbon(&["report", "--in", p(dir.path())]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("rounds.csv"));
}

#[test]
fn tampered_summary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path(), "out", None);
    let path = out.join("summary.json");
    let mut summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    summary["total_co2e_kg"] = serde_json::json!(123.0);
    std::fs::write(&path, summary.to_string()).unwrap();
    let res = fedcarbon(&["report", "--in", p(&out)]);
    assert_eq!(code(&res), 2);
}

#[test]
fn report_formats() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_tiny(dir.path(), "a", Some("1"));
    let b = run_tiny(dir.path(), "b", Some("2"));

    let text = fedcarbon(&["report", "--in", p(&a), p(&b)]);
    assert_eq!(code(&text), 0);
    assert!(stdout(&text).contains("site"));

    let json = fedcarbon(&["report", "--in", p(&a), p(&b), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["runs"].as_array().unwrap().len(), 2);
    assert_eq!(v["ratios"].as_array().unwrap().len(), 1);
    let ratio = v["ratios"][0]["co2e_ratio"].as_f64().unwrap();
    let expected = v["runs"][1]["total_co2e_kg"].as_f64().unwrap() / v["runs"][0]["total_co2e_kg"].as_f64().unwrap();
    assert!((ratio - expected).abs() <= 1e-12 * expected);

    let csv = fedcarbon(&["report", "--in", p(&a), "--format", "csv"]);
    let body = stdout(&csv);
    let mut lines = body.lines();
    assert!(lines.next().unwrap().contains("site_id"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn whatif_zero_and_doubled_intensity() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path(), "out", None);
    let total = |o: &Output| {
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        (
            v["runs"][0]["total_co2e_kg"].as_f64().unwrap(),
            v["runs"][0]["total_energy_kwh"].as_f64().unwrap(),
        )
    };
    let base = total(&fedcarbon(&["report", "--in", p(&out), "--format", "json"]));

    let zero = fedcarbon(&["whatif", "--in", p(&out), "--ci", "0", "--format", "json"]);
    assert_eq!(code(&zero), 0, "{}", stderr(&zero));
    assert_eq!(total(&zero), (0.0, base.1));

    let one = total(&fedcarbon(&["whatif", "--in", p(&out), "--ci", "0.25", "--format", "json"]));
    let two = total(&fedcarbon(&["whatif", "--in", p(&out), "--ci", "0.5", "--format", "json"]));
    assert_eq!(two.0, 2.0 * one.0);
    assert_eq!(two.1, base.1);

    let text = fedcarbon(&["whatif", "--in", p(&out), "--region", "SWE"]);
    assert_eq!(code(&text), 0);
    assert!(stdout(&text).contains("co2e vs original"));
}

#[test]
fn whatif_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path(), "out", None);
    assert_eq!(code(&fedcarbon(&["whatif", "--in", p(&out), "--region", "ATLANTIS"])), 2);
    assert_eq!(code(&fedcarbon(&["whatif", "--in", p(&out), "--ci", "-1"])), 2);
    assert_eq!(code(&fedcarbon(&["whatif", "--in", p(&out), "--ci", "1", "--region", "SWE"])), 2);
    assert_eq!(code(&fedcarbon(&["whatif", "--in", p(&out)])), 2);
}

#[test]
fn seed_override_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_tiny(dir.path(), "a", Some("11"));
    let b = run_tiny(dir.path(), "b", Some("11"));
    let c = run_tiny(dir.path(), "c", Some("12"));
    for f in ["rounds.csv", "run.json", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        std::fs::read(a.join("rounds.csv")).unwrap(),
        std::fs::read(c.join("rounds.csv")).unwrap()
    );
}

#[test]
fn calibrate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "high.json",
        &tiny_config(3, &[("a", "high", "USA"), ("b", "high", "USA")], 1.0, 3),
    );
    let base = dir.path().join("base");
    assert_eq!(code(&fedcarbon(&["run", "--config", p(&config), "--out", p(&base)])), 0);

    let targets = write(
        dir.path(),
        "targets.json",
        r#"{"tiers": {"high": {"mean_energy_kwh_per_round": 1.0, "runtime_min": 1.0},
                      "medium": {"mean_energy_kwh_per_round": 3.0, "runtime_min": 2.0}}}"#,
    );
    let presets = dir.path().join("presets.json");
    let ok = fedcarbon(&["calibrate", "--baseline", p(&base), "--targets", p(&targets), "--out", p(&presets)]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(stdout(&ok).contains("medium"));
    let fitted: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&presets).unwrap()).unwrap();
    assert!(fitted["tiers"]["medium"]["slowdown_factor"].as_f64().unwrap() > 1.0);

    // Faster than the baseline: no slowdown >= 1 can reach it.
    let unreachable = write(
        dir.path(),
        "fast.json",
        r#"{"tiers": {"high": {"mean_energy_kwh_per_round": 1.0, "runtime_min": 1.0},
                      "medium": {"mean_energy_kwh_per_round": 3.0, "runtime_min": 0.2}}}"#,
    );
    let res = fedcarbon(&["calibrate", "--baseline", p(&base), "--targets", p(&unreachable), "--out", p(&presets)]);
    assert_eq!(code(&res), 1, "{}", stderr(&res));

    let malformed = write(dir.path(), "bad.json", r#"{"tiers": {"high": {"mean_energy": 1}}}"#);
    let res = fedcarbon(&["calibrate", "--baseline", p(&base), "--targets", p(&malformed), "--out", p(&presets)]);
    assert_eq!(code(&res), 2);
}
