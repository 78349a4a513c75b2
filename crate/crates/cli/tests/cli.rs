use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn timebin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timebin"))
        .args(args)
        .output()
        .expect("spawn timebin")
}

fn ok(args: &[&str]) -> Output {
    let o = timebin(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn num(v: &Value, p: &str) -> f64 {
    v.pointer(p).and_then(Value::as_f64).unwrap_or_else(|| panic!("missing {p}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bell");
    ok(&["simulate", "bell", "--reps", "4000", "--out", s(&out)]);
    for f in ["manifest.json", "report.json", "counts.csv", "tags.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let counts = std::fs::read_to_string(out.join("counts.csv")).unwrap();
    assert!(counts.starts_with("source,setting,outcome,weight\n"));
    assert_eq!(counts.lines().count(), 1 + 2 * 3 * 4);
}

#[test]
fn manifest_round_trip_reproduces_report() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["simulate", "ghz", "--photons", "3", "--reps", "2000", "--seed", "9", "--out", s(&a)]);
    ok(&["simulate", "ghz", "--config", s(&a.join("manifest.json")), "--out", s(&b)]);
    assert_eq!(
        std::fs::read(a.join("report.json")).unwrap(),
        std::fs::read(b.join("report.json")).unwrap()
    );
}

#[test]
fn analyze_witness_matches_simulation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bell");
    ok(&["simulate", "bell", "--reps", "20000", "--mode", "trajectory", "--out", s(&out)]);
    let sim = report(&out);
    let an = tmp.path().join("an");
    ok(&["analyze", "--input", s(&out.join("tags.csv")), "--mode", "witness", "--out", s(&an)]);
    let r = report(&an);
    assert_eq!(num(&r, "/estimate/fidelity"), num(&sim, "/monte_carlo/fidelity"));
}

#[test]
fn coincidence_rate_is_within_factor_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bell");
    ok(&["simulate", "bell", "--defaults", "paper", "--reps", "20000", "--out", s(&out)]);
    let r = report(&out);
    for p in ["/exact/coincidence_rate_hz", "/monte_carlo/coincidence_rate_hz"] {
        let rate = num(&r, p);
        assert!(rate > 124.0 / 2.0 && rate < 124.0 * 2.0, "{p} = {rate}");
    }
}

#[test]
fn hom_without_noise_has_full_visibility() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("hom");
    ok(&["simulate", "hom", "--noise", "off", "--reps", "100000", "--out", s(&out)]);
    let an = tmp.path().join("an");
    ok(&["analyze", "--input", s(&out.join("tags.csv")), "--mode", "hom", "--out", s(&an)]);
    let v = num(&report(&an), "/hom/visibility");
    assert!(v > 0.99, "V_raw = {v}");
    assert_eq!(num(&report(&out), "/g2/zero_delay"), 0.0);
}

#[test]
fn analyze_histogram_and_g2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("hom");
    ok(&["simulate", "hom", "--reps", "50000", "--out", s(&out)]);
    let an = tmp.path().join("g2");
    ok(&["analyze", "--input", s(&out.join("tags.csv")), "--mode", "g2", "--out", s(&an)]);
    assert_eq!(num(&report(&an), "/g2/g2"), num(&report(&out), "/g2/g2"));
    let hist = tmp.path().join("hist");
    ok(&["analyze", "--input", s(&out.join("tags.csv")), "--mode", "histogram", "--out", s(&hist)]);
    let csv = std::fs::read_to_string(hist.join("histogram.csv")).unwrap();
    assert!(csv.starts_with("bin_start_ns,count\n"));
    assert!(num(&report(&hist), "/coincidences") > 0.0);
}

#[test]
fn rabi_pi_point_matches_target() {
    let tmp = tempfile::tempdir().unwrap();
    for (f, expect) in [("1.0", 1.0), ("0.885", 0.885), ("0.988", 0.988)] {
        let out = tmp.path().join(f);
        ok(&["rabi-calibration", "--f-pi", f, "--out", s(&out)]);
        let r = report(&out);
        assert!((num(&r, "/pi_population") - expect).abs() < 1e-6);
        assert_eq!(r["pi_point_matches"], Value::Bool(true));
    }
}

#[test]
fn classical_fringe_amplitude_is_classical_visibility() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fr");
    ok(&["fringe-scan", "--shots", "0", "--out", s(&out)]);
    assert!((num(&report(&out), "/classical_visibility_fit") - 0.99).abs() < 1e-9);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| timebin(args).status.code();

    assert_eq!(code(&["simulate", "bell", "--f-pi", "1.5", "--out", s(tmp.path())]), Some(1));
    assert_eq!(code(&["simulate", "bell", "--reps", "0", "--out", s(tmp.path())]), Some(1));

    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    assert_eq!(code(&["simulate", "bell", "--reps", "10", "--out", s(&blocker.join("sub"))]), Some(2));
    assert_eq!(
        code(&["analyze", "--input", s(&tmp.path().join("absent.csv")), "--mode", "g2"]),
        Some(2)
    );

    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "detector,time_ns,repetition\nD3,1.0,0\n").unwrap();
    assert_eq!(code(&["analyze", "--input", s(&bad), "--mode", "g2", "--out", s(tmp.path())]), Some(1));

    let empty = tmp.path().join("empty.csv");
    std::fs::write(&empty, "detector,time_ns,repetition\n").unwrap();
    assert_eq!(code(&["analyze", "--input", s(&empty), "--mode", "g2", "--out", s(tmp.path())]), Some(3));
    assert_eq!(code(&["analyze", "--input", s(&empty), "--mode", "witness", "--out", s(tmp.path())]), Some(1));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "unknown_key = 3\n").unwrap();
    assert_eq!(code(&["simulate", "bell", "--config", s(&cfg)]), Some(1));
}
