//! The `s2alloc` binary end to end.

use std::process::{Command, Output};

fn s2alloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2alloc"))
        .args(args)
        .env_remove("S2_SEED")
        .output()
        .expect("spawn s2alloc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn analyze_table_point() {
    let o = s2alloc(&["analyze", "--strategy", "s1", "--b", "32", "--s", "16", "--l", "4", "--c", "2", "--d", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("round,p_e,p_attack,p_detect"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|f| f.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 500);
    let last = rows.last().unwrap();
    assert!((last[2] - 0.357).abs() < 1e-3 && (last[3] - 0.565).abs() < 1e-3, "{last:?}");
    // Rates are non-decreasing; the undecided mass is non-increasing.
    assert!(rows.windows(2).all(|w| w[1][1] <= w[0][1] && w[1][2] >= w[0][2] && w[1][3] >= w[0][3]));
}

#[test]
fn simulate_reports_empirical_and_analytic() {
    let o = s2alloc(&["simulate", "--strategy", "s1-spray", "--b", "64", "--trials", "20000", "--rounds", "100"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for row in ["empirical,", "analytic,", "delta,"] {
        assert!(text.lines().any(|l| l.starts_with(row)), "{row} missing:\n{text}");
    }
    assert!(text.contains(" m=4 "));
}

#[test]
fn simulate_against_allocator_runs() {
    let o = Command::new(env!("CARGO_BIN_EXE_s2alloc"))
        .args(["simulate", "--against-allocator", "--strategy", "s1", "--s", "40", "--trials", "300", "--rounds", "10"])
        .env("S2_SEED", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("allocator,")));
    assert!(text.lines().any(|l| l.starts_with("abstract,")));
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["frobnicate"][..],
        &["analyze", "--b", "banana"],
        &["analyze", "--entropy-bits", "17"],
        &["simulate", "--grid", "--against-allocator"],
        &["bench", "--size", "0"],
    ] {
        assert_eq!(s2alloc(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn bad_environment_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_s2alloc"))
        .args(["bench", "--size", "16", "--total-bytes", "4096"])
        .env("S2_NEARBY_D", "-1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("S2_NEARBY_D"));
}

#[test]
fn small_bench_prints_csv() {
    let o = s2alloc(&["bench", "--size", "64", "--total-bytes", "1048576", "--reps", "2", "--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(3).unwrap().starts_with("64,96,16384,mean,"));
}

#[test]
fn selftest_codes() {
    let ok = s2alloc(&["selftest"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).ends_with("selftest: ok\n"));
    let bad = s2alloc(&["selftest", "--inject-bitmap-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL detection-smoke"));
}
