//! End-to-end checks of the command-line driver: case-file round trips,
//! the bundled nine-bus tables, CSV shape, error reporting, and flag
//! validation, all through the compiled binary.

use std::path::PathBuf;
use std::process::Command;

use rld_dispatch::case::{parse_case, CaseError};

fn case_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases").join(name)
}

fn run(args: &[&str]) -> (String, String, bool) {
    let out = Command::new(env!("CARGO_BIN_EXE_rld-dispatch"))
        .args(args)
        .output()
        .expect("binary should launch");
    (
        String::from_utf8(out.stdout).expect("stdout should be utf-8"),
        String::from_utf8(out.stderr).expect("stderr should be utf-8"),
        out.status.success(),
    )
}

fn run_ok(args: &[&str]) -> String {
    let (stdout, stderr, ok) = run(args);
    assert!(ok, "command {args:?} failed: {stderr}");
    stdout
}

/// Data rows of a CSV dump, after the comment and header lines.
fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip_while(|l| l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn lookup(rows: &[Vec<String>], quantity: &str, id: &str) -> f64 {
    let row = rows
        .iter()
        .find(|r| r[0] == quantity && r[1] == id)
        .unwrap_or_else(|| panic!("no row for {quantity}/{id}"));
    row[2].parse().unwrap()
}

#[test]
fn case_files_round_trip() {
    let text = std::fs::read_to_string(case_path("case9.grid")).unwrap();
    let case = parse_case(&text).expect("bundled case should parse");
    assert_eq!(case.n(), 9);
    assert_eq!(case.branches.len(), 9);
    assert_eq!(case.nominal.len(), 3);
    let reparsed = parse_case(&case.serialize()).unwrap();
    assert_eq!(reparsed, case);

    let inline = "\
GRID 1
BUS 1 0.5 2 10
BUS 2 1.25 2 0
BRANCH 1 2 3.5 inf
SIGMA 0.75
COV
1 0.25
0.25 1
NOMINAL
1 4.5
2 5.5
";
    let case = parse_case(inline).unwrap();
    assert_eq!(case.branches[0].capacity, None);
    assert!(case.corr.is_some());
    let reparsed = parse_case(&case.serialize()).unwrap();
    assert_eq!(reparsed, case);
}

#[test]
fn nda_matches_the_reference_tables() {
    let case = case_path("case9.grid");
    let case = case.to_str().unwrap();
    let stdout = run_ok(&["nda", case]);
    let rows = data_rows(&stdout);

    let want_g = [86.6, 134.4, 94.1];
    for (i, want) in want_g.iter().enumerate() {
        let got = lookup(&rows, "generation", &(i + 1).to_string());
        assert!((got - want).abs() < 0.1, "generation {}: {got}", i + 1);
    }
    for i in 3..9 {
        assert_eq!(lookup(&rows, "generation", &(i + 1).to_string()), 0.0);
    }

    let want_f = [
        ("1-4", 86.6),
        ("4-5", 33.7),
        ("5-6", -56.3),
        ("3-6", 94.1),
        ("6-7", 37.8),
        ("7-8", -62.2),
        ("8-2", -134.4),
        ("8-9", 72.2),
        ("9-4", -52.8),
    ];
    for (id, want) in want_f {
        let got = lookup(&rows, "flow", id);
        assert!((got - want).abs() < 0.1, "flow {id}: {got} vs {want}");
    }
    assert_eq!(lookup(&rows, "cost", ""), 315.0);

    let again = run_ok(&["nda", case]);
    assert_eq!(again, stdout, "reruns should be byte-identical");

    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("nda.csv");
    run_ok(&["nda", case, "--out", out_path.to_str().unwrap()]);
    let written = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(written, stdout, "--out should write the stdout bytes");

    let comment = stdout.lines().next().unwrap();
    assert!(comment.starts_with('#'));
    assert!(comment.contains("seed=42"));
    assert!(comment.contains("scenarios=10000"));
    assert!(comment.contains("version="));
}

#[test]
fn congested_rld_reports_positive_price() {
    let case = case_path("case9_congested.grid");
    let stdout = run_ok(&["rld", case.to_str().unwrap()]);
    let rows = data_rows(&stdout);

    let congested: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == "congested").collect();
    assert_eq!(congested.len(), 1);
    assert_eq!(congested[0][1], "5-6");
    assert_eq!(congested[0][2], "reverse");

    assert!((lookup(&rows, "nominal_cost", "") - 374.446).abs() < 1e-3);
    assert!((lookup(&rows, "price_of_uncertainty", "") - 1.79728).abs() < 1e-4);
    assert_eq!(lookup(&rows, "g_star", "2"), 0.0);
    assert!(lookup(&rows, "g_star", "1") > 0.0);
    assert!(lookup(&rows, "g_star", "3") > 0.0);
    let saturated = rows.iter().find(|r| r[0] == "saturated").unwrap();
    assert_eq!(saturated[2], "false");
}

#[test]
fn evaluate_emits_paired_rows() {
    let case = case_path("case9_congested.grid");
    let stdout = run_ok(&[
        "evaluate",
        case.to_str().unwrap(),
        "--sigma",
        "5",
        "--scenarios",
        "400",
        "--seed",
        "7",
    ]);
    let rows = data_rows(&stdout);
    assert_eq!(rows.len(), 5, "one oracle row plus four policies");

    let names: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(names, ["oracle", "nominal", "rld", "rld_ignorant", "three_sigma"]);
    for row in &rows {
        assert_eq!(row[0], "5");
        let mean: f64 = row[2].parse().unwrap();
        let integration: f64 = row[4].parse().unwrap();
        assert!(mean > 0.0);
        assert!(integration >= 0.0, "{}: integration {integration}", row[1]);
    }
    assert_eq!(rows[0][4], "0", "the oracle is its own baseline");

    let comment = stdout.lines().next().unwrap();
    assert!(comment.contains("seed=7"));
    assert!(comment.contains("scenarios=400"));
}

#[test]
fn price_fits_a_slope() {
    let case = case_path("case9_congested.grid");
    let stdout = run_ok(&[
        "price",
        case.to_str().unwrap(),
        "--sigma-grid",
        "2:10:4",
        "--scenarios",
        "300",
    ]);
    let rows = data_rows(&stdout);

    let slope_rows: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == "fit_slope").collect();
    assert_eq!(slope_rows.len(), 4);
    for row in &slope_rows {
        let slope: f64 = row[3].parse().unwrap();
        let half_width: f64 = row[4].parse().unwrap();
        assert!(slope > 0.0, "{}: slope {slope}", row[2]);
        assert!(half_width > 0.0);
    }

    let analytic = rows
        .iter()
        .find(|r| r[0] == "analytic" && r[2] == "rld")
        .expect("analytic price row");
    let price: f64 = analytic[3].parse().unwrap();
    assert!((price - 1.79728).abs() < 1e-4, "analytic price {price}");

    let integration_rows = rows.iter().filter(|r| r[0] == "integration").count();
    assert_eq!(integration_rows, 3 * 4, "three sigmas, four policies");
}

#[test]
fn parse_errors_carry_line_and_column() {
    let err = parse_case("GRID 1\nBUS 1 oops 2 0\n").unwrap_err();
    match err {
        CaseError::Parse { line, col, .. } => {
            assert_eq!(line, 2);
            assert_eq!(col, 7);
        }
        other => panic!("expected a parse error, got {other}"),
    }

    let err = parse_case("GRID 1\nBUS 1 1 2 0\nBRANCH 1 1 1 10\n").unwrap_err();
    assert!(matches!(err, CaseError::Validation(_)), "self-loop: {err}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.grid");
    std::fs::write(&bad, "GRID 1\nBUS 1 1 2 0\nBUS oops 1 2 0\n").unwrap();
    let (stdout, stderr, ok) = run(&["nda", bad.to_str().unwrap()]);
    assert!(!ok);
    assert!(stdout.is_empty());
    assert!(stderr.starts_with("ERROR PARSE:"), "stderr: {stderr}");
    assert!(stderr.contains("line 3"), "stderr: {stderr}");

    let (_, stderr, ok) = run(&["nda", dir.path().join("missing.grid").to_str().unwrap()]);
    assert!(!ok);
    assert!(stderr.starts_with("ERROR IO:"), "stderr: {stderr}");
}

#[test]
fn flags_are_validated() {
    let case = case_path("case9.grid");
    let case = case.to_str().unwrap();

    let (_, stderr, ok) = run(&["price", case, "--sigma-grid", "5:1:2"]);
    assert!(!ok);
    assert!(stderr.starts_with("ERROR USAGE:"), "stderr: {stderr}");

    let (_, stderr, ok) =
        run(&["evaluate", case, "--sigma", "3", "--sigma-grid", "1:5:1"]);
    assert!(!ok);
    assert!(stderr.starts_with("ERROR USAGE:"), "stderr: {stderr}");

    let (_, stderr, ok) = run(&["price", case, "--sigma", "3"]);
    assert!(!ok);
    assert!(stderr.starts_with("ERROR USAGE:"), "stderr: {stderr}");
}

#[test]
fn single_bus_cases_dispatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.grid");
    std::fs::write(&path, "GRID 1\nBUS 1 1 2 50\nSIGMA 2\n").unwrap();

    let stdout = run_ok(&["rld", path.to_str().unwrap()]);
    let rows = data_rows(&stdout);
    assert_eq!(lookup(&rows, "g_star", "1"), 50.0);
    assert_eq!(lookup(&rows, "delta", "1"), 0.0);
    assert!((lookup(&rows, "price_of_uncertainty", "") - 0.797885).abs() < 1e-5);
}
