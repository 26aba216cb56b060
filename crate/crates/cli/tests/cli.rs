//! Scenario parsing and running, the benchmark harness and the `vledger`
//! binary.

use std::path::PathBuf;
use std::process::Command;

use vledger_cli::bench::{format_table, mean_std, run_bench, BenchParams, TxKind};
use vledger_cli::demo::{bundled, init, run_suite, HAPPY_PATH};
use vledger_cli::scenario::{run_scenario, Scenario, ScenarioError};
use vledger_cli::stack::{Stack, StackConfig};
use vledger_core::crypto::hash;
use vledger_core::enclave::QuoteError;

const MISSING_COMMA: &str = r#"{
  "name": "broken",
  "steps": [
    { "step": "advance", "ms": 5 }
    { "step": "cut" }
  ]
}"#;

const UNKNOWN_STEP: &str = r#"{
  "name": "broken",
  "steps": [
    { "step": "cut" },
    { "step": "teleport" }
  ]
}"#;

fn parse_line(text: &str) -> usize {
    match Scenario::parse(text) {
        Err(ScenarioError::Parse { line, .. }) => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_json_reports_its_line() {
    assert_eq!(parse_line(MISSING_COMMA), 5);
}

#[test]
fn unknown_step_reports_its_line() {
    assert_eq!(parse_line(UNKNOWN_STEP), 5);
}

#[test]
fn unknown_config_field_is_refused() {
    let text = "{\n  \"name\": \"x\",\n  \"config\": { \"actorz\": 2 },\n  \"steps\": []\n}";
    assert_eq!(parse_line(text), 3);
}

#[test]
fn bundled_scenarios_pass() {
    let suite = run_suite(None).unwrap();
    assert_eq!(suite.reports.len(), bundled().len());
    for r in &suite.reports {
        assert!(r.passed, "{}", r.summary());
        assert!(r.assertions.iter().all(|a| a.passed));
    }
}

#[test]
fn seed_override_changes_keys_but_not_verdicts() {
    let s = Scenario::parse(HAPPY_PATH).unwrap();
    let a = run_scenario(&s, Some(1)).unwrap();
    let b = run_scenario(&s, Some(2)).unwrap();
    assert!(a.passed && b.passed);
    assert_eq!(a.seed, 1);
    assert_ne!(a.to_json(), b.to_json());
    assert_eq!(a.final_state.anchored.version, b.final_state.anchored.version);
}

#[test]
fn failed_assertion_fails_the_report() {
    let text = r#"{
      "name": "wrong",
      "steps": [
        { "step": "submit", "from": 0, "to": 1, "amount": 3, "label": "t" },
        { "step": "assert", "check": { "check": "ledger-version", "equals": 7 } },
        { "step": "assert", "check": { "check": "audit" } }
      ]
    }"#;
    let r = run_scenario(&Scenario::parse(text).unwrap(), None).unwrap();
    assert!(!r.passed);
    assert_eq!(r.assertions.iter().filter(|a| !a.passed).count(), 1);
    assert!(r.summary().contains("FAIL"));
}

#[test]
fn unknown_label_is_a_script_error() {
    let text = r#"{
      "name": "typo",
      "steps": [ { "step": "assert", "check": { "check": "receipt", "tx": "nope" } } ]
    }"#;
    let r = run_scenario(&Scenario::parse(text).unwrap(), None);
    assert!(matches!(r, Err(ScenarioError::Script { index: 0, .. })), "{r:?}");
}

#[test]
fn init_publishes_the_genesis() {
    let d = init(5, StackConfig { accounts: 10, ..StackConfig::default() }).unwrap();
    assert_eq!(d.genesis_accounts, 10);
    assert_eq!(d.anchored.version, 0);
    assert_eq!(init(5, StackConfig { accounts: 10, ..StackConfig::default() }).unwrap(), d);
}

#[test]
fn mean_std_matches_hand_computation() {
    let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(m, 5.0);
    assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
}

#[test]
fn tx_kind_round_trips() {
    for k in [TxKind::Payment, TxKind::Contract] {
        assert_eq!(k.to_string().parse::<TxKind>(), Ok(k));
    }
    assert!("swap".parse::<TxKind>().is_err());
}

#[test]
fn bench_covers_the_grid() {
    let params = BenchParams {
        block_sizes: vec![1, 10],
        accounts: vec![40],
        kinds: vec![TxKind::Payment, TxKind::Contract],
        runs: 2,
        txs_per_run: 20,
        seed: 3,
    };
    let mut seen = 0;
    let rows = run_bench(&params, |_| seen += 1).unwrap();
    assert_eq!((rows.len(), seen), (4, 4));
    assert!(rows.iter().all(|r| r.tps_mean > 0.0 && r.runs == 2));
    let table = format_table(&rows);
    assert_eq!(table.lines().count(), 5);
    assert!(table.contains("contract"));
}

fn vledger(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vledger")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name)
}

#[test]
fn binary_reports_parse_errors_with_lines() {
    let path = scratch("broken-scenario.json");
    std::fs::write(&path, MISSING_COMMA).unwrap();
    let out = vledger(&["run-scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 5"), "{err}");
}

#[test]
fn binary_writes_demo_reports() {
    let path = scratch("tamper-report.json");
    let out = vledger(&["--seed", "4", "--out", path.to_str().unwrap(), "tamper-demo"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["seed"], 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn binary_bench_prints_rows() {
    let out = vledger(&["bench", "--block-sizes", "1,5", "--accounts", "40", "--kind", "payment", "--runs", "2", "--txs", "10"]);
    assert_eq!(out.status.code(), Some(0));
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.as_array().map(Vec::len), Some(2));
    assert_eq!(rows[1]["block_size"], 5);
}

#[test]
fn quote_for_other_code_is_refused() {
    let s = Stack::new(1, StackConfig::default()).unwrap();
    let quote = s.operator.quote().unwrap();
    quote.verify(s.vendor.public(), &s.measurement()).unwrap();
    assert!(matches!(quote.verify(s.vendor.public(), &hash(b"other code")), Err(QuoteError::Measurement { .. })));
}
