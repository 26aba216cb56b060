use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vledger_cli::bench::{format_table, run_bench, BenchParams, TxKind};
use vledger_cli::demo::{self, CENSORSHIP, FAILOVER, TAMPER};
use vledger_cli::scenario::{run_scenario, Report, Scenario};
use vledger_cli::stack::StackConfig;

#[derive(Parser)]
#[command(name = "vledger", version, about = "Verifiable ledger with an attested executor and on-chain anchoring")]
struct Cli {
    /// Seed for every random choice; scenarios fall back to their own seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the JSON report here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deploy a fresh ledger and print what it publishes.
    Init {
        #[arg(long, default_value_t = 4)]
        accounts: usize,
    },
    /// Run a JSON scenario file, or all bundled scenarios with `--bundled`.
    RunScenario {
        #[arg(required_unless_present = "bundled")]
        file: Option<PathBuf>,
        #[arg(long, conflicts_with = "file")]
        bundled: bool,
    },
    /// Measure throughput over block size, state size and transaction kind.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [1, 10, 100, 1000])]
        block_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1000, 10000])]
        accounts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["payment", "contract"])]
        kind: Vec<TxKind>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 1000)]
        txs: usize,
    },
    /// Censored transactions and queries resolved through the contract.
    CensorDemo,
    /// Altered blocks are caught by clients and by enclave restore.
    TamperDemo,
    /// Enclave loss and restore on a new platform.
    FailoverDemo,
}

fn emit(out: Option<&PathBuf>, json: &str) -> Result<(), String> {
    match out {
        Some(p) => fs::write(p, format!("{json}\n")).map_err(|e| format!("cannot write {}: {e}", p.display())),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

/// Prints the transcript and summary to stderr when the JSON goes to
/// stdout, so stdout stays machine-readable.
fn narrate(report: &Report, to_stdout: bool) {
    let text = format!("{}\n{}", report.transcript.join("\n"), report.summary());
    if to_stdout {
        eprintln!("{text}");
    } else {
        println!("{text}");
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    let out = cli.out.as_ref();
    match cli.command {
        Command::Init { accounts } => {
            let config = StackConfig { accounts, actors: accounts.min(4), ..StackConfig::default() };
            let d = demo::init(cli.seed.unwrap_or(0), config).map_err(|e| e.to_string())?;
            emit(out, &serde_json::to_string_pretty(&d).expect("serializes"))?;
            Ok(true)
        }
        Command::RunScenario { file, bundled } => {
            if bundled {
                let suite = demo::run_suite(cli.seed).map_err(|e| e.to_string())?;
                for r in &suite.reports {
                    eprint!("{}", r.summary());
                }
                emit(out, &suite.to_json())?;
                return Ok(suite.passed);
            }
            let path = file.expect("clap requires a file");
            let text = fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            let scenario = Scenario::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            let report = run_scenario(&scenario, cli.seed).map_err(|e| e.to_string())?;
            eprint!("{}", report.summary());
            emit(out, &report.to_json())?;
            Ok(report.passed)
        }
        Command::Bench { block_sizes, accounts, kind, runs, txs } => {
            let params = BenchParams {
                block_sizes,
                accounts,
                kinds: kind,
                runs: runs.max(1),
                txs_per_run: txs,
                seed: cli.seed.unwrap_or(0),
            };
            let rows = run_bench(&params, |r| {
                eprintln!(
                    "block {:>5} accounts {:>6} {:<8} {:>10.1} tx/s (std {:.1})",
                    r.block_size, r.accounts, r.kind, r.tps_mean, r.tps_std
                )
            })
            .map_err(|e| e.to_string())?;
            eprint!("{}", format_table(&rows));
            emit(out, &serde_json::to_string_pretty(&rows).expect("serializes"))?;
            Ok(true)
        }
        Command::CensorDemo | Command::TamperDemo | Command::FailoverDemo => {
            let text = match cli.command {
                Command::CensorDemo => CENSORSHIP,
                Command::TamperDemo => TAMPER,
                _ => FAILOVER,
            };
            let report = demo::demo(text, cli.seed).map_err(|e| e.to_string())?;
            narrate(&report, out.is_none());
            emit(out, &report.to_json())?;
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
