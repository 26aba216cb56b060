//! Throughput of the operator and enclave pipeline over block size, state
//! size and transaction kind.
//!
//! Each run builds a fresh deployment, pre-signs the workload and then times
//! only the operator turning transactions into executed, stored blocks.
//! Anchoring is left out so the figures isolate execution.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use vledger_core::crypto::Digest;
use vledger_core::operator::{OperatorConfig, OperatorError};
use vledger_core::vm::interp::counter_contract;
use vledger_core::vm::{contract_address, Transaction};

use crate::stack::{Stack, StackConfig};

/// Signing actors in a benchmark deployment.
pub const SENDERS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxKind {
    Payment,
    Contract,
}

impl fmt::Display for TxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TxKind::Payment => "payment",
            TxKind::Contract => "contract",
        })
    }
}

impl FromStr for TxKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "payment" => Ok(TxKind::Payment),
            "contract" => Ok(TxKind::Contract),
            other => Err(format!("unknown tx kind {other:?}; expected payment or contract")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchParams {
    pub block_sizes: Vec<usize>,
    pub accounts: Vec<usize>,
    pub kinds: Vec<TxKind>,
    /// Timed runs per grid point, after one discarded warm-up run.
    pub runs: usize,
    pub txs_per_run: usize,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            block_sizes: vec![1, 10, 100, 1000],
            accounts: vec![1_000, 10_000],
            kinds: vec![TxKind::Payment, TxKind::Contract],
            runs: 10,
            txs_per_run: 1_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub block_size: usize,
    pub accounts: usize,
    pub kind: TxKind,
    pub tps_mean: f64,
    pub tps_std: f64,
    pub runs: usize,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn workload(stack: &mut Stack, kind: TxKind, n: usize) -> Result<Vec<Transaction>, OperatorError> {
    let senders = stack.clients.len();
    let targets: Vec<Digest> = match kind {
        TxKind::Payment => stack.clients.iter().map(|c| c.account()).chain(stack.fillers.iter().copied()).collect(),
        TxKind::Contract => {
            // One counter per sender, deployed and executed before timing.
            let mut addresses = Vec::with_capacity(senders);
            for i in 0..senders {
                let tx = stack.clients[i].deploy(counter_contract(), 0).expect("static code fits");
                addresses.push(contract_address(&tx.sender, tx.nonce));
                stack.operator.submit_tx(tx, &mut stack.chain)?;
            }
            while stack.operator.pending_count() > 0 {
                stack.operator.cut_block(&mut stack.chain)?;
            }
            addresses
        }
    };
    let mut txs = Vec::with_capacity(n);
    for i in 0..n {
        let target = targets[stack.rng.gen_range(0..targets.len())];
        let c = &mut stack.clients[i % senders];
        let tx = match kind {
            TxKind::Payment => c.transfer(target, 1),
            TxKind::Contract => c.call(target, 0, Vec::new()),
        };
        txs.push(tx.expect("empty payloads fit"));
    }
    Ok(txs)
}

/// Transactions per second of one run.
pub fn run_once(block_size: usize, accounts: usize, kind: TxKind, txs: usize, seed: u64) -> Result<f64, OperatorError> {
    let config = StackConfig {
        operator: OperatorConfig {
            tx_threshold: block_size.max(1),
            tx_timeout_ms: u64::MAX,
            block_threshold: u64::MAX,
            block_timeout_ms: u64::MAX,
        },
        actors: SENDERS,
        accounts: accounts.max(SENDERS),
        ..StackConfig::default()
    };
    let mut stack = Stack::new(seed, config)?;
    let work = workload(&mut stack, kind, txs)?;
    let start = Instant::now();
    for tx in work {
        stack.operator.submit_tx(tx, &mut stack.chain)?;
    }
    while stack.operator.pending_count() > 0 {
        stack.operator.cut_block(&mut stack.chain)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(txs as f64 / elapsed)
}

pub fn measure(
    block_size: usize,
    accounts: usize,
    kind: TxKind,
    runs: usize,
    txs: usize,
    seed: u64,
) -> Result<BenchRow, OperatorError> {
    run_once(block_size, accounts, kind, txs.min(block_size.max(1) * 4), seed)?;
    let samples = (0..runs)
        .map(|r| run_once(block_size, accounts, kind, txs, seed.wrapping_add(r as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let (tps_mean, tps_std) = mean_std(&samples);
    Ok(BenchRow { block_size, accounts, kind, tps_mean, tps_std, runs })
}

/// Runs the full grid, calling `progress` after each row.
pub fn run_bench(params: &BenchParams, mut progress: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>, OperatorError> {
    let mut rows = Vec::new();
    for &kind in &params.kinds {
        for &accounts in &params.accounts {
            for &block_size in &params.block_sizes {
                let row = measure(block_size, accounts, kind, params.runs, params.txs_per_run, params.seed)?;
                progress(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>10} {:>9} {:>9} {:>12} {:>10} {:>5}\n", "block", "accounts", "kind", "tx/s mean", "std", "runs");
    for r in rows {
        s.push_str(&format!(
            "{:>10} {:>9} {:>9} {:>12.1} {:>10.1} {:>5}\n",
            r.block_size, r.accounts, r.kind, r.tps_mean, r.tps_std, r.runs
        ));
    }
    s
}
