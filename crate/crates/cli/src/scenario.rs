//! JSON scenario scripts and their deterministic runner.
//!
//! A scenario names a deployment configuration and an ordered list of steps.
//! Steps that drive the system record failures instead of aborting, so a
//! later `step-failed` assertion can expect them; only script mistakes such
//! as an unknown label stop the run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use vledger_core::chain::EventKind;
use vledger_core::client::{Confidence, Resolution};
use vledger_core::codec::Canonical;
use vledger_core::crypto::{hash_parts, Digest};
use vledger_core::history::Commitment;
use vledger_core::ledger::CensStatus;
use vledger_core::operator::{Behavior, OperatorError};
use vledger_core::vm::interp::counter_contract;
use vledger_core::vm::{AccountState, Transaction};

use crate::stack::{Stack, StackConfig};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("setup failed: {0}")]
    Setup(OperatorError),
    #[error("step {index}: {message}")]
    Script { index: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Used when the caller does not pass a seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config: StackConfig,
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

fn yes() -> bool {
    true
}

fn one() -> u64 {
    1
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Step {
    /// Payments from actor `from` to actor `to`, handed to the operator.
    Submit {
        from: usize,
        to: usize,
        #[serde(default = "one")]
        amount: u64,
        #[serde(default)]
        label: Option<String>,
        #[serde(default = "one_usize")]
        count: usize,
    },
    /// Deploys a counter contract; `label` names the contract.
    Deploy { from: usize, label: String },
    /// Calls a labelled contract.
    Call {
        from: usize,
        contract: String,
        #[serde(default)]
        label: Option<String>,
    },
    /// Advances the operator clock, firing due timeouts.
    Advance { ms: u64 },
    /// Mines chain blocks, letting the operator react after each one.
    Tick {
        #[serde(default = "one")]
        blocks: u64,
    },
    /// Cuts a block from the cached transactions right away.
    Cut,
    /// Anchors the ledger and waits for confirmation.
    Sync,
    /// Waits until outstanding chain transactions are handled.
    Settle,
    CensorOn {
        #[serde(default = "yes")]
        txs: bool,
        #[serde(default = "yes")]
        requests: bool,
    },
    CensorOff,
    KillEnclave,
    RestoreEnclave,
    /// Flips the low bit of one byte of a stored block. Negative offsets
    /// count from the end.
    Tamper { block: u64, byte: i64 },
    /// Re-attests the current enclave for one actor.
    Attest { actor: usize },
    /// Files a censorship request on chain; `label` names the request.
    Escalate { from: usize, label: String, request: Request },
    Assert { check: Check },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Request {
    /// A labelled transaction, encrypted to the enclave.
    Tx { tx: String },
    /// A labelled transaction with its signature broken.
    BadSignature { tx: String },
    /// Bytes that do not decrypt.
    Garbage,
    ReadTx { tx: String, block: u64 },
    ReadAccount { account: AccountRef },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AccountRef {
    Actor(usize),
    Id(Digest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Check {
    /// Fetches the receipt bundle of a labelled transaction and verifies it
    /// as `actor`.
    Receipt {
        tx: String,
        #[serde(default)]
        actor: usize,
        #[serde(default = "yes")]
        verifies: bool,
        #[serde(default)]
        confidence: Option<Confidence>,
    },
    /// Status of a labelled censorship request, `PENDING` while unanswered.
    Resolution { request: String, status: CensStatus },
    AnchoredVersion { equals: u64 },
    LedgerVersion { equals: u64 },
    Balance { actor: usize, equals: u64 },
    /// Number of enclave key pairs the contract has registered.
    KeyCount { equals: usize },
    /// Whether the previous non-assert step failed.
    StepFailed {
        #[serde(default = "yes")]
        failed: bool,
    },
    /// Whether the enclave dropped a labelled transaction as invalid.
    Rejected { tx: String },
    /// Full replay of the stored ledger from genesis.
    Audit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub step: usize,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalState {
    pub anchored: Commitment,
    pub ledger: Commitment,
    pub state_root: Digest,
    pub blocks: u64,
    pub enclave_keys: usize,
    pub chain_height: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSummary {
    pub height: u64,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub assertions: Vec<AssertionOutcome>,
    pub transcript: Vec<String>,
    pub final_state: FinalState,
    pub events: Vec<EventSummary>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Short human-readable account of the run.
    pub fn summary(&self) -> String {
        let ok = self.assertions.iter().filter(|a| a.passed).count();
        let mut s = format!(
            "scenario {} (seed {}): {}, {}/{} assertions passed\n",
            self.scenario,
            self.seed,
            if self.passed { "PASS" } else { "FAIL" },
            ok,
            self.assertions.len()
        );
        for a in &self.assertions {
            let mark = if a.passed { "ok  " } else { "FAIL" };
            s.push_str(&format!("  [{mark}] step {}: {} ({})\n", a.step, a.check, a.detail));
        }
        let f = &self.final_state;
        s.push_str(&format!(
            "  anchored v{} {}, ledger v{} {}, {} blocks, {} enclave key(s), chain height {}\n",
            f.anchored.version,
            short(&f.anchored.root),
            f.ledger.version,
            short(&f.ledger.root),
            f.blocks,
            f.enclave_keys,
            f.chain_height
        ));
        s
    }
}

fn short(d: &Digest) -> String {
    d.to_hex()[..12].to_string()
}

fn describe_event(kind: &EventKind) -> String {
    match kind {
        EventKind::Deployed { .. } => "deployed".into(),
        EventKind::RootAdvanced { from, to } => format!("root advanced v{} -> v{}", from.version, to.version),
        EventKind::TransitionRejected { from, to, anchored } => {
            format!("transition v{} -> v{} rejected at v{}", from.version, to.version, anchored.version)
        }
        EventKind::EnclaveReplaced { pb_key, .. } => format!("enclave replaced, key {}", hex::encode(&pb_key.bytes[..6])),
        EventKind::CensTxSubmitted { index, .. } => format!("censored tx #{index} submitted"),
        EventKind::CensQrySubmitted { index, .. } => format!("censored query #{index} submitted"),
        EventKind::CensTxResolved { index, status, .. } => format!("censored tx #{index} resolved {}", status.name()),
        EventKind::CensQryResolved { index, status, .. } => {
            format!("censored query #{index} resolved {}", status.name())
        }
    }
}

struct Escalation {
    actor: usize,
    chain_tx: Digest,
    tx: Option<Transaction>,
}

struct Runner {
    stack: Stack,
    txs: BTreeMap<String, Transaction>,
    contracts: BTreeMap<String, Digest>,
    requests: BTreeMap<String, Escalation>,
    last_failed: Option<String>,
    transcript: Vec<String>,
    assertions: Vec<AssertionOutcome>,
}

/// Runs `scenario` against a fresh stack. `seed` overrides the scenario's
/// own seed; without either the seed is 0.
pub fn run_scenario(scenario: &Scenario, seed: Option<u64>) -> Result<Report, ScenarioError> {
    let seed = seed.or(scenario.seed).unwrap_or(0);
    let stack = Stack::new(seed, scenario.config.clone()).map_err(ScenarioError::Setup)?;
    let mut r = Runner {
        transcript: vec![format!(
            "deployed contract {} with {} accounts; enclave measurement {}",
            short(&stack.operator.contract()),
            stack.config.accounts.max(stack.config.actors),
            short(&stack.measurement())
        )],
        stack,
        txs: BTreeMap::new(),
        contracts: BTreeMap::new(),
        requests: BTreeMap::new(),
        last_failed: None,
        assertions: Vec::new(),
    };
    for (index, step) in scenario.steps.iter().enumerate() {
        r.step(index, step).map_err(|message| ScenarioError::Script { index, message })?;
    }
    Ok(r.finish(scenario, seed))
}

type ScriptResult = Result<(), String>;

impl Runner {
    fn actor(&self, i: usize) -> Result<usize, String> {
        if i < self.stack.clients.len() {
            Ok(i)
        } else {
            Err(format!("actor {i} is not defined; the scenario has {}", self.stack.clients.len()))
        }
    }

    fn tx(&self, label: &str) -> Result<&Transaction, String> {
        self.txs.get(label).ok_or_else(|| format!("no transaction labelled {label:?}"))
    }

    fn remember(&mut self, label: Option<&String>, tx: &Transaction) -> ScriptResult {
        if let Some(l) = label {
            if self.txs.insert(l.clone(), tx.clone()).is_some() {
                return Err(format!("label {l:?} is used twice"));
            }
        }
        Ok(())
    }

    fn log(&mut self, line: String) {
        self.transcript.push(line);
    }

    /// Records the outcome of a step that drives the system.
    fn outcome(&mut self, what: &str, result: Result<(), OperatorError>) {
        match result {
            Ok(()) => {
                self.last_failed = None;
            }
            Err(e) => {
                self.log(format!("{what} failed: {e}"));
                self.last_failed = Some(e.to_string());
            }
        }
    }

    fn submit_tx(&mut self, tx: Transaction) -> Result<(), OperatorError> {
        let s = &mut self.stack;
        s.operator.submit_tx(tx, &mut s.chain).map(|_| ())
    }

    fn step(&mut self, index: usize, step: &Step) -> ScriptResult {
        match step {
            Step::Submit { from, to, amount, label, count } => {
                let (from, to) = (self.actor(*from)?, self.actor(*to)?);
                if *count > 1 && label.is_some() {
                    return Err("a label names a single transaction; use count 1".into());
                }
                let mut result = Ok(());
                for _ in 0..*count {
                    let dest = self.stack.clients[to].account();
                    let tx = self.stack.clients[from].transfer(dest, *amount).map_err(|e| e.to_string())?;
                    self.remember(label.as_ref(), &tx)?;
                    result = result.and(self.submit_tx(tx));
                }
                self.log(format!("actor {from} pays {amount} to actor {to} x{count}"));
                self.outcome("submit", result);
            }
            Step::Deploy { from, label } => {
                let from = self.actor(*from)?;
                let tx = self.stack.clients[from].deploy(counter_contract(), 0).map_err(|e| e.to_string())?;
                let address = vledger_core::vm::contract_address(&tx.sender, tx.nonce);
                if self.contracts.insert(label.clone(), address).is_some() {
                    return Err(format!("contract label {label:?} is used twice"));
                }
                self.remember(Some(label), &tx)?;
                self.log(format!("actor {from} deploys counter contract {label}"));
                let r = self.submit_tx(tx);
                self.outcome("deploy", r);
            }
            Step::Call { from, contract, label } => {
                let from = self.actor(*from)?;
                let address = *self.contracts.get(contract).ok_or_else(|| format!("no contract labelled {contract:?}"))?;
                let tx = self.stack.clients[from].call(address, 0, Vec::new()).map_err(|e| e.to_string())?;
                self.remember(label.as_ref(), &tx)?;
                self.log(format!("actor {from} calls {contract}"));
                let r = self.submit_tx(tx);
                self.outcome("call", r);
            }
            Step::Advance { ms } => {
                let s = &mut self.stack;
                let r = s.operator.advance(*ms, &mut s.chain);
                self.log(format!("clock +{ms} ms"));
                self.outcome("advance", r);
            }
            Step::Tick { blocks } => {
                let mut r = Ok(());
                for _ in 0..*blocks {
                    let s = &mut self.stack;
                    s.chain.tick();
                    r = r.and(s.operator.advance(0, &mut s.chain));
                }
                self.log(format!("chain +{blocks} block(s), height {}", self.stack.chain.height()));
                self.outcome("tick", r);
            }
            Step::Cut => {
                let s = &mut self.stack;
                let r = s.operator.cut_block(&mut s.chain).map(|_| ());
                self.log(format!("block cut, ledger v{}", self.stack.operator.lroot_cur().version));
                self.outcome("cut", r);
            }
            Step::Sync => {
                let r = self.stack.sync();
                self.log(format!("sync, anchored v{}", self.stack.anchored().version));
                self.outcome("sync", r);
            }
            Step::Settle => {
                let r = self.stack.settle();
                self.outcome("settle", r);
            }
            Step::CensorOn { txs, requests } => {
                self.stack.operator.set_behavior(Behavior { drop_client_txs: *txs, ignore_chain_requests: *requests });
                self.log(format!("operator starts censoring (txs: {txs}, chain requests: {requests})"));
                self.last_failed = None;
            }
            Step::CensorOff => {
                self.stack.operator.set_behavior(Behavior::default());
                self.log("operator stops censoring".into());
                self.last_failed = None;
            }
            Step::KillEnclave => {
                self.stack.operator.kill_enclave();
                self.log(format!(
                    "enclave lost with {} unsynced block(s)",
                    self.stack.operator.lroot_cur().version - self.stack.operator.lroot_pb().version
                ));
                self.last_failed = None;
            }
            Step::RestoreEnclave => {
                let r = self.stack.restore();
                if r.is_ok() {
                    self.log(format!(
                        "enclave restored on a new platform, ledger v{}, keys rotated",
                        self.stack.operator.lroot_cur().version
                    ));
                }
                self.outcome("restore", r);
            }
            Step::Tamper { block, byte } => {
                let store = self.stack.operator.store_mut();
                use vledger_core::operator::BlockStore;
                let mut raw = store
                    .get_raw(*block)
                    .map_err(|e| e.to_string())?
                    .ok_or_else(|| format!("block {block} does not exist"))?;
                let len = raw.len() as i64;
                let at = if *byte < 0 { len + byte } else { *byte };
                if !(0..len).contains(&at) {
                    return Err(format!("byte {byte} is outside block {block} of {len} bytes"));
                }
                raw[at as usize] ^= 1;
                store.put_raw(*block, &raw).map_err(|e| e.to_string())?;
                self.log(format!("stored block {block} tampered at byte {at}"));
                self.last_failed = None;
            }
            Step::Attest { actor } => {
                let a = self.actor(*actor)?;
                let r = self
                    .stack
                    .operator
                    .quote()
                    .and_then(|q| {
                        self.stack.clients[a]
                            .attest(&q, &self.stack.chain)
                            .map_err(|e| OperatorError::Diverged(e.to_string()))
                    });
                self.log(format!("actor {a} attests the enclave"));
                self.outcome("attest", r);
            }
            Step::Escalate { from, label, request } => self.escalate(*from, label, request)?,
            Step::Assert { check } => self.check(index, check)?,
        }
        Ok(())
    }

    fn escalate(&mut self, from: usize, label: &str, request: &Request) -> ScriptResult {
        let a = self.actor(from)?;
        if self.requests.contains_key(label) {
            return Err(format!("request label {label:?} is used twice"));
        }
        let mut tx = None;
        let s = &mut self.stack;
        let result = match request {
            Request::Tx { tx: l } => {
                let t = self.txs.get(l).ok_or_else(|| format!("no transaction labelled {l:?}"))?.clone();
                tx = Some(t.clone());
                s.clients[a].escalate_tx(&t, &mut s.chain)
            }
            Request::BadSignature { tx: l } => {
                let mut t = self.txs.get(l).ok_or_else(|| format!("no transaction labelled {l:?}"))?.clone();
                t.signature.bytes[10] ^= 1;
                s.clients[a].escalate_tx(&t, &mut s.chain)
            }
            Request::Garbage => {
                let junk = hash_parts(&[b"garbage", label.as_bytes()]).as_bytes().to_vec();
                s.clients[a].escalate_raw_tx(junk, &mut s.chain)
            }
            Request::ReadTx { tx: l, block } => {
                let t = self.txs.get(l).ok_or_else(|| format!("no transaction labelled {l:?}"))?.clone();
                let q = s.clients[a].read_tx_query(t.id(), *block);
                tx = Some(t);
                s.clients[a].escalate_query(&q, &mut s.chain)
            }
            Request::ReadAccount { account } => {
                let id = match account {
                    AccountRef::Actor(i) => {
                        let i = if *i < s.clients.len() { *i } else { return Err(format!("actor {i} is not defined")) };
                        s.clients[i].account()
                    }
                    AccountRef::Id(d) => *d,
                };
                let q = s.clients[a].read_account_query(id);
                s.clients[a].escalate_query(&q, &mut s.chain)
            }
        };
        let kind = match request {
            Request::Tx { .. } => "transaction",
            Request::BadSignature { .. } => "badly signed transaction",
            Request::Garbage => "garbage ciphertext",
            Request::ReadTx { .. } => "READ_TX query",
            Request::ReadAccount { .. } => "READ_AS query",
        };
        match result {
            Ok(chain_tx) => {
                self.requests.insert(label.to_string(), Escalation { actor: a, chain_tx, tx });
                self.log(format!("actor {a} escalates {kind} {label} on chain"));
                self.last_failed = None;
            }
            Err(e) => {
                self.log(format!("actor {a} cannot escalate {label}: {e}"));
                self.last_failed = Some(e.to_string());
            }
        }
        Ok(())
    }

    fn check(&mut self, step: usize, check: &Check) -> ScriptResult {
        let (name, passed, detail) = match check {
            Check::Receipt { tx, actor, verifies, confidence } => {
                let a = self.actor(*actor)?;
                let t = self.tx(tx)?;
                let got = match self.stack.operator.get_receipt(&t.id()) {
                    Err(e) => Err(format!("no bundle: {e}")),
                    Ok(b) => self.stack.clients[a].verify_receipt(&b, t, &self.stack.chain).map_err(|e| e.to_string()),
                };
                let passed = match (&got, verifies) {
                    (Ok(c), true) => confidence.is_none_or(|want| want == *c),
                    (Err(_), false) => true,
                    _ => false,
                };
                let detail = match got {
                    Ok(c) => format!("verified, {c:?}"),
                    Err(e) => format!("rejected: {e}"),
                };
                (format!("receipt of {tx} {}", if *verifies { "verifies" } else { "is rejected" }), passed, detail)
            }
            Check::Resolution { request, status } => {
                let e = self.requests.get(request).ok_or_else(|| format!("no request labelled {request:?}"))?;
                let client = &self.stack.clients[e.actor];
                let got = client
                    .request_index(&self.stack.chain, &e.chain_tx)
                    .and_then(|i| i.map_or(Ok(None), |i| client.check_resolution(&self.stack.chain, i).map(Some)));
                let (passed, detail) = match got {
                    Err(err) => (false, err.to_string()),
                    Ok(None) => (false, "request not yet confirmed on chain".into()),
                    Ok(Some(Resolution::Pending(ev))) => (
                        *status == CensStatus::Pending,
                        format!(
                            "pending since height {} (now {}), evidence for request #{}",
                            ev.submitted_at, ev.now, ev.request_index
                        ),
                    ),
                    Ok(Some(Resolution::Resolved { status: got, data })) => {
                        let data_ok = match (&data, &e.tx) {
                            (Some(bytes), Some(t)) => Transaction::decode(bytes).is_ok_and(|d| d == *t),
                            (Some(bytes), None) => AccountState::decode(bytes).is_ok(),
                            (None, _) => true,
                        };
                        let what = match &data {
                            Some(_) if e.tx.is_some() => ", returned tx matches",
                            Some(_) => ", account state decrypted",
                            None => "",
                        };
                        (got == *status && data_ok, format!("{}, enclave signature verified{what}", got.name()))
                    }
                };
                (format!("request {request} is {}", status.name()), passed, detail)
            }
            Check::AnchoredVersion { equals } => {
                let v = self.stack.anchored().version;
                (format!("anchored version is {equals}"), v == *equals, format!("v{v}"))
            }
            Check::LedgerVersion { equals } => {
                let v = self.stack.operator.lroot_cur().version;
                (format!("ledger version is {equals}"), v == *equals, format!("v{v}"))
            }
            Check::Balance { actor, equals } => {
                let a = self.actor(*actor)?;
                let id = self.stack.clients[a].account();
                let got = self.stack.operator.get_account(&id).map(|(acct, _)| acct.map_or(0, |s| s.balance));
                match got {
                    Ok(b) => (format!("actor {a} holds {equals}"), b == *equals, format!("balance {b}")),
                    Err(e) => (format!("actor {a} holds {equals}"), false, e.to_string()),
                }
            }
            Check::KeyCount { equals } => {
                let c = self.stack.chain.contract(&self.stack.operator.contract()).expect("deployed");
                let n = c.pb_keys.len();
                (format!("contract lists {equals} enclave key(s)"), n == *equals, format!("{n} key(s)"))
            }
            Check::StepFailed { failed } => {
                let detail = self.last_failed.clone().unwrap_or_else(|| "previous step succeeded".into());
                let name = if *failed { "previous step failed" } else { "previous step succeeded" };
                (name.to_string(), self.last_failed.is_some() == *failed, detail)
            }
            Check::Rejected { tx } => {
                let id = self.tx(tx)?.id();
                let r = self.stack.operator.was_rejected(&id);
                (format!("{tx} was rejected by the enclave"), r, format!("rejected: {r}"))
            }
            Check::Audit => match self.stack.operator.audit() {
                Ok(()) => ("ledger replays from genesis".to_string(), true, "consistent".into()),
                Err(e) => ("ledger replays from genesis".to_string(), false, e.to_string()),
            },
        };
        self.log(format!("assert {name}: {}", if passed { "ok" } else { "FAILED" }));
        self.assertions.push(AssertionOutcome { step, check: name, passed, detail });
        Ok(())
    }

    fn finish(self, scenario: &Scenario, seed: u64) -> Report {
        let s = &self.stack;
        let contract = s.operator.contract();
        let events = s
            .chain
            .events_since(0)
            .iter()
            .filter(|e| e.contract == contract)
            .map(|e| EventSummary { height: e.height, event: describe_event(&e.kind) })
            .collect();
        Report {
            scenario: scenario.name.clone(),
            seed,
            passed: self.assertions.iter().all(|a| a.passed),
            assertions: self.assertions,
            transcript: self.transcript,
            final_state: FinalState {
                anchored: s.anchored(),
                ledger: s.operator.lroot_cur(),
                state_root: s.operator.state_root(),
                blocks: s.operator.block_count(),
                enclave_keys: s.chain.contract(&contract).map_or(0, |c| c.pb_keys.len()),
                chain_height: s.chain.height(),
            },
            events,
        }
    }
}
