//! Bundled scenarios, the demo commands built on them, and deployment info.

use serde::{Deserialize, Serialize};

use vledger_core::crypto::{Digest, PublicKey};
use vledger_core::history::Commitment;
use vledger_core::operator::OperatorError;

use crate::scenario::{run_scenario, Report, Scenario, ScenarioError};
use crate::stack::{Stack, StackConfig};

pub const HAPPY_PATH: &str = include_str!("../scenarios/happy-path.json");
pub const CENSORSHIP: &str = include_str!("../scenarios/censorship.json");
pub const TAMPER: &str = include_str!("../scenarios/tamper.json");
pub const FAILOVER: &str = include_str!("../scenarios/failover.json");

/// Every bundled scenario, in suite order.
pub const BUNDLED: [&str; 4] = [HAPPY_PATH, CENSORSHIP, TAMPER, FAILOVER];

pub fn bundled() -> Vec<Scenario> {
    BUNDLED.iter().map(|s| Scenario::parse(s).expect("bundled scenarios parse")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: Option<u64>,
    pub passed: bool,
    pub reports: Vec<Report>,
}

impl SuiteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Runs all bundled scenarios. `seed` overrides each scenario's own seed.
pub fn run_suite(seed: Option<u64>) -> Result<SuiteReport, ScenarioError> {
    let reports = bundled().iter().map(|s| run_scenario(s, seed)).collect::<Result<Vec<_>, _>>()?;
    Ok(SuiteReport { seed, passed: reports.iter().all(|r| r.passed), reports })
}

/// Runs one bundled scenario as a narrated demo.
pub fn demo(text: &str, seed: Option<u64>) -> Result<Report, ScenarioError> {
    run_scenario(&Scenario::parse(text).expect("bundled scenarios parse"), seed)
}

/// What a fresh deployment publishes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deployment {
    pub seed: u64,
    pub contract: Digest,
    pub operator: PublicKey,
    pub enclave_measurement: Digest,
    pub enclave_pb_key: PublicKey,
    pub enclave_tee_key: PublicKey,
    pub attestation_root: PublicKey,
    pub genesis_state_root: Digest,
    pub genesis_accounts: usize,
    pub anchored: Commitment,
}

pub fn init(seed: u64, config: StackConfig) -> Result<Deployment, OperatorError> {
    let stack = Stack::new(seed, config)?;
    let quote = stack.operator.quote()?;
    Ok(Deployment {
        seed,
        contract: stack.operator.contract(),
        operator: stack.operator.public_key().clone(),
        enclave_measurement: quote.measurement,
        enclave_pb_key: quote.pb_key,
        enclave_tee_key: quote.tee_key,
        attestation_root: stack.vendor.public().clone(),
        genesis_state_root: stack.enclave_config.genesis_root,
        genesis_accounts: stack.config.accounts.max(stack.config.actors),
        anchored: stack.anchored(),
    })
}
