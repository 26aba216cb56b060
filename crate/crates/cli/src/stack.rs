//! A complete in-process deployment: attestation vendor, enclave platform,
//! simulated chain, operator and keyed client actors, all derived from one
//! seed.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use vledger_core::chain::Chain;
use vledger_core::client::Client;
use vledger_core::crypto::{hash_parts, Digest, KeyPair, Scheme};
use vledger_core::enclave::{measurement, EnclaveConfig, TeePlatform, TeeVendor};
use vledger_core::operator::{genesis_state, MemBlockStore, Operator, OperatorConfig, OperatorError};
use vledger_core::vm::VmConfig;

/// Deployment parameters shared by scenarios, demos and the benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    pub operator: OperatorConfig,
    /// Chain blocks between submitting a chain transaction and its effect.
    pub chain_delay: u64,
    /// Client actors with key pairs; they are the first genesis accounts.
    pub actors: usize,
    /// Total genesis accounts. Accounts beyond the actors have no keys and
    /// only fill the state.
    pub accounts: usize,
    pub initial_balance: u64,
    /// Chain height until which client access tickets stay valid.
    pub ticket_expiry: u64,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            operator: OperatorConfig::default(),
            chain_delay: 0,
            actors: 4,
            accounts: 4,
            initial_balance: 1_000_000,
            ticket_expiry: 1_000_000,
        }
    }
}

/// Id of the `i`-th keyless genesis account.
pub fn filler_account(i: usize) -> Digest {
    hash_parts(&[b"filler", &(i as u64).to_be_bytes()])
}

pub struct Stack {
    /// Drives workloads. Platform provisioning has its own generator so a
    /// failover does not shift the workload of a twin run.
    pub rng: ChaCha20Rng,
    tee_rng: ChaCha20Rng,
    pub config: StackConfig,
    pub vendor: TeeVendor,
    pub enclave_config: EnclaveConfig,
    pub platforms: Vec<TeePlatform>,
    pub chain: Chain,
    pub operator: Operator,
    pub operator_keys: KeyPair,
    pub clients: Vec<Client>,
    pub fillers: Vec<Digest>,
}

impl Stack {
    pub fn new(seed: u64, config: StackConfig) -> Result<Self, OperatorError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut tee_rng = ChaCha20Rng::seed_from_u64(rng.next_u64());
        let vendor = TeeVendor::new(&mut tee_rng);
        let mut platform = vendor.provision(&mut tee_rng);
        let keys: Vec<KeyPair> = (0..config.actors).map(|_| KeyPair::generate(Scheme::Pb, &mut rng)).collect();
        let fillers: Vec<Digest> = (0..config.accounts.saturating_sub(config.actors)).map(filler_account).collect();
        let genesis: Vec<(Digest, u64)> = keys
            .iter()
            .map(|k| k.public().account_id())
            .chain(fillers.iter().copied())
            .map(|id| (id, config.initial_balance))
            .collect();
        let enclave_config = EnclaveConfig { genesis_root: genesis_state(&genesis)?.root(), vm: VmConfig::default() };
        let enclave = platform.launch(enclave_config);
        let operator_keys = KeyPair::generate(Scheme::Pb, &mut rng);
        let mut chain = Chain::new(config.chain_delay);
        let operator = Operator::init(
            operator_keys.clone(),
            config.operator,
            enclave,
            genesis,
            MemBlockStore::new(),
            &mut chain,
        )?;
        let m = measurement(&enclave_config);
        let clients = keys
            .into_iter()
            .map(|k| {
                let crng = ChaCha20Rng::seed_from_u64(rng.next_u64());
                Client::new(k, operator.contract(), vendor.public().clone(), m, crng)
            })
            .collect();
        let mut stack = Stack {
            rng,
            tee_rng,
            config,
            vendor,
            enclave_config,
            platforms: vec![platform],
            chain,
            operator,
            operator_keys,
            clients,
            fillers,
        };
        stack.onboard_clients()?;
        Ok(stack)
    }

    /// Attests the enclave for every client and issues fresh access tickets.
    pub fn onboard_clients(&mut self) -> Result<(), OperatorError> {
        let quote = self.operator.quote()?;
        for c in &mut self.clients {
            c.attest(&quote, &self.chain)
                .map_err(|e| OperatorError::Diverged(format!("attestation failed: {e}")))?;
            let ticket = self.operator.register_client(c.public(), self.config.ticket_expiry)?;
            c.set_ticket(ticket);
        }
        Ok(())
    }

    pub fn measurement(&self) -> Digest {
        measurement(&self.enclave_config)
    }

    /// Lets pending chain transactions confirm and the operator react to
    /// them, without advancing the operator's clock.
    pub fn settle(&mut self) -> Result<(), OperatorError> {
        let rounds = 2 * (self.chain.delay() + 1) + 2;
        for _ in 0..rounds {
            self.operator.advance(0, &mut self.chain)?;
            self.chain.tick();
        }
        self.operator.advance(0, &mut self.chain)
    }

    /// Anchors everything executed so far and waits for confirmation.
    pub fn sync(&mut self) -> Result<(), OperatorError> {
        self.settle()?;
        self.operator.sync(&mut self.chain)?;
        self.settle()
    }

    /// Replaces the enclave with one launched on a newly provisioned
    /// platform and re-onboards the clients.
    pub fn restore(&mut self) -> Result<(), OperatorError> {
        let mut platform = self.vendor.provision(&mut self.tee_rng);
        let fresh = platform.launch(self.enclave_config);
        self.platforms.push(platform);
        self.operator.restore_enclave(fresh, &mut self.chain)?;
        self.settle()?;
        self.onboard_clients()
    }

    /// Root currently anchored in the contract.
    pub fn anchored(&self) -> vledger_core::history::Commitment {
        self.chain
            .contract(&self.operator.contract())
            .expect("the operator deployed its contract")
            .lroot_pb
    }
}
