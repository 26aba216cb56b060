//! Client-side flows against an honest or misbehaving operator: receipts,
//! attestation and censorship escalation.

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;

use vledger_core::chain::Chain;
use vledger_core::client::{Client, ClientError, Confidence, ReceiptError, Resolution};
use vledger_core::codec::Canonical;
use vledger_core::crypto::{Digest, KeyPair, Scheme};
use vledger_core::enclave::{measurement, EnclaveConfig, TeeVendor};
use vledger_core::ledger::CensStatus;
use vledger_core::operator::{genesis_state, Behavior, MemBlockStore, Operator, OperatorConfig};
use vledger_core::vm::{AccountState, Transaction, VmConfig, MAX_PAYLOAD};

struct Net {
    rng: ChaCha20Rng,
    vendor: TeeVendor,
    config: EnclaveConfig,
    chain: Chain,
    op: Operator,
    clients: Vec<Client>,
}

fn net(seed: u64, block_threshold: u64) -> Net {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let vendor = TeeVendor::new(&mut rng);
    let mut platform = vendor.provision(&mut rng);
    let users: Vec<KeyPair> = (0..3).map(|_| KeyPair::generate(Scheme::Pb, &mut rng)).collect();
    let genesis: Vec<(Digest, u64)> = users.iter().map(|u| (u.public().account_id(), 1_000)).collect();
    let config = EnclaveConfig { genesis_root: genesis_state(&genesis).unwrap().root(), vm: VmConfig::default() };
    let enclave = platform.launch(config);
    let cfg = OperatorConfig { tx_threshold: 1, tx_timeout_ms: 100, block_threshold, block_timeout_ms: 100_000 };
    let mut chain = Chain::new(0);
    let op_keys = KeyPair::generate(Scheme::Pb, &mut rng);
    let op = Operator::init(op_keys, cfg, enclave, genesis, MemBlockStore::new(), &mut chain).unwrap();
    let m = measurement(&config);
    let clients = users
        .into_iter()
        .map(|k| Client::new(k, op.contract(), vendor.public().clone(), m, ChaCha20Rng::seed_from_u64(rng_seed(&mut rng))))
        .collect();
    let mut n = Net { rng, vendor, config, chain, op, clients };
    for i in 0..n.clients.len() {
        n.attest(i).unwrap();
        let ticket = n.op.register_client(n.clients[i].public(), 1_000).unwrap();
        n.clients[i].set_ticket(ticket);
    }
    n
}

fn rng_seed(rng: &mut ChaCha20Rng) -> u64 {
    rand_core::RngCore::next_u64(rng)
}

impl Net {
    fn attest(&mut self, i: usize) -> Result<(), ClientError> {
        let q = self.op.quote().unwrap();
        self.clients[i].attest(&q, &self.chain)
    }

    fn pay(&mut self, from: usize, to: usize, amount: u64) -> Transaction {
        let to = self.clients[to].account();
        self.clients[from].transfer(to, amount).unwrap()
    }

    fn settle(&mut self) {
        for _ in 0..4 {
            self.op.advance(0, &mut self.chain).unwrap();
        }
    }

    fn index(&self, i: usize, h: &Digest) -> u64 {
        self.clients[i].request_index(&self.chain, h).unwrap().expect("confirmed")
    }
}

#[test]
fn transfer_receipt_is_a_promise_then_anchored() {
    let mut n = net(1, 100);
    let tx = n.pay(0, 1, 25);
    n.op.submit_tx(tx.clone(), &mut n.chain).unwrap();
    let b = n.op.get_receipt(&tx.id()).unwrap();
    assert_eq!(n.clients[0].verify_receipt(&b, &tx, &n.chain), Ok(Confidence::Promise));

    n.op.sync(&mut n.chain).unwrap();
    let b = n.op.get_receipt(&tx.id()).unwrap();
    assert_eq!(n.clients[2].verify_receipt(&b, &tx, &n.chain), Ok(Confidence::Anchored));
}

#[test]
fn nonces_increment_and_oversized_payloads_stay_local() {
    let mut n = net(2, 100);
    let a = n.pay(0, 1, 1);
    let b = n.pay(0, 1, 1);
    assert_eq!((a.nonce, b.nonce), (0, 1));
    let big = vec![0u8; MAX_PAYLOAD + 1];
    assert!(matches!(n.clients[0].deploy(big, 0), Err(ClientError::PayloadTooLarge(_))));
    assert_eq!(n.clients[0].nonce(), 2);
    n.op.submit_tx(a, &mut n.chain).unwrap();
    n.op.submit_tx(b, &mut n.chain).unwrap();
    let (acct, _) = n.op.get_account(&n.clients[1].account()).unwrap();
    assert_eq!(acct, Some(AccountState::with_balance(1_002)));
}

#[test]
fn receipt_for_another_tx_is_rejected() {
    let mut n = net(3, 100);
    let t1 = n.pay(0, 1, 1);
    let t2 = n.pay(0, 2, 1);
    n.op.submit_tx(t1.clone(), &mut n.chain).unwrap();
    n.op.submit_tx(t2.clone(), &mut n.chain).unwrap();
    let b = n.op.get_receipt(&t1.id()).unwrap();
    assert_eq!(n.clients[0].verify_receipt(&b, &t2, &n.chain), Err(ReceiptError::WrongTx));
}

#[test]
fn bundle_against_stale_root_is_rejected() {
    let mut n = net(4, 100);
    let t1 = n.pay(0, 1, 1);
    n.op.submit_tx(t1.clone(), &mut n.chain).unwrap();
    let old = n.op.get_receipt(&t1.id()).unwrap();
    let t2 = n.pay(0, 1, 1);
    n.op.submit_tx(t2, &mut n.chain).unwrap();
    n.op.sync(&mut n.chain).unwrap();
    assert_eq!(n.clients[0].verify_receipt(&old, &t1, &n.chain), Err(ReceiptError::Signature));
    let mut forged = n.op.get_receipt(&t1.id()).unwrap();
    forged.lroot_cur.version -= 1;
    assert_eq!(n.clients[0].verify_receipt(&forged, &t1, &n.chain), Err(ReceiptError::NotAnchored));
}

#[test]
fn attestation_checks_measurement_and_follows_key_rotation() {
    let mut n = net(5, 100);
    let q = n.op.quote().unwrap();
    let mut stranger = Client::new(
        KeyPair::generate(Scheme::Pb, &mut n.rng),
        n.op.contract(),
        n.vendor.public().clone(),
        Digest::new([7; 32]),
        ChaCha20Rng::seed_from_u64(9),
    );
    assert!(matches!(stranger.attest(&q, &n.chain), Err(ClientError::Attestation(_))));

    let tx = n.pay(0, 1, 3);
    n.op.submit_tx(tx.clone(), &mut n.chain).unwrap();
    n.op.kill_enclave();
    let mut platform = n.vendor.provision(&mut n.rng);
    let fresh = platform.launch(n.config);
    n.op.restore_enclave(fresh, &mut n.chain).unwrap();
    let b = n.op.get_receipt(&tx.id()).unwrap();
    assert_eq!(n.clients[0].verify_receipt(&b, &tx, &n.chain), Err(ReceiptError::StaleKeys));
    assert!(stranger.attest(&n.op.quote().unwrap(), &n.chain).is_err());
    n.attest(0).unwrap();
    assert_eq!(n.clients[0].verify_receipt(&b, &tx, &n.chain), Ok(Confidence::Anchored));
}

#[test]
fn censored_tx_is_included_through_the_contract() {
    let mut n = net(6, 1);
    n.op.set_behavior(Behavior { drop_client_txs: true, ignore_chain_requests: false });
    let tx = n.pay(0, 1, 40);
    n.op.submit_tx(tx.clone(), &mut n.chain).unwrap();
    assert!(n.op.get_receipt(&tx.id()).is_err());

    let h = n.clients[0].escalate_tx(&tx, &mut n.chain).unwrap();
    let idx = n.index(0, &h);
    assert!(matches!(n.clients[0].check_resolution(&n.chain, idx), Ok(Resolution::Pending(_))));
    n.settle();
    let r = n.clients[0].check_resolution(&n.chain, idx).unwrap();
    assert_eq!(r, Resolution::Resolved { status: CensStatus::Included, data: None });
    let b = n.op.get_receipt(&tx.id()).unwrap();
    assert_eq!(n.clients[0].verify_receipt(&b, &tx, &n.chain), Ok(Confidence::Anchored));
}

#[test]
fn garbage_escalation_resolves_as_parsing_error() {
    let mut n = net(7, 1);
    let h = n.clients[1].escalate_raw_tx(vec![1, 2, 3], &mut n.chain).unwrap();
    n.settle();
    let idx = n.index(1, &h);
    let r = n.clients[1].check_resolution(&n.chain, idx).unwrap();
    assert_eq!(r, Resolution::Resolved { status: CensStatus::ParsingError, data: None });
}

#[test]
fn read_tx_query_returns_the_original_tx() {
    let mut n = net(8, 1);
    let tx = n.pay(0, 2, 5);
    n.op.submit_tx(tx.clone(), &mut n.chain).unwrap();
    let q = n.clients[1].read_tx_query(tx.id(), 1);
    let h = n.clients[1].escalate_query(&q, &mut n.chain).unwrap();
    n.settle();
    let r = n.clients[1].check_resolution(&n.chain, n.index(1, &h)).unwrap();
    let Resolution::Resolved { status: CensStatus::Ok, data: Some(bytes) } = r else { panic!("{r:?}") };
    assert_eq!(Transaction::decode(&bytes).unwrap(), tx);

    let q = n.clients[1].read_tx_query(Digest::new([3; 32]), 1);
    let h = n.clients[1].escalate_query(&q, &mut n.chain).unwrap();
    n.settle();
    let r = n.clients[1].check_resolution(&n.chain, n.index(1, &h)).unwrap();
    assert_eq!(r, Resolution::Resolved { status: CensStatus::TxNotFound, data: None });
}

#[test]
fn read_account_query_for_absent_account() {
    let mut n = net(9, 1);
    let q = n.clients[0].read_account_query(Digest::new([5; 32]));
    let h = n.clients[0].escalate_query(&q, &mut n.chain).unwrap();
    n.settle();
    let r = n.clients[0].check_resolution(&n.chain, n.index(0, &h)).unwrap();
    assert_eq!(r, Resolution::Resolved { status: CensStatus::NotFound, data: None });
}

#[test]
fn deadbeat_operator_leaves_public_evidence() {
    let mut n = net(10, 1);
    n.op.set_behavior(Behavior { drop_client_txs: true, ignore_chain_requests: true });
    let q = n.clients[0].read_account_query(n.clients[1].account());
    let h = n.clients[0].escalate_query(&q, &mut n.chain).unwrap();
    for _ in 0..10 {
        n.chain.tick();
        n.op.advance(50, &mut n.chain).unwrap();
    }
    let idx = n.index(0, &h);
    let Resolution::Pending(ev) = n.clients[0].check_resolution(&n.chain, idx).unwrap() else { panic!() };
    assert_eq!((ev.request_index, ev.now - ev.submitted_at), (idx, 10));
    assert_eq!(ev.contract, n.op.contract());
}

#[test]
fn expired_ticket_reverts() {
    let mut n = net(11, 1);
    let ticket = n.op.register_client(n.clients[0].public(), 2).unwrap();
    n.clients[0].set_ticket(ticket);
    n.chain.tick();
    n.chain.tick();
    let q = n.clients[0].read_account_query(Digest::ZERO);
    let h = n.clients[0].escalate_query(&q, &mut n.chain).unwrap();
    assert!(matches!(n.clients[0].request_index(&n.chain, &h), Err(ClientError::Reverted(_))));
}
