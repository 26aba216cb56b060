use super::*;
use crate::crypto::{decrypt_bytes, encrypt, hash, verify};
use crate::history::HistoryTree;
use crate::ledger::{cens_qry_message, cens_tx_message, placeholder_record, CensStatus, Query};
use crate::merkle::mk_proof;
use crate::mpt::{MemStore, Trie};
use crate::vm::{apply_txs, touched_accounts, AccountState, AccountStore};
use rand_core::SeedableRng;

/// Minimal honest operator: full state, history tree and block list.
struct Host {
    trie: Trie<MemStore>,
    ht: HistoryTree,
    blocks: Vec<Block>,
    vm: VmConfig,
}

impl ReplayHost for Host {
    fn header_proof(&mut self, index: u64, at: &Commitment) -> Result<MembershipProof, String> {
        self.ht.mem_proof(index, at).map_err(|e| e.to_string())
    }

    fn next_template(&mut self) -> Result<(IncrementalProof, Commitment), String> {
        Ok(self.ht.proof_template(placeholder_record()))
    }

    fn partial_state(&mut self, txs: &[Transaction]) -> Result<PartialState, String> {
        self.trie.extract(&touched_accounts(txs)).map_err(|e| e.to_string())
    }

    fn replay(&mut self, block: &Block) -> Result<Commitment, String> {
        apply_txs(&mut self.trie, &block.txs, &self.vm).map_err(|e| e.to_string())?;
        self.blocks.push(block.clone());
        Ok(self.ht.add(block.header.record()))
    }
}

impl Host {
    fn cycle(&mut self, e: &mut Enclave, txs: &[Transaction]) -> Result<ExecOutput, EnclaveError> {
        let (tpl, tmp) = self.next_template().unwrap();
        let ps = self.partial_state(txs).unwrap();
        let out = e.exec(txs, ps, tpl, tmp)?;
        self.trie.absorb(out.ps_new.clone());
        assert_eq!(self.trie.root(), out.block.header.st_root);
        assert_eq!(self.ht.add(out.block.header.record()), out.lroot_cur);
        self.blocks.push(out.block.clone());
        Ok(out)
    }

    /// Rolls the ledger and state back to `version`.
    fn rollback(&mut self, version: u64, genesis_root: Digest) {
        self.ht.truncate(version);
        self.blocks.truncate(version as usize);
        let root = self.blocks.last().map_or(genesis_root, |b| b.header.st_root);
        self.trie.set_root(root);
    }
}

struct World {
    rng: ChaCha20Rng,
    vendor: TeeVendor,
    platform: TeePlatform,
    config: EnclaveConfig,
    users: Vec<KeyPair>,
    host: Host,
}

fn world(seed: u64) -> World {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let vendor = TeeVendor::new(&mut rng);
    let platform = vendor.provision(&mut rng);
    let users: Vec<KeyPair> = (0..4).map(|_| KeyPair::generate(Scheme::Pb, &mut rng)).collect();
    let mut trie = Trie::<MemStore>::new();
    for u in &users {
        trie.save(&u.public().account_id(), &AccountState::with_balance(1_000)).unwrap();
    }
    let config = EnclaveConfig { genesis_root: trie.root(), vm: VmConfig::default() };
    let host = Host { trie, ht: HistoryTree::new(), blocks: vec![], vm: config.vm };
    World { rng, vendor, platform, config, users, host }
}

impl World {
    fn enclave(&mut self) -> Enclave {
        let mut e = self.platform.launch(self.config);
        e.init().unwrap();
        e
    }

    fn pay(&self, from: usize, nonce: u64, to: usize, amount: u64) -> Transaction {
        Transaction::transfer(&self.users[from], nonce, self.users[to].public().account_id(), amount)
    }
}

#[test]
fn init_generates_two_keys_once() {
    let mut w = world(1);
    let mut e = w.platform.launch(w.config);
    assert!(matches!(e.lroot_cur(), Err(EnclaveError::NotInitialized)));
    let (tee, pb) = e.init().unwrap();
    assert_eq!(tee.scheme, Scheme::Tee);
    assert_eq!(pb.scheme, Scheme::Pb);
    assert_ne!(tee.bytes, pb.bytes);
    assert_eq!(e.lroot_cur().unwrap(), Commitment::genesis());
    assert_eq!(e.lroot_pb().unwrap(), Commitment::genesis());
    assert_eq!(e.id_cur().unwrap(), 1);
    assert!(matches!(e.init(), Err(EnclaveError::AlreadyInitialized)));
}

#[test]
fn quote_verifies_against_measurement() {
    let mut w = world(2);
    let e = w.enclave();
    let q = e.quote().unwrap();
    let m = measurement(&w.config);
    assert_eq!(q.measurement, m);
    q.verify_keys(w.vendor.public(), &m, e.tee_key().unwrap(), e.pb_key().unwrap()).unwrap();

    let other = EnclaveConfig { vm: VmConfig { step_budget: 1 }, ..w.config };
    assert!(matches!(
        q.verify(w.vendor.public(), &measurement(&other)),
        Err(QuoteError::Measurement { .. })
    ));
    let rogue = TeeVendor::new(&mut w.rng);
    assert_eq!(q.verify(rogue.public(), &m), Err(QuoteError::Certificate));
    let mut forged = q.clone();
    forged.tee_key = w.users[0].public().clone();
    assert_eq!(forged.verify(w.vendor.public(), &m), Err(QuoteError::Signature));
    let mut swapped = q.clone();
    swapped.measurement = measurement(&other);
    assert_eq!(swapped.verify(w.vendor.public(), &measurement(&other)), Err(QuoteError::Signature));
}

#[test]
fn first_block_signs_transition_from_genesis() {
    let mut w = world(3);
    let mut e = w.enclave();
    let tx = w.pay(0, 0, 1, 10);
    let out = w.host.cycle(&mut e, std::slice::from_ref(&tx)).unwrap();
    assert_eq!(out.block.header.id, 1);
    assert_eq!(out.lroot_pb, Commitment::genesis());
    assert_eq!(out.lroot_cur.version, 1);
    assert_eq!(out.block.txs, vec![tx]);
    assert!(verify(
        e.pb_key().unwrap(),
        &transition_message(&Commitment::genesis(), &out.lroot_cur),
        &out.signature
    ));
    // The ledger root is the tree over the header record alone.
    let mut ht = HistoryTree::new();
    assert_eq!(ht.add(out.block.header.record()), out.lroot_cur);
    assert_eq!(e.hdr_last().unwrap(), Some(out.block.header));
}

#[test]
fn rejected_transactions_are_reported() {
    let mut w = world(4);
    let mut e = w.enclave();
    let good = w.pay(0, 0, 1, 10);
    let mut bad = w.pay(1, 0, 0, 10);
    bad.amount = 11;
    let out = w.host.cycle(&mut e, &[good.clone(), bad.clone()]).unwrap();
    assert_eq!(out.block.txs, vec![good]);
    assert_eq!(out.rejected, vec![bad]);
    assert_eq!(out.block.check_consistency(), Ok(()));
}

#[test]
fn stale_partial_state_leaves_state_untouched() {
    let mut w = world(5);
    let mut e = w.enclave();
    let txs = [w.pay(0, 0, 1, 10)];
    let stale = w.host.partial_state(&txs).unwrap();
    w.host.cycle(&mut e, &txs).unwrap();
    let before = (e.lroot_cur().unwrap(), e.hdr_last().unwrap());
    let next = [w.pay(0, 1, 1, 10)];
    let (tpl, tmp) = w.host.next_template().unwrap();
    let err = e.exec(&next, stale, tpl, tmp).unwrap_err();
    assert!(matches!(err, EnclaveError::PartialState(MptError::RootMismatch { .. })));
    assert_eq!((e.lroot_cur().unwrap(), e.hdr_last().unwrap()), before);
}

#[test]
fn uncovered_partial_state_is_rejected() {
    let mut w = world(6);
    let mut e = w.enclave();
    let txs = [w.pay(0, 0, 1, 10)];
    let ps = w.host.trie.extract(&[w.users[0].public().account_id()]).unwrap();
    let (tpl, tmp) = w.host.next_template().unwrap();
    assert!(matches!(e.exec(&txs, ps, tpl, tmp), Err(EnclaveError::Vm(VmError::Uncovered(_)))));
    assert_eq!(e.lroot_cur().unwrap(), Commitment::genesis());
}

#[test]
fn bad_templates_are_rejected() {
    let mut w = world(7);
    let mut e = w.enclave();
    w.host.cycle(&mut e, &[w.pay(0, 0, 1, 1)]).unwrap();
    let txs = [w.pay(0, 1, 1, 1)];
    let before = e.lroot_cur().unwrap();

    // Template built over a different history.
    let mut other = HistoryTree::new();
    other.add(hash(b"forged"));
    let (tpl, tmp) = other.proof_template(placeholder_record());
    let ps = w.host.partial_state(&txs).unwrap();
    assert!(matches!(e.exec(&txs, ps, tpl, tmp), Err(EnclaveError::Template(_))));

    // Template that skips a version.
    let mut ahead = w.host.ht.clone();
    ahead.add(hash(b"extra"));
    let (tpl, tmp) = ahead.proof_template(placeholder_record());
    let ps = w.host.partial_state(&txs).unwrap();
    assert!(matches!(e.exec(&txs, ps, tpl, tmp), Err(EnclaveError::Template(_))));

    // Commitment that does not match the template.
    let (tpl, mut tmp) = w.host.next_template().unwrap();
    tmp.root = hash(b"wrong");
    let ps = w.host.partial_state(&txs).unwrap();
    assert!(matches!(e.exec(&txs, ps, tpl, tmp), Err(EnclaveError::Template(_))));
    assert_eq!(e.lroot_cur().unwrap(), before);
}

#[test]
fn anchored_root_is_pinned_until_flush() {
    let mut w = world(8);
    let mut e = w.enclave();
    let o1 = w.host.cycle(&mut e, &[w.pay(0, 0, 1, 1)]).unwrap();
    let o2 = w.host.cycle(&mut e, &[w.pay(0, 1, 1, 1)]).unwrap();
    assert_eq!(o2.lroot_pb, Commitment::genesis());
    assert!(verify(e.pb_key().unwrap(), &transition_message(&Commitment::genesis(), &o2.lroot_cur), &o2.signature));
    assert_ne!(o1.lroot_cur, o2.lroot_cur);

    e.flush().unwrap();
    assert_eq!(e.lroot_pb().unwrap(), o2.lroot_cur);
    e.flush().unwrap();
    assert_eq!(e.lroot_pb().unwrap(), o2.lroot_cur);

    let o3 = w.host.cycle(&mut e, &[]).unwrap();
    assert_eq!(o3.lroot_pb, o2.lroot_cur);
    assert_eq!(o3.block.header.id, 3);
    assert_eq!(o3.block.header.st_root, o2.block.header.st_root);
    assert!(verify(e.pb_key().unwrap(), &transition_message(&o2.lroot_cur, &o3.lroot_cur), &o3.signature));
}

#[test]
fn decrypt_round_trip_and_failures() {
    let mut w = world(9);
    let e = w.enclave();
    let ct = encrypt(e.pb_key().unwrap(), b"hello", &mut w.rng).unwrap().to_bytes();
    assert_eq!(e.decrypt(&ct).unwrap(), b"hello");
    let other = encrypt(w.users[0].public(), b"hello", &mut w.rng).unwrap().to_bytes();
    assert!(matches!(e.decrypt(&other), Err(EnclaveError::Decrypt(_))));
    let mut tampered = ct.clone();
    *tampered.last_mut().unwrap() ^= 1;
    assert!(matches!(e.decrypt(&tampered), Err(EnclaveError::Decrypt(_))));
}

#[test]
fn sign_tx_statuses() {
    let mut w = world(10);
    let mut e = w.enclave();
    let tx = w.pay(0, 0, 1, 5);
    let out = w.host.cycle(&mut e, std::slice::from_ref(&tx)).unwrap();
    let pk = e.pb_key().unwrap().clone();
    let etx = encrypt(&pk, &tx.encode(), &mut w.rng).unwrap().to_bytes();
    let txs: Vec<Vec<u8>> = out.block.txs.iter().map(Canonical::encode).collect();
    let ev = |at: &Commitment, host: &Host| TxEvidence {
        tx_proof: mk_proof(0, &txs).unwrap(),
        header: out.block.header,
        header_proof: host.ht.mem_proof(0, at).unwrap(),
    };

    // Not anchored yet: the enclave refuses to vouch for it.
    let cur = out.lroot_cur;
    assert!(matches!(e.sign_tx(&etx, Some(&ev(&cur, &w.host))), Err(EnclaveError::BadProof(_))));
    e.flush().unwrap();
    let (sig, status) = e.sign_tx(&etx, Some(&ev(&cur, &w.host))).unwrap();
    assert_eq!(status, CensStatus::Included);
    assert!(verify(&pk, &cens_tx_message(&hash(&etx), CensStatus::Included), &sig));
    assert!(matches!(e.sign_tx(&etx, None), Err(EnclaveError::BadProof(_))));

    // A different transaction cannot borrow the evidence.
    let other = w.pay(0, 1, 1, 5);
    let eother = encrypt(&pk, &other.encode(), &mut w.rng).unwrap().to_bytes();
    assert!(matches!(e.sign_tx(&eother, Some(&ev(&cur, &w.host))), Err(EnclaveError::BadProof(_))));

    let garbage = encrypt(&pk, b"not a transaction", &mut w.rng).unwrap().to_bytes();
    let (sig, status) = e.sign_tx(&garbage, None).unwrap();
    assert_eq!(status, CensStatus::ParsingError);
    assert!(verify(&pk, &cens_tx_message(&hash(&garbage), status), &sig));
    assert_eq!(e.sign_tx(b"junk", None).unwrap().1, CensStatus::ParsingError);

    let mut forged = w.pay(2, 0, 1, 5);
    forged.amount = 500;
    let eforged = encrypt(&pk, &forged.encode(), &mut w.rng).unwrap().to_bytes();
    let (sig, status) = e.sign_tx(&eforged, None).unwrap();
    assert_eq!(status, CensStatus::SignatureError);
    assert!(verify(&pk, &cens_tx_message(&hash(&eforged), status), &sig));
}

#[test]
fn sign_qry_tx_statuses() {
    let mut w = world(11);
    let mut e = w.enclave();
    let tx = w.pay(0, 0, 1, 5);
    let out = w.host.cycle(&mut e, std::slice::from_ref(&tx)).unwrap();
    e.flush().unwrap();
    w.host.cycle(&mut e, &[w.pay(0, 1, 1, 5)]).unwrap();
    let pk = e.pb_key().unwrap().clone();
    let client = &w.users[3];
    let anchored = e.lroot_pb().unwrap();
    let proof = w.host.ht.mem_proof(0, &anchored).unwrap();

    let ask = |q: Query, rng: &mut ChaCha20Rng| encrypt(&pk, &q.encode(), rng).unwrap().to_bytes();
    let check = |eq: &[u8], r: &QueryResolution| {
        let h = hash(r.edata.as_deref().unwrap_or_default());
        assert!(verify(&pk, &cens_qry_message(&hash(eq), r.status, &h), &r.signature));
    };

    let q = ask(Query::ReadTx { tx_id: tx.id(), block_id: 1, reply_to: client.public().clone() }, &mut w.rng);
    let r = e.sign_qry_tx(&q, Some(&out.block), Some(&proof)).unwrap();
    assert_eq!(r.status, CensStatus::Ok);
    check(&q, &r);
    assert_eq!(decrypt_bytes(client, r.edata.as_ref().unwrap()).unwrap(), tx.encode());

    let q = ask(Query::ReadTx { tx_id: hash(b"nope"), block_id: 1, reply_to: client.public().clone() }, &mut w.rng);
    let r = e.sign_qry_tx(&q, Some(&out.block), Some(&proof)).unwrap();
    assert_eq!(r.status, CensStatus::TxNotFound);
    assert_eq!(r.edata, None);
    check(&q, &r);

    // Block 2 exists but is not anchored yet.
    for id in [0, 2, 99] {
        let q = ask(Query::ReadTx { tx_id: tx.id(), block_id: id, reply_to: client.public().clone() }, &mut w.rng);
        let r = e.sign_qry_tx(&q, None, None).unwrap();
        assert_eq!(r.status, CensStatus::BlkNotFound);
        check(&q, &r);
    }

    let q = ask(Query::ReadTx { tx_id: tx.id(), block_id: 1, reply_to: client.public().clone() }, &mut w.rng);
    let mut altered = out.block.clone();
    altered.receipts[0].code = crate::vm::ReturnCode::Reverted;
    assert!(matches!(e.sign_qry_tx(&q, Some(&altered), Some(&proof)), Err(EnclaveError::Block(_))));
    let mut swapped = out.block.clone();
    swapped.header.st_root = hash(b"x");
    assert!(matches!(e.sign_qry_tx(&q, Some(&swapped), Some(&proof)), Err(EnclaveError::BadProof(_))));

    let wrong = ask(Query::ReadAs { account: hash(b"a"), reply_to: client.public().clone() }, &mut w.rng);
    assert!(matches!(e.sign_qry_tx(&wrong, None, None), Err(EnclaveError::WrongQueryKind)));
    let r = e.sign_qry_tx(b"garbage", None, None).unwrap();
    assert_eq!(r.status, CensStatus::ParsingError);
    check(b"garbage", &r);
}

#[test]
fn sign_qry_as_statuses() {
    let mut w = world(12);
    let mut e = w.enclave();
    w.host.cycle(&mut e, &[w.pay(0, 0, 1, 5)]).unwrap();
    let pk = e.pb_key().unwrap().clone();
    let client = &w.users[3];
    let present = w.users[1].public().account_id();
    let absent = hash(b"nobody");

    let q = encrypt(&pk, &Query::ReadAs { account: present, reply_to: client.public().clone() }.encode(), &mut w.rng)
        .unwrap()
        .to_bytes();
    let acct = w.host.trie.load(&present).unwrap().unwrap();
    assert_eq!(acct.balance, 1_005);
    let proof = w.host.trie.proof(&present).unwrap();
    let r = e.sign_qry_as(&q, Some(&acct), &proof).unwrap();
    assert_eq!(r.status, CensStatus::Ok);
    let plain = decrypt_bytes(client, r.edata.as_ref().unwrap()).unwrap();
    assert_eq!(AccountState::decode(&plain).unwrap(), acct);
    let h = hash(r.edata.as_ref().unwrap());
    assert!(verify(&pk, &cens_qry_message(&hash(&q), CensStatus::Ok, &h), &r.signature));

    let mut rich = acct.clone();
    rich.balance += 1;
    assert!(matches!(e.sign_qry_as(&q, Some(&rich), &proof), Err(EnclaveError::BadProof(_))));
    assert!(matches!(e.sign_qry_as(&q, None, &proof), Err(EnclaveError::BadProof(_))));

    let q = encrypt(&pk, &Query::ReadAs { account: absent, reply_to: client.public().clone() }.encode(), &mut w.rng)
        .unwrap()
        .to_bytes();
    let proof = w.host.trie.proof(&absent).unwrap();
    let r = e.sign_qry_as(&q, None, &proof).unwrap();
    assert_eq!(r.status, CensStatus::NotFound);
    assert!(verify(&pk, &cens_qry_message(&hash(&q), CensStatus::NotFound, &hash(b"")), &r.signature));
    assert!(matches!(e.sign_qry_as(&q, Some(&acct), &proof), Err(EnclaveError::BadProof(_))));
}

#[test]
fn seal_round_trip_and_failures() {
    let mut w = world(13);
    let mut e = w.enclave();
    w.host.cycle(&mut e, &[w.pay(0, 0, 1, 5)]).unwrap();
    e.flush().unwrap();
    let first = e.seal().unwrap();
    w.host.cycle(&mut e, &[w.pay(0, 1, 1, 5)]).unwrap();
    let blob = e.seal().unwrap();
    assert_eq!(&blob[..4], SEAL_MAGIC);
    assert_eq!(&blob[4..12], &2u64.to_be_bytes());

    let s = e.session.as_ref().unwrap();
    for secret in [s.pb.secret_bytes(), s.tee.secret_bytes()] {
        assert!(!blob.windows(32).any(|win| win == secret));
        assert!(!format!("{e:?}").contains(&hex::encode(secret)));
    }

    let mut restored = w.platform.launch(w.config);
    let report = restored.unseal(&blob).unwrap();
    assert_eq!(report, UnsealReport { counter: 2, stale: false });
    assert_eq!(restored.pb_key().unwrap(), e.pb_key().unwrap());
    assert_eq!(restored.lroot_cur().unwrap(), e.lroot_cur().unwrap());
    assert_eq!(restored.lroot_pb().unwrap(), e.lroot_pb().unwrap());
    assert_eq!(restored.hdr_last().unwrap(), e.hdr_last().unwrap());
    assert!(matches!(restored.unseal(&blob), Err(EnclaveError::AlreadyInitialized)));

    // Execution continues identically on the restored enclave.
    let next = [w.pay(0, 2, 1, 5)];
    let mut twin_host = Host { trie: w.host.trie.clone(), ht: w.host.ht.clone(), blocks: vec![], vm: w.config.vm };
    let a = w.host.cycle(&mut e, &next).unwrap();
    let b = twin_host.cycle(&mut restored, &next).unwrap();
    assert_eq!(a.lroot_cur, b.lroot_cur);
    assert_eq!(a.signature, b.signature);

    let mut old = w.platform.launch(w.config);
    assert!(old.unseal(&first).unwrap().stale);

    let mut other_platform = w.vendor.provision(&mut w.rng);
    let mut foreign = other_platform.launch(w.config);
    assert!(matches!(foreign.unseal(&blob), Err(EnclaveError::Seal(_))));
    let other_cfg = EnclaveConfig { vm: VmConfig { step_budget: 7 }, ..w.config };
    assert!(matches!(w.platform.launch(other_cfg).unseal(&blob), Err(EnclaveError::Seal(_))));

    for i in [0, 5, 20, blob.len() - 1] {
        let mut bad = blob.clone();
        bad[i] ^= 0x80;
        assert!(w.platform.launch(w.config).unseal(&bad).is_err(), "byte {i}");
    }
    assert!(w.platform.launch(w.config).unseal(&blob[..30]).is_err());
}

/// Runs `blocks` blocks of two payments each, syncing after `synced`.
fn run(w: &mut World, e: &mut Enclave, blocks: u64, synced: u64) -> Vec<ExecOutput> {
    let mut outs = Vec::new();
    for b in 0..blocks {
        let txs = [w.pay(0, b, 1, 3), w.pay(2, b, 3, 4)];
        outs.push(w.host.cycle(e, &txs).unwrap());
        if b + 1 == synced {
            e.flush().unwrap();
        }
    }
    outs
}

#[test]
fn reinit_reproduces_uninterrupted_run() {
    for unsynced in [0u64, 1, 2, 3] {
        let synced = 2;
        let mut twin = world(14);
        let mut te = twin.enclave();
        let expected = run(&mut twin, &mut te, synced + unsynced, synced).last().unwrap().lroot_cur;

        let mut w = world(14);
        let mut e = w.enclave();
        run(&mut w, &mut e, synced + unsynced, synced);
        let anchored = e.lroot_pb().unwrap();
        let old_keys = e.pb_key().unwrap().clone();
        drop(e);

        let unsynced_blocks = w.host.blocks[synced as usize..].to_vec();
        let hdr_sync = w.host.blocks[synced as usize - 1].header;
        w.host.rollback(anchored.version, w.config.genesis_root);
        let mut fresh_platform = w.vendor.provision(&mut w.rng);
        let mut e2 = fresh_platform.launch(w.config);
        let out = e2.reinit(anchored, &unsynced_blocks, Some(hdr_sync), &mut w.host).unwrap();
        assert_eq!(out.lroot_pb, anchored);
        assert_eq!(out.lroot_cur, expected, "unsynced={unsynced}");
        assert_ne!(out.pb_key, old_keys);
        assert!(verify(&out.pb_key, &transition_message(&anchored, &expected), &out.signature));
        assert_eq!(w.host.ht.commitment(), expected);
        assert_eq!(e2.lroot_cur().unwrap(), expected);
    }
}

#[test]
fn reinit_at_genesis() {
    let mut w = world(15);
    let mut e = w.platform.launch(w.config);
    let out = e.reinit(Commitment::genesis(), &[], None, &mut w.host).unwrap();
    assert_eq!((out.lroot_pb, out.lroot_cur), (Commitment::genesis(), Commitment::genesis()));
    let mut e = w.platform.launch(w.config);
    let fake = Header { id: 0, txs_root: Digest::ZERO, rcp_root: Digest::ZERO, st_root: Digest::ZERO };
    assert!(e.reinit(Commitment::genesis(), &[], Some(fake), &mut w.host).is_err());
    assert!(!e.is_initialized());
}

#[test]
fn reinit_rejects_tampering() {
    let mut w = world(16);
    let mut e = w.enclave();
    run(&mut w, &mut e, 3, 1);
    let anchored = e.lroot_pb().unwrap();
    let blocks = w.host.blocks[1..].to_vec();
    let hdr_sync = w.host.blocks[0].header;
    let snapshot = (w.host.trie.clone(), w.host.ht.clone(), w.host.blocks.clone());

    let mut tampered_sets = Vec::new();
    let mut b = blocks.clone();
    b[0].txs[0].amount += 1;
    tampered_sets.push(b);
    let mut b = blocks.clone();
    b[1].receipts[1].code = crate::vm::ReturnCode::Reverted;
    tampered_sets.push(b);
    let mut b = blocks.clone();
    b[1].header.st_root = hash(b"x");
    tampered_sets.push(b);
    let mut b = blocks.clone();
    b.swap(0, 1);
    tampered_sets.push(b);
    let mut b = blocks.clone();
    b[0].txs.swap(0, 1);
    tampered_sets.push(b);

    for (i, set) in tampered_sets.iter().enumerate() {
        w.host.trie = snapshot.0.clone();
        w.host.ht = snapshot.1.clone();
        w.host.blocks = snapshot.2.clone();
        w.host.rollback(anchored.version, w.config.genesis_root);
        let mut e2 = w.platform.launch(w.config);
        assert!(e2.reinit(anchored, set, Some(hdr_sync), &mut w.host).is_err(), "set {i}");
        assert!(!e2.is_initialized());
    }

    // A synced header that is not in the anchored ledger.
    w.host.rollback(anchored.version, w.config.genesis_root);
    let mut forged = hdr_sync;
    forged.st_root = hash(b"free money");
    let mut e2 = w.platform.launch(w.config);
    assert!(matches!(
        e2.reinit(anchored, &blocks, Some(forged), &mut w.host),
        Err(EnclaveError::BadProof(_))
    ));
}

#[test]
fn tickets_verify_under_pb_key() {
    let mut w = world(17);
    let e = w.enclave();
    let t = e.issue_ticket(w.users[0].public(), 50).unwrap();
    assert!(verify(e.pb_key().unwrap(), &ticket_message(&t.client, t.expiry), &t.signature));
    assert!(!verify(e.pb_key().unwrap(), &ticket_message(&t.client, 51), &t.signature));
}
