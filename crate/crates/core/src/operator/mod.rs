//! The untrusted ledger operator. It caches client transactions, drives the
//! enclave block by block, keeps the full state and the block store, anchors
//! new versions on chain, serves receipts, answers censorship requests and
//! restores a failed enclave on a new platform.
//!
//! Time is a logical millisecond clock advanced by the caller, so flush
//! timeouts are reproducible.

pub mod store;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{replace_message, Call, CallOutput, Chain, EventKind};
use crate::codec::Canonical;
use crate::crypto::{Digest, KeyPair, PublicKey, Signature};
use crate::enclave::{Enclave, EnclaveError, Quote, ReplayHost, TxEvidence};
use crate::history::{Commitment, HistoryError, HistoryTree, IncrementalProof, MembershipProof};
use crate::ledger::{placeholder_record, AccessTicket, Block, Query};
use crate::merkle::{mk_proof, MerkleProof};
use crate::mpt::{MemStore, MptError, MptProof, PartialState, Trie};
use crate::vm::{apply_txs, touched_accounts, AccountState, AccountStore, Receipt, Transaction, VmConfig, VmError};

pub use store::{BlockStore, DirBlockStore, MemBlockStore};

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("enclave: {0}")]
    Enclave(#[from] EnclaveError),
    #[error("block store: {0}")]
    Store(#[from] std::io::Error),
    #[error("state: {0}")]
    State(#[from] MptError),
    #[error("execution: {0}")]
    Vm(#[from] VmError),
    #[error("history: {0}")]
    History(#[from] HistoryError),
    #[error("no enclave is running")]
    EnclaveDown,
    #[error("transaction {0:?} is not in the ledger")]
    UnknownTx(Digest),
    #[error("genesis state does not match the enclave configuration")]
    GenesisMismatch,
    #[error("a chain update is still awaiting confirmation")]
    Busy,
    #[error("chain rejected the update: {0}")]
    ChainRejected(String),
    #[error("operator state diverged: {0}")]
    Diverged(String),
}

/// Flush thresholds. A block is cut when `tx_threshold` transactions are
/// cached or the oldest cached one has waited `tx_timeout_ms`; the ledger is
/// anchored when `block_threshold` blocks are unsynced or the oldest has
/// waited `block_timeout_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub tx_threshold: usize,
    pub tx_timeout_ms: u64,
    pub block_threshold: u64,
    pub block_timeout_ms: u64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig { tx_threshold: 100, tx_timeout_ms: 1_000, block_threshold: 5, block_timeout_ms: 10_000 }
    }
}

/// Misbehaviour switches used to exercise the censorship protocols.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Behavior {
    /// Acknowledge client transactions but never include them.
    pub drop_client_txs: bool,
    /// Never answer censorship requests posted on chain.
    pub ignore_chain_requests: bool,
}

/// Everything a client needs to check that a transaction was executed with
/// a given outcome. When the block is already anchored, `lroot_cur` equals
/// the anchored root and the incremental proof and signature are omitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptBundle {
    pub receipt: Receipt,
    pub receipt_proof: MerkleProof,
    pub header: crate::ledger::Header,
    pub header_proof: MembershipProof,
    pub lroot_cur: Commitment,
    pub inc_proof: Option<IncrementalProof>,
    pub signature: Option<Signature>,
}

/// Builds the full state holding the given genesis balances.
pub fn genesis_state(allocations: &[(Digest, u64)]) -> Result<Trie<MemStore>, OperatorError> {
    let mut trie = Trie::<MemStore>::new();
    for (id, balance) in allocations {
        trie.save(id, &AccountState::with_balance(*balance))?;
    }
    Ok(trie)
}

struct CensTxEntry {
    tx_id: Digest,
    etx: Vec<u8>,
    index: u64,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    tx_hash: Digest,
    to: Commitment,
}

pub struct Operator<B: BlockStore = MemBlockStore> {
    keys: KeyPair,
    config: OperatorConfig,
    behavior: Behavior,
    vm: VmConfig,
    genesis: Vec<(Digest, u64)>,
    genesis_root: Digest,
    enclave: Option<Enclave>,
    contract: Digest,
    state: Trie<MemStore>,
    ht: HistoryTree,
    store: B,
    tx_index: HashMap<Digest, (u64, usize)>,
    pending: Vec<Transaction>,
    pending_since: Option<u64>,
    unsynced_since: Option<u64>,
    now: u64,
    lroot_pb: Commitment,
    lroot_cur: Commitment,
    sig_last: Option<Signature>,
    cens_txs: Vec<CensTxEntry>,
    in_flight: Option<InFlight>,
    event_cursor: usize,
    rejected: Vec<Digest>,
    flushes: u64,
}

impl<B: BlockStore> Operator<B> {
    /// Initializes `enclave`, deploys the contract with its keys and waits
    /// for the deployment to confirm.
    pub fn init(
        keys: KeyPair,
        config: OperatorConfig,
        mut enclave: Enclave,
        genesis: Vec<(Digest, u64)>,
        store: B,
        chain: &mut Chain,
    ) -> Result<Self, OperatorError> {
        let state = genesis_state(&genesis)?;
        if state.root() != enclave.config().genesis_root {
            return Err(OperatorError::GenesisMismatch);
        }
        if !store.is_empty() {
            return Err(OperatorError::Diverged("block store is not empty".into()));
        }
        let (tee_key, pb_key) = enclave.init()?;
        let h = chain.send(&keys, Call::Deploy { pb_key, tee_key, operator: keys.public().clone() });
        while chain.receipt(&h).is_none() {
            chain.tick();
        }
        let contract = match chain.receipt(&h).map(|r| r.output) {
            Some(CallOutput::Contract(id)) => id,
            _ => return Err(OperatorError::ChainRejected("deployment failed".into())),
        };
        Ok(Operator {
            vm: enclave.config().vm,
            genesis_root: state.root(),
            keys,
            config,
            behavior: Behavior::default(),
            genesis,
            enclave: Some(enclave),
            contract,
            state,
            ht: HistoryTree::new(),
            store,
            tx_index: HashMap::new(),
            pending: Vec::new(),
            pending_since: None,
            unsynced_since: None,
            now: 0,
            lroot_pb: Commitment::genesis(),
            lroot_cur: Commitment::genesis(),
            sig_last: None,
            cens_txs: Vec::new(),
            in_flight: None,
            event_cursor: chain.event_count(),
            rejected: Vec::new(),
            flushes: 0,
        })
    }

    pub fn contract(&self) -> Digest {
        self.contract
    }

    pub fn public_key(&self) -> &PublicKey {
        self.keys.public()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn lroot_pb(&self) -> Commitment {
        self.lroot_pb
    }

    pub fn lroot_cur(&self) -> Commitment {
        self.lroot_cur
    }

    pub fn state_root(&self) -> Digest {
        self.state.root()
    }

    pub fn block_count(&self) -> u64 {
        self.store.len()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Number of accepted anchorings followed by an enclave flush.
    pub fn flush_count(&self) -> u64 {
        self.flushes
    }

    pub fn is_syncing(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn set_behavior(&mut self, behavior: Behavior) {
        self.behavior = behavior;
    }

    pub fn store(&self) -> &B {
        &self.store
    }

    /// Direct access to stored block bytes, for fault injection.
    pub fn store_mut(&mut self) -> &mut B {
        &mut self.store
    }

    /// Whether the enclave dropped `tx_id` as malformed or badly signed.
    pub fn was_rejected(&self, tx_id: &Digest) -> bool {
        self.rejected.contains(tx_id)
    }

    fn enclave(&self) -> Result<&Enclave, OperatorError> {
        self.enclave.as_ref().ok_or(OperatorError::EnclaveDown)
    }

    fn enclave_mut(&mut self) -> Result<&mut Enclave, OperatorError> {
        self.enclave.as_mut().ok_or(OperatorError::EnclaveDown)
    }

    pub fn quote(&self) -> Result<Quote, OperatorError> {
        Ok(self.enclave()?.quote()?)
    }

    /// Registers a client for censorship requests until chain height `expiry`.
    pub fn register_client(&self, client: &PublicKey, expiry: u64) -> Result<AccessTicket, OperatorError> {
        Ok(self.enclave()?.issue_ticket(client, expiry)?)
    }

    /// Accepts a client transaction. Returns its id; inclusion is reported
    /// through receipts.
    pub fn submit_tx(&mut self, tx: Transaction, chain: &mut Chain) -> Result<Digest, OperatorError> {
        let id = tx.id();
        if self.behavior.drop_client_txs {
            return Ok(id);
        }
        self.enqueue(tx);
        self.maybe_cut_blocks(chain)?;
        Ok(id)
    }

    fn enqueue(&mut self, tx: Transaction) {
        if self.pending.is_empty() {
            self.pending_since = Some(self.now);
        }
        self.pending.push(tx);
    }

    /// Advances the logical clock, then handles chain confirmations, chain
    /// events and any flush timeouts that expired.
    pub fn advance(&mut self, ms: u64, chain: &mut Chain) -> Result<(), OperatorError> {
        self.now += ms;
        self.poll(chain)?;
        self.maybe_cut_blocks(chain)?;
        let sync_due = self
            .unsynced_since
            .is_some_and(|t| self.now - t >= self.config.block_timeout_ms);
        if sync_due {
            self.sync(chain)?;
        }
        Ok(())
    }

    fn maybe_cut_blocks(&mut self, chain: &mut Chain) -> Result<(), OperatorError> {
        while self.in_flight.is_none() && self.enclave.is_some() {
            let full = self.pending.len() >= self.config.tx_threshold;
            let timed_out = !self.pending.is_empty()
                && self.pending_since.is_some_and(|t| self.now - t >= self.config.tx_timeout_ms);
            if !(full || timed_out) {
                break;
            }
            self.cut_block(chain)?;
        }
        Ok(())
    }

    /// Executes one block from the cached transactions, even an empty one.
    /// Returns the new ledger commitment.
    pub fn cut_block(&mut self, chain: &mut Chain) -> Result<Commitment, OperatorError> {
        if self.in_flight.is_some() {
            return Err(OperatorError::Busy);
        }
        let n = self.pending.len().min(self.config.tx_threshold);
        let txs = self.pending[..n].to_vec();
        let (template, lroot_tmp) = self.ht.proof_template(placeholder_record());
        let ps = self.state.extract(&touched_accounts(&txs))?;
        let out = self.enclave_mut()?.exec(&txs, ps, template, lroot_tmp)?;

        self.pending.drain(..n);
        self.pending_since = (!self.pending.is_empty()).then_some(self.now);
        self.state.absorb(out.ps_new);
        let commitment = self.ht.add(out.block.header.record());
        if commitment != out.lroot_cur || self.state.root() != out.block.header.st_root {
            return Err(OperatorError::Diverged("local ledger disagrees with the enclave".into()));
        }
        self.store.put(&out.block)?;
        self.index_block(&out.block);
        self.rejected.extend(out.rejected.iter().map(Transaction::id));
        self.sig_last = Some(out.signature);
        self.lroot_cur = out.lroot_cur;
        self.unsynced_since.get_or_insert(self.now);
        if self.lroot_cur.version - self.lroot_pb.version >= self.config.block_threshold {
            self.sync(chain)?;
        }
        Ok(self.lroot_cur)
    }

    fn index_block(&mut self, block: &Block) {
        for (i, tx) in block.txs.iter().enumerate() {
            self.tx_index.entry(tx.id()).or_insert((block.header.id, i));
        }
    }

    /// Posts the latest signed transition to the contract. Returns whether a
    /// chain transaction was sent.
    pub fn sync(&mut self, chain: &mut Chain) -> Result<bool, OperatorError> {
        if self.in_flight.is_some() || self.lroot_cur == self.lroot_pb {
            return Ok(false);
        }
        let signature = self.sig_last.clone().expect("an unsynced block has a signature");
        let call = Call::PostLroot { contract: self.contract, from: self.lroot_pb, to: self.lroot_cur, signature };
        let tx_hash = chain.send(&self.keys, call);
        self.in_flight = Some(InFlight { tx_hash, to: self.lroot_cur });
        self.poll(chain)?;
        Ok(true)
    }

    /// Processes a confirmed anchoring, if any, then new chain events.
    pub fn poll(&mut self, chain: &mut Chain) -> Result<(), OperatorError> {
        if let Some(f) = self.in_flight {
            if let Some(r) = chain.receipt(&f.tx_hash) {
                let anchored = chain.contract(&self.contract).map(|c| c.lroot_pb);
                let accepted = r.output == CallOutput::Accepted(true) || anchored == Some(f.to);
                let reason = r.revert.clone().unwrap_or_else(|| "stale transition".into());
                self.in_flight = None;
                if !accepted {
                    return Err(OperatorError::ChainRejected(reason));
                }
                if let Some(e) = self.enclave.as_mut() {
                    e.flush()?;
                }
                self.flushes += 1;
                self.lroot_pb = f.to;
                self.unsynced_since = None;
                self.resolve_cens_txs(chain)?;
            }
        }
        if self.enclave.is_none() {
            return Ok(());
        }
        let events: Vec<EventKind> = chain
            .events_since(self.event_cursor)
            .iter()
            .filter(|e| e.contract == self.contract)
            .map(|e| e.kind.clone())
            .collect();
        self.event_cursor = chain.event_count();
        for ev in events {
            match ev {
                EventKind::CensTxSubmitted { index, etx } => self.on_cens_tx(etx, index, chain)?,
                EventKind::CensQrySubmitted { index, equery } => self.on_cens_qry(&equery, index, chain)?,
                _ => {}
            }
        }
        Ok(())
    }

    fn on_cens_tx(&mut self, etx: Vec<u8>, index: u64, chain: &mut Chain) -> Result<(), OperatorError> {
        if self.behavior.ignore_chain_requests {
            return Ok(());
        }
        let enclave = self.enclave()?;
        let parsed = enclave
            .decrypt(&etx)
            .ok()
            .and_then(|p| Transaction::decode(&p).ok())
            .filter(|tx| tx.is_well_formed() && tx.has_valid_signature());
        let Some(tx) = parsed else {
            let (signature, status) = enclave.sign_tx(&etx, None)?;
            chain.send(&self.keys, Call::ResolveCensTx { contract: self.contract, index, status, signature });
            return Ok(());
        };
        let tx_id = tx.id();
        self.cens_txs.push(CensTxEntry { tx_id, etx, index });
        let known = self.tx_index.contains_key(&tx_id) || self.pending.iter().any(|t| t.id() == tx_id);
        if !known {
            self.enqueue(tx);
        }
        self.resolve_cens_txs(chain)
    }

    /// Resolves every cached censored transaction whose block is anchored.
    pub fn resolve_cens_txs(&mut self, chain: &mut Chain) -> Result<(), OperatorError> {
        let mut remaining = Vec::new();
        for entry in std::mem::take(&mut self.cens_txs) {
            let located = self.tx_index.get(&entry.tx_id).copied();
            match located {
                Some((bid, pos)) if bid <= self.lroot_pb.version => {
                    let block = self.load_block(bid)?;
                    let encoded: Vec<Vec<u8>> = block.txs.iter().map(Canonical::encode).collect();
                    let evidence = TxEvidence {
                        tx_proof: mk_proof(pos, &encoded).expect("indexed position exists"),
                        header: block.header,
                        header_proof: self.ht.mem_proof(bid - 1, &self.lroot_pb)?,
                    };
                    let (signature, status) = self.enclave()?.sign_tx(&entry.etx, Some(&evidence))?;
                    let call = Call::ResolveCensTx { contract: self.contract, index: entry.index, status, signature };
                    chain.send(&self.keys, call);
                }
                _ => remaining.push(entry),
            }
        }
        self.cens_txs = remaining;
        Ok(())
    }

    fn on_cens_qry(&mut self, equery: &[u8], index: u64, chain: &mut Chain) -> Result<(), OperatorError> {
        if self.behavior.ignore_chain_requests {
            return Ok(());
        }
        let query = self.enclave()?.decrypt(equery).ok().and_then(|p| Query::decode(&p).ok());
        let res = match query {
            Some(Query::ReadTx { block_id, .. }) if block_id >= 1 && block_id <= self.lroot_pb.version => {
                let block = self.load_block(block_id)?;
                let proof = self.ht.mem_proof(block_id - 1, &self.lroot_pb)?;
                self.enclave_mut()?.sign_qry_tx(equery, Some(&block), Some(&proof))?
            }
            Some(Query::ReadAs { account, .. }) => {
                let acct = self.state.load(&account)?;
                let proof = self.state.proof(&account)?;
                self.enclave_mut()?.sign_qry_as(equery, acct.as_ref(), &proof)?
            }
            Some(Query::ReadTx { .. }) | None => self.enclave_mut()?.sign_qry_tx(equery, None, None)?,
        };
        let call = Call::ResolveCensQry {
            contract: self.contract,
            index,
            status: res.status,
            edata: res.edata,
            signature: res.signature,
        };
        chain.send(&self.keys, call);
        Ok(())
    }

    fn load_block(&self, id: u64) -> Result<Block, OperatorError> {
        self.store
            .get(id)?
            .ok_or_else(|| OperatorError::Diverged(format!("block {id} missing from the store")))
    }

    pub fn get_block(&self, id: u64) -> Result<Option<Block>, OperatorError> {
        Ok(self.store.get(id)?)
    }

    /// Current account state with a proof against the current state root.
    pub fn get_account(&self, id: &Digest) -> Result<(Option<AccountState>, MptProof), OperatorError> {
        Ok((self.state.load(id)?, self.state.proof(id)?))
    }

    pub fn get_receipt(&self, tx_id: &Digest) -> Result<ReceiptBundle, OperatorError> {
        let (bid, pos) = *self.tx_index.get(tx_id).ok_or(OperatorError::UnknownTx(*tx_id))?;
        let block = self.load_block(bid)?;
        let encoded: Vec<Vec<u8>> = block.receipts.iter().map(Canonical::encode).collect();
        let receipt_proof = mk_proof(pos, &encoded).expect("indexed position exists");
        let synced = bid <= self.lroot_pb.version;
        let at = if synced { self.lroot_pb } else { self.lroot_cur };
        Ok(ReceiptBundle {
            receipt: block.receipts[pos].clone(),
            receipt_proof,
            header: block.header,
            header_proof: self.ht.mem_proof(bid - 1, &at)?,
            lroot_cur: at,
            inc_proof: if synced { None } else { Some(self.ht.inc_proof(&self.lroot_pb, &self.lroot_cur)?) },
            signature: if synced { None } else { self.sig_last.clone() },
        })
    }

    /// Simulates permanent loss of the enclave and its platform.
    pub fn kill_enclave(&mut self) {
        self.enclave = None;
    }

    pub fn has_enclave(&self) -> bool {
        self.enclave.is_some()
    }

    /// Brings up `fresh` as the replacement enclave: rolls the ledger back to
    /// the anchored version, has the enclave re-execute every unsynced block
    /// while the operator replays it too, and posts the key rotation with the
    /// resulting transition. On failure the local ledger is put back as it
    /// was and nothing is sent to the chain.
    pub fn restore_enclave(&mut self, mut fresh: Enclave, chain: &mut Chain) -> Result<(), OperatorError> {
        self.poll(chain)?;
        if self.in_flight.is_some() {
            return Err(OperatorError::Busy);
        }
        let anchored = chain
            .contract(&self.contract)
            .map(|c| c.lroot_pb)
            .ok_or_else(|| OperatorError::Diverged("contract missing".into()))?;
        if anchored != self.lroot_pb {
            return Err(OperatorError::Diverged("anchored root differs from the local record".into()));
        }
        let v = anchored.version;
        let hdr_sync = if v > 0 { Some(self.load_block(v)?.header) } else { None };
        let unsynced = (v + 1..=self.store.len()).map(|id| self.load_block(id)).collect::<Result<Vec<_>, _>>()?;

        let backup = (self.ht.clone(), self.state.root(), self.tx_index.clone());
        self.ht.truncate(v);
        self.state.set_root(hdr_sync.map_or(self.genesis_root, |h| h.st_root));
        self.tx_index.retain(|_, (bid, _)| *bid <= v);

        let mut host = RestoreHost {
            state: &mut self.state,
            ht: &mut self.ht,
            store: &mut self.store,
            tx_index: &mut self.tx_index,
            vm: self.vm,
        };
        let out = match fresh.reinit(anchored, &unsynced, hdr_sync, &mut host) {
            Ok(out) if out.lroot_cur == self.ht.commitment() => out,
            result => {
                (self.ht, _, self.tx_index) = backup.clone();
                self.state.set_root(backup.1);
                return Err(match result {
                    Err(e) => e.into(),
                    Ok(_) => OperatorError::Diverged("enclave and operator replay disagree".into()),
                });
            }
        };

        self.enclave = Some(fresh);
        self.lroot_cur = out.lroot_cur;
        self.sig_last = Some(out.signature.clone());
        let operator_sig = self.keys.sign(&replace_message(
            &self.contract,
            &out.pb_key,
            &out.tee_key,
            &out.lroot_pb,
            &out.lroot_cur,
            &out.signature,
        ));
        let call = Call::ReplaceEnclave {
            contract: self.contract,
            pb_key: out.pb_key,
            tee_key: out.tee_key,
            from: out.lroot_pb,
            to: out.lroot_cur,
            signature: out.signature,
            operator_sig,
        };
        let tx_hash = chain.send(&self.keys, call);
        self.in_flight = Some(InFlight { tx_hash, to: out.lroot_cur });
        self.poll(chain)
    }

    /// Rebuilds the history tree from the stored headers and replays every
    /// stored block from genesis, checking both against the live ledger.
    pub fn audit(&self) -> Result<(), OperatorError> {
        let mut ht = HistoryTree::new();
        let mut state = genesis_state(&self.genesis)?;
        for id in 1..=self.store.len() {
            let block = self.load_block(id)?;
            block.check_consistency().map_err(|e| OperatorError::Diverged(e.to_string()))?;
            let out = apply_txs(&mut state, &block.txs, &self.vm)?;
            if out.receipts != block.receipts || state.root() != block.header.st_root {
                return Err(OperatorError::Diverged(format!("block {id} does not replay")));
            }
            ht.add(block.header.record());
        }
        if ht.commitment() != self.lroot_cur {
            return Err(OperatorError::Diverged("history tree does not match the ledger root".into()));
        }
        if state.root() != self.state.root() {
            return Err(OperatorError::Diverged("replayed state does not match".into()));
        }
        Ok(())
    }
}

/// Operator side of enclave re-initialization.
struct RestoreHost<'a, B: BlockStore> {
    state: &'a mut Trie<MemStore>,
    ht: &'a mut HistoryTree,
    store: &'a mut B,
    tx_index: &'a mut HashMap<Digest, (u64, usize)>,
    vm: VmConfig,
}

impl<B: BlockStore> ReplayHost for RestoreHost<'_, B> {
    fn header_proof(&mut self, index: u64, at: &Commitment) -> Result<MembershipProof, String> {
        // The tree is already rolled back to `at`.
        self.ht.mem_proof(index, at).map_err(|e| e.to_string())
    }

    fn next_template(&mut self) -> Result<(IncrementalProof, Commitment), String> {
        Ok(self.ht.proof_template(placeholder_record()))
    }

    fn partial_state(&mut self, txs: &[Transaction]) -> Result<PartialState, String> {
        self.state.extract(&touched_accounts(txs)).map_err(|e| e.to_string())
    }

    fn replay(&mut self, block: &Block) -> Result<Commitment, String> {
        let out = apply_txs(self.state, &block.txs, &self.vm).map_err(|e| e.to_string())?;
        if out.receipts != block.receipts || self.state.root() != block.header.st_root {
            return Err(format!("block {} replays differently", block.header.id));
        }
        self.store.put(block).map_err(|e| e.to_string())?;
        for (i, tx) in block.txs.iter().enumerate() {
            self.tx_index.entry(tx.id()).or_insert((block.header.id, i));
        }
        Ok(self.ht.add(block.header.record()))
    }
}
