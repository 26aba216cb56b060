//! Transactions, accounts, receipts, and block execution over any account
//! store (the full trie or a partial state).

pub mod interp;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{self, hash, hash_parts, Digest, KeyPair, PublicKey, Scheme, Signature};
use crate::mpt::{MptError, NodeStore, PartialState, Trie};

pub use interp::{word, CallContext, Halt, LogEntry};

/// Largest accepted transaction payload (code or call data).
pub const MAX_PAYLOAD: usize = 64 * 1024;
pub const DEFAULT_STEP_BUDGET: u64 = 10_000;

const TX_DOMAIN: &[u8] = b"vledger/tx/v1";

#[derive(Debug, Error)]
pub enum VmError {
    #[error("state access failed: {0}")]
    State(#[from] MptError),
    #[error("account {0:?} is not covered by the supplied state")]
    Uncovered(Digest),
    #[error("stored account {0:?} does not decode: {1}")]
    CorruptAccount(Digest, DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Transfer,
    Deploy,
    Call,
}

impl TxKind {
    fn tag(self) -> u8 {
        match self {
            TxKind::Transfer => 0,
            TxKind::Deploy => 1,
            TxKind::Call => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        Ok(match tag {
            0 => TxKind::Transfer,
            1 => TxKind::Deploy,
            2 => TxKind::Call,
            tag => return Err(DecodeError::BadTag { what: "tx kind", tag }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: PublicKey,
    pub nonce: u64,
    pub kind: TxKind,
    pub recipient: Option<Digest>,
    pub amount: u64,
    #[serde(with = "crate::codec::hex_bytes")]
    pub payload: Vec<u8>,
    pub signature: Signature,
}

/// Address of a contract deployed by `sender` with transaction nonce `nonce`.
pub fn contract_address(sender: &PublicKey, nonce: u64) -> Digest {
    hash_parts(&[&sender.bytes, &nonce.to_be_bytes()])
}

impl Transaction {
    fn encode_unsigned(
        enc: &mut Encoder,
        sender: &PublicKey,
        nonce: u64,
        kind: TxKind,
        recipient: Option<&Digest>,
        amount: u64,
        payload: &[u8],
    ) {
        sender.encode_into(enc);
        enc.u64(nonce).u8(kind.tag()).opt_digest(recipient).u64(amount).bytes(payload);
    }

    /// The exact bytes the sender signs: a domain tag followed by every
    /// field except the signature, in declaration order.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(TX_DOMAIN);
        Self::encode_unsigned(
            &mut enc,
            &self.sender,
            self.nonce,
            self.kind,
            self.recipient.as_ref(),
            self.amount,
            &self.payload,
        );
        enc.finish()
    }

    pub fn signed(
        keys: &KeyPair,
        nonce: u64,
        kind: TxKind,
        recipient: Option<Digest>,
        amount: u64,
        payload: Vec<u8>,
    ) -> Self {
        let mut tx = Transaction {
            sender: keys.public().clone(),
            nonce,
            kind,
            recipient,
            amount,
            payload,
            signature: Signature { bytes: Vec::new(), recovery: None },
        };
        tx.signature = keys.sign(&tx.signing_bytes());
        tx
    }

    pub fn transfer(keys: &KeyPair, nonce: u64, to: Digest, amount: u64) -> Self {
        Self::signed(keys, nonce, TxKind::Transfer, Some(to), amount, Vec::new())
    }

    pub fn deploy(keys: &KeyPair, nonce: u64, code: Vec<u8>, endowment: u64) -> Self {
        Self::signed(keys, nonce, TxKind::Deploy, None, endowment, code)
    }

    pub fn call(keys: &KeyPair, nonce: u64, contract: Digest, value: u64, data: Vec<u8>) -> Self {
        Self::signed(keys, nonce, TxKind::Call, Some(contract), value, data)
    }

    /// Transaction identity: the hash of the full canonical encoding.
    pub fn id(&self) -> Digest {
        hash(&self.encode())
    }

    /// Structural checks that do not involve the signature.
    pub fn is_well_formed(&self) -> bool {
        self.sender.scheme == Scheme::Pb
            && self.sender.is_well_formed()
            && self.payload.len() <= MAX_PAYLOAD
            && match self.kind {
                TxKind::Deploy => self.recipient.is_none(),
                TxKind::Transfer | TxKind::Call => self.recipient.is_some(),
            }
    }

    pub fn has_valid_signature(&self) -> bool {
        crypto::verify(&self.sender, &self.signing_bytes(), &self.signature)
    }

    /// Accounts a transaction may read or write. Contract storage lives
    /// inside the contract account and contracts cannot call each other, so
    /// this is known before execution.
    pub fn touched_accounts(&self) -> Vec<Digest> {
        let mut out = vec![self.sender.account_id()];
        match self.kind {
            TxKind::Deploy => out.push(contract_address(&self.sender, self.nonce)),
            TxKind::Transfer | TxKind::Call => out.extend(self.recipient),
        }
        out
    }
}

impl Canonical for Transaction {
    fn encode_into(&self, enc: &mut Encoder) {
        Self::encode_unsigned(
            enc,
            &self.sender,
            self.nonce,
            self.kind,
            self.recipient.as_ref(),
            self.amount,
            &self.payload,
        );
        self.signature.encode_into(enc);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Transaction {
            sender: PublicKey::decode_from(dec)?,
            nonce: dec.u64()?,
            kind: TxKind::from_tag(dec.u8()?)?,
            recipient: dec.opt_digest()?,
            amount: dec.u64()?,
            payload: dec.bytes()?,
            signature: Signature::decode_from(dec)?,
        })
    }
}

/// Union of the accounts touched by `txs`, sorted.
pub fn touched_accounts(txs: &[Transaction]) -> Vec<Digest> {
    let set: BTreeSet<Digest> = txs
        .iter()
        .filter(|tx| tx.sender.is_well_formed())
        .flat_map(Transaction::touched_accounts)
        .collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountState {
    pub balance: u64,
    pub nonce: u64,
    #[serde(with = "crate::codec::opt_hex_bytes")]
    pub code: Option<Vec<u8>>,
    pub storage: BTreeMap<u64, u64>,
}

impl AccountState {
    pub fn with_balance(balance: u64) -> Self {
        AccountState { balance, ..Default::default() }
    }
}

/// Layout: `balance u64 || nonce u64 || optional code || count u32 ||
/// (key u64 || value u64)*` with keys ascending.
impl Canonical for AccountState {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(self.balance).u64(self.nonce).opt_bytes(self.code.as_deref());
        enc.u32(self.storage.len() as u32);
        for (k, v) in &self.storage {
            enc.u64(*k).u64(*v);
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let balance = dec.u64()?;
        let nonce = dec.u64()?;
        let code = dec.opt_bytes()?;
        let n = dec.count(16)?;
        let mut storage = BTreeMap::new();
        let mut prev = None;
        for _ in 0..n {
            let k = dec.u64()?;
            if prev.is_some_and(|p| p >= k) {
                return Err(DecodeError::Malformed("storage key order"));
            }
            prev = Some(k);
            storage.insert(k, dec.u64()?);
        }
        Ok(AccountState { balance, nonce, code, storage })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnCode {
    Ok,
    Reverted,
    OutOfBounds,
    BadNonce,
    InsufficientBalance,
}

impl ReturnCode {
    fn tag(self) -> u8 {
        match self {
            ReturnCode::Ok => 0,
            ReturnCode::Reverted => 1,
            ReturnCode::OutOfBounds => 2,
            ReturnCode::BadNonce => 3,
            ReturnCode::InsufficientBalance => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub tx_hash: Digest,
    pub code: ReturnCode,
    pub logs: Vec<LogEntry>,
}

impl Canonical for Receipt {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.digest(&self.tx_hash).u8(self.code.tag()).u32(self.logs.len() as u32);
        for l in &self.logs {
            enc.u64(l.topic).u64(l.data);
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tx_hash = dec.digest()?;
        let code = match dec.u8()? {
            0 => ReturnCode::Ok,
            1 => ReturnCode::Reverted,
            2 => ReturnCode::OutOfBounds,
            3 => ReturnCode::BadNonce,
            4 => ReturnCode::InsufficientBalance,
            tag => return Err(DecodeError::BadTag { what: "return code", tag }),
        };
        let n = dec.count(16)?;
        let logs = (0..n)
            .map(|_| Ok(LogEntry { topic: dec.u64()?, data: dec.u64()? }))
            .collect::<Result<_, DecodeError>>()?;
        Ok(Receipt { tx_hash, code, logs })
    }
}

/// Read/write access to accounts by id.
pub trait AccountStore {
    fn load(&self, id: &Digest) -> Result<Option<AccountState>, VmError>;
    fn save(&mut self, id: &Digest, account: &AccountState) -> Result<(), VmError>;
}

impl<S: NodeStore> AccountStore for Trie<S> {
    fn load(&self, id: &Digest) -> Result<Option<AccountState>, VmError> {
        match self.get(id)? {
            None => Ok(None),
            Some(bytes) => AccountState::decode(&bytes)
                .map(Some)
                .map_err(|e| VmError::CorruptAccount(*id, e)),
        }
    }

    fn save(&mut self, id: &Digest, account: &AccountState) -> Result<(), VmError> {
        self.insert(id, account.encode())?;
        Ok(())
    }
}

/// A trie over a partial state that refuses to touch keys outside the
/// covered set, even where the nodes happen to be present.
pub struct CoveredTrie {
    trie: Trie<BTreeMap<Digest, crate::mpt::MptNode>>,
    covered: BTreeSet<Digest>,
}

impl CoveredTrie {
    pub fn new(ps: PartialState) -> Result<Self, VmError> {
        ps.validate()?;
        let covered = ps.keys.iter().copied().collect();
        Ok(CoveredTrie { trie: ps.into_trie(), covered })
    }

    pub fn root(&self) -> Digest {
        self.trie.root()
    }

    /// The partial state for the covered keys at the current root.
    pub fn into_partial_state(self) -> Result<PartialState, VmError> {
        let keys: Vec<Digest> = self.covered.into_iter().collect();
        Ok(self.trie.extract(&keys)?)
    }

    fn check(&self, id: &Digest) -> Result<(), VmError> {
        if self.covered.contains(id) {
            Ok(())
        } else {
            Err(VmError::Uncovered(*id))
        }
    }
}

impl AccountStore for CoveredTrie {
    fn load(&self, id: &Digest) -> Result<Option<AccountState>, VmError> {
        self.check(id)?;
        self.trie.load(id)
    }

    fn save(&mut self, id: &Digest, account: &AccountState) -> Result<(), VmError> {
        self.check(id)?;
        self.trie.save(id, account)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmConfig {
    pub step_budget: u64,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig { step_budget: DEFAULT_STEP_BUDGET }
    }
}

/// Outcome of running a list of transactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    /// Transactions that were executed, in order, each with a receipt.
    pub included: Vec<Transaction>,
    pub receipts: Vec<Receipt>,
    /// Transactions rejected for being malformed or badly signed.
    pub rejected: Vec<Transaction>,
}

/// Executes `txs` in order against `store`.
pub fn apply_txs<A: AccountStore>(
    store: &mut A,
    txs: &[Transaction],
    cfg: &VmConfig,
) -> Result<RunOutcome, VmError> {
    let mut out = RunOutcome { included: Vec::new(), receipts: Vec::new(), rejected: Vec::new() };
    for tx in txs {
        if !tx.is_well_formed() || !tx.has_valid_signature() {
            out.rejected.push(tx.clone());
            continue;
        }
        let (code, logs) = apply_one(store, tx, cfg)?;
        out.receipts.push(Receipt { tx_hash: tx.id(), code, logs });
        out.included.push(tx.clone());
    }
    Ok(out)
}

fn apply_one<A: AccountStore>(
    store: &mut A,
    tx: &Transaction,
    cfg: &VmConfig,
) -> Result<(ReturnCode, Vec<LogEntry>), VmError> {
    let sender_id = tx.sender.account_id();
    let mut sender = store.load(&sender_id)?.unwrap_or_default();
    if tx.nonce != sender.nonce {
        return Ok((ReturnCode::BadNonce, Vec::new()));
    }
    sender.nonce += 1;
    let fail = |store: &mut A, sender: &AccountState, code| -> Result<_, VmError> {
        store.save(&sender_id, sender)?;
        Ok((code, Vec::new()))
    };

    match tx.kind {
        TxKind::Transfer => {
            let to = tx.recipient.expect("well-formed transfer");
            if sender.balance < tx.amount {
                return fail(store, &sender, ReturnCode::InsufficientBalance);
            }
            if to == sender_id {
                store.save(&sender_id, &sender)?;
                return Ok((ReturnCode::Ok, Vec::new()));
            }
            let mut recipient = store.load(&to)?.unwrap_or_default();
            let Some(credited) = recipient.balance.checked_add(tx.amount) else {
                return fail(store, &sender, ReturnCode::Reverted);
            };
            sender.balance -= tx.amount;
            recipient.balance = credited;
            store.save(&sender_id, &sender)?;
            store.save(&to, &recipient)?;
            Ok((ReturnCode::Ok, Vec::new()))
        }
        TxKind::Deploy => {
            let addr = contract_address(&tx.sender, tx.nonce);
            let existing = store.load(&addr)?.unwrap_or_default();
            if existing.code.is_some() {
                return fail(store, &sender, ReturnCode::Reverted);
            }
            if sender.balance < tx.amount {
                return fail(store, &sender, ReturnCode::InsufficientBalance);
            }
            let Some(balance) = existing.balance.checked_add(tx.amount) else {
                return fail(store, &sender, ReturnCode::Reverted);
            };
            sender.balance -= tx.amount;
            let contract = AccountState {
                balance,
                nonce: existing.nonce,
                code: Some(tx.payload.clone()),
                storage: BTreeMap::new(),
            };
            store.save(&sender_id, &sender)?;
            store.save(&addr, &contract)?;
            Ok((ReturnCode::Ok, Vec::new()))
        }
        TxKind::Call => {
            let to = tx.recipient.expect("well-formed call");
            if to == sender_id {
                return fail(store, &sender, ReturnCode::Reverted);
            }
            let mut contract = store.load(&to)?.unwrap_or_default();
            let Some(code) = contract.code.clone() else {
                return fail(store, &sender, ReturnCode::Reverted);
            };
            if sender.balance < tx.amount {
                return fail(store, &sender, ReturnCode::InsufficientBalance);
            }
            let Some(balance) = contract.balance.checked_add(tx.amount) else {
                return fail(store, &sender, ReturnCode::Reverted);
            };
            let ctx = CallContext { caller: sender_id.prefix_u64(), value: tx.amount, data: &tx.payload };
            let result = interp::execute(&code, &ctx, &contract.storage, cfg.step_budget);
            match result.halt {
                Halt::Stopped => {
                    sender.balance -= tx.amount;
                    contract.balance = balance;
                    contract.storage = result.storage;
                    store.save(&sender_id, &sender)?;
                    store.save(&to, &contract)?;
                    Ok((ReturnCode::Ok, result.logs))
                }
                Halt::Reverted => fail(store, &sender, ReturnCode::Reverted),
                Halt::OutOfSteps => fail(store, &sender, ReturnCode::OutOfBounds),
            }
        }
    }
}

/// Block execution over a partial state: the enclave's entry point.
/// Returns the partial state at the new root for the same covered keys.
pub fn run_vm(
    txs: &[Transaction],
    ps: PartialState,
    cfg: &VmConfig,
) -> Result<(PartialState, RunOutcome), VmError> {
    let mut trie = CoveredTrie::new(ps)?;
    let outcome = apply_txs(&mut trie, txs, cfg)?;
    Ok((trie.into_partial_state()?, outcome))
}
