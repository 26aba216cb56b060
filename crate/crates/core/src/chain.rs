//! Simulated public blockchain hosting the anchoring contract.
//!
//! A single deterministic node applies signed transactions in submission
//! order once they are `delay` ticks old. Successful calls emit events;
//! reverted calls only leave a failure receipt. The contract stores one
//! anchored ledger commitment, the enclave key history and a registry of
//! censorship requests. Request payloads travel in events; storage keeps
//! their digests.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, Encoder};
use crate::crypto::{self, hash, hash_parts, Digest, KeyPair, PublicKey, Signature};
use crate::history::Commitment;
use crate::ledger::{cens_qry_message, cens_tx_message, ticket_message, transition_message, AccessTicket, CensStatus};

const CHAIN_TX_DOMAIN: &[u8] = b"vledger/chain-tx/v1";
const REPLACE_DOMAIN: &[u8] = b"vledger/replace-enclave/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("transaction signature does not verify")]
    BadSignature,
    #[error("expected nonce {expected}, got {got}")]
    BadNonce { expected: u64, got: u64 },
}

/// Contract entry points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum Call {
    Deploy {
        pb_key: PublicKey,
        tee_key: PublicKey,
        operator: PublicKey,
    },
    PostLroot {
        contract: Digest,
        from: Commitment,
        to: Commitment,
        signature: Signature,
    },
    ReplaceEnclave {
        contract: Digest,
        pb_key: PublicKey,
        tee_key: PublicKey,
        from: Commitment,
        to: Commitment,
        signature: Signature,
        operator_sig: Signature,
    },
    SubmitCensTx {
        contract: Digest,
        #[serde(with = "crate::codec::hex_bytes")]
        etx: Vec<u8>,
        ticket: AccessTicket,
    },
    SubmitCensQry {
        contract: Digest,
        #[serde(with = "crate::codec::hex_bytes")]
        equery: Vec<u8>,
        ticket: AccessTicket,
    },
    ResolveCensTx {
        contract: Digest,
        index: u64,
        status: CensStatus,
        signature: Signature,
    },
    ResolveCensQry {
        contract: Digest,
        index: u64,
        status: CensStatus,
        #[serde(with = "crate::codec::opt_hex_bytes")]
        edata: Option<Vec<u8>>,
        signature: Signature,
    },
}

fn encode_ticket(enc: &mut Encoder, t: &AccessTicket) {
    t.client.encode_into(enc);
    enc.u64(t.expiry);
    t.signature.encode_into(enc);
}

impl Call {
    fn encode_into(&self, enc: &mut Encoder) {
        match self {
            Call::Deploy { pb_key, tee_key, operator } => {
                enc.u8(0);
                pb_key.encode_into(enc);
                tee_key.encode_into(enc);
                operator.encode_into(enc);
            }
            Call::PostLroot { contract, from, to, signature } => {
                enc.u8(1).digest(contract);
                from.encode_into(enc);
                to.encode_into(enc);
                signature.encode_into(enc);
            }
            Call::ReplaceEnclave { contract, pb_key, tee_key, from, to, signature, operator_sig } => {
                enc.u8(2).digest(contract);
                pb_key.encode_into(enc);
                tee_key.encode_into(enc);
                from.encode_into(enc);
                to.encode_into(enc);
                signature.encode_into(enc);
                operator_sig.encode_into(enc);
            }
            Call::SubmitCensTx { contract, etx, ticket } => {
                enc.u8(3).digest(contract).bytes(etx);
                encode_ticket(enc, ticket);
            }
            Call::SubmitCensQry { contract, equery, ticket } => {
                enc.u8(4).digest(contract).bytes(equery);
                encode_ticket(enc, ticket);
            }
            Call::ResolveCensTx { contract, index, status, signature } => {
                enc.u8(5).digest(contract).u64(*index).u8(status.tag());
                signature.encode_into(enc);
            }
            Call::ResolveCensQry { contract, index, status, edata, signature } => {
                enc.u8(6).digest(contract).u64(*index).u8(status.tag()).opt_bytes(edata.as_deref());
                signature.encode_into(enc);
            }
        }
    }
}

/// Message the operator signs to authorize an enclave replacement. It covers
/// every argument of the call so a relay cannot swap in other keys.
pub fn replace_message(
    contract: &Digest,
    pb_key: &PublicKey,
    tee_key: &PublicKey,
    from: &Commitment,
    to: &Commitment,
    signature: &Signature,
) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(REPLACE_DOMAIN).digest(contract);
    pb_key.encode_into(&mut enc);
    tee_key.encode_into(&mut enc);
    from.encode_into(&mut enc);
    to.encode_into(&mut enc);
    signature.encode_into(&mut enc);
    enc.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTx {
    pub caller: PublicKey,
    pub nonce: u64,
    pub call: Call,
    pub signature: Signature,
}

impl ChainTx {
    fn signing_bytes(caller: &PublicKey, nonce: u64, call: &Call) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(CHAIN_TX_DOMAIN);
        caller.encode_into(&mut enc);
        enc.u64(nonce);
        call.encode_into(&mut enc);
        enc.finish()
    }

    pub fn new(keys: &KeyPair, nonce: u64, call: Call) -> Self {
        let signature = keys.sign(&Self::signing_bytes(keys.public(), nonce, &call));
        ChainTx { caller: keys.public().clone(), nonce, call, signature }
    }

    pub fn hash(&self) -> Digest {
        let mut enc = Encoder::new();
        enc.raw(&Self::signing_bytes(&self.caller, self.nonce, &self.call));
        self.signature.encode_into(&mut enc);
        hash(&enc.finish())
    }

    pub fn has_valid_signature(&self) -> bool {
        crypto::verify(&self.caller, &Self::signing_bytes(&self.caller, self.nonce, &self.call), &self.signature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Tx,
    Query,
}

/// Registry entry for one censorship request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensInfo {
    pub kind: RequestKind,
    /// Digest of the encrypted transaction or query.
    pub request_hash: Digest,
    pub status: CensStatus,
    /// Digest of the encrypted answer, once resolved with one.
    pub edata_hash: Option<Digest>,
    pub submitter: PublicKey,
    pub submitted_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractState {
    /// Every enclave chain-platform key ever registered; the last is active.
    pub pb_keys: Vec<PublicKey>,
    pub tee_keys: Vec<PublicKey>,
    pub operator: PublicKey,
    pub lroot_pb: Commitment,
    pub requests: Vec<CensInfo>,
}

impl ContractState {
    pub fn active_pb_key(&self) -> &PublicKey {
        self.pb_keys.last().expect("key list never shrinks below one")
    }

    pub fn active_tee_key(&self) -> &PublicKey {
        self.tee_keys.last().expect("key list never shrinks below one")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "topic", rename_all = "snake_case")]
pub enum EventKind {
    Deployed { pb_key: PublicKey, tee_key: PublicKey, operator: PublicKey },
    RootAdvanced { from: Commitment, to: Commitment },
    TransitionRejected { from: Commitment, to: Commitment, anchored: Commitment },
    EnclaveReplaced { pb_key: PublicKey, tee_key: PublicKey },
    CensTxSubmitted {
        index: u64,
        #[serde(with = "crate::codec::hex_bytes")]
        etx: Vec<u8>,
    },
    CensQrySubmitted {
        index: u64,
        #[serde(with = "crate::codec::hex_bytes")]
        equery: Vec<u8>,
    },
    CensTxResolved { index: u64, status: CensStatus, signature: Signature },
    CensQryResolved {
        index: u64,
        status: CensStatus,
        #[serde(with = "crate::codec::opt_hex_bytes")]
        edata: Option<Vec<u8>>,
        signature: Signature,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainEvent {
    pub height: u64,
    pub contract: Digest,
    pub tx_hash: Digest,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOutput {
    None,
    Contract(Digest),
    Index(u64),
    Accepted(bool),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReceipt {
    pub tx_hash: Digest,
    pub height: u64,
    /// `None` on success, otherwise the revert reason.
    pub revert: Option<String>,
    pub output: CallOutput,
}

impl ChainReceipt {
    pub fn succeeded(&self) -> bool {
        self.revert.is_none()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Chain {
    height: u64,
    delay: u64,
    queue: VecDeque<(u64, ChainTx)>,
    nonces: BTreeMap<Digest, u64>,
    contracts: BTreeMap<Digest, ContractState>,
    events: Vec<ChainEvent>,
    receipts: BTreeMap<Digest, ChainReceipt>,
}

type CallResult = Result<(CallOutput, Vec<EventKind>), String>;

impl Chain {
    /// A chain whose transactions take effect `delay` ticks after submission.
    pub fn new(delay: u64) -> Self {
        Chain { delay, ..Default::default() }
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn delay(&self) -> u64 {
        self.delay
    }

    pub fn contract(&self, id: &Digest) -> Option<&ContractState> {
        self.contracts.get(id)
    }

    pub fn receipt(&self, tx_hash: &Digest) -> Option<&ChainReceipt> {
        self.receipts.get(tx_hash)
    }

    /// Events from position `cursor` on; pass the returned length back in to
    /// resume.
    pub fn events_since(&self, cursor: usize) -> &[ChainEvent] {
        &self.events[cursor.min(self.events.len())..]
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    /// Next unused nonce for `caller`, counting queued transactions.
    pub fn next_nonce(&self, caller: &PublicKey) -> u64 {
        let confirmed = self.nonces.get(&caller.account_id()).copied().unwrap_or(0);
        let queued = self.queue.iter().filter(|(_, tx)| tx.caller == *caller).count() as u64;
        confirmed + queued
    }

    /// Queues a transaction. It is checked and applied once `delay` ticks
    /// have passed, immediately when the delay is zero.
    pub fn submit(&mut self, tx: ChainTx) -> Result<Digest, ChainError> {
        if !tx.has_valid_signature() {
            return Err(ChainError::BadSignature);
        }
        let expected = self.next_nonce(&tx.caller);
        if tx.nonce != expected {
            return Err(ChainError::BadNonce { expected, got: tx.nonce });
        }
        let h = tx.hash();
        self.queue.push_back((self.height + self.delay, tx));
        self.apply_due();
        Ok(h)
    }

    /// Signs `call` with the next nonce for `keys` and submits it.
    pub fn send(&mut self, keys: &KeyPair, call: Call) -> Digest {
        let tx = ChainTx::new(keys, self.next_nonce(keys.public()), call);
        self.submit(tx).expect("freshly signed transaction with the next nonce")
    }

    /// Advances the chain by one block.
    pub fn tick(&mut self) {
        self.height += 1;
        self.apply_due();
    }

    fn apply_due(&mut self) {
        while self.queue.front().is_some_and(|(due, _)| *due <= self.height) {
            let (_, tx) = self.queue.pop_front().expect("front exists");
            self.apply(tx);
        }
    }

    fn apply(&mut self, tx: ChainTx) {
        let h = tx.hash();
        *self.nonces.entry(tx.caller.account_id()).or_default() += 1;
        let contract_id = match &tx.call {
            Call::Deploy { .. } => hash_parts(&[b"contract", &tx.caller.bytes, &tx.nonce.to_be_bytes()]),
            Call::PostLroot { contract, .. }
            | Call::ReplaceEnclave { contract, .. }
            | Call::SubmitCensTx { contract, .. }
            | Call::SubmitCensQry { contract, .. }
            | Call::ResolveCensTx { contract, .. }
            | Call::ResolveCensQry { contract, .. } => *contract,
        };
        let result = self.execute(&tx, contract_id);
        let (revert, output) = match result {
            Ok((output, events)) => {
                for kind in events {
                    self.events.push(ChainEvent { height: self.height, contract: contract_id, tx_hash: h, kind });
                }
                (None, output)
            }
            Err(reason) => (Some(reason), CallOutput::None),
        };
        self.receipts.insert(h, ChainReceipt { tx_hash: h, height: self.height, revert, output });
    }

    fn execute(&mut self, tx: &ChainTx, id: Digest) -> CallResult {
        let height = self.height;
        if let Call::Deploy { pb_key, tee_key, operator } = &tx.call {
            self.contracts.insert(
                id,
                ContractState {
                    pb_keys: vec![pb_key.clone()],
                    tee_keys: vec![tee_key.clone()],
                    operator: operator.clone(),
                    lroot_pb: Commitment::genesis(),
                    requests: Vec::new(),
                },
            );
            let ev = EventKind::Deployed { pb_key: pb_key.clone(), tee_key: tee_key.clone(), operator: operator.clone() };
            return Ok((CallOutput::Contract(id), vec![ev]));
        }
        let c = self.contracts.get_mut(&id).ok_or("no such contract")?;
        match &tx.call {
            Call::Deploy { .. } => unreachable!("handled above"),
            Call::PostLroot { from, to, signature, .. } => {
                if !crypto::verify(c.active_pb_key(), &transition_message(from, to), signature) {
                    return Err("enclave signature does not verify".into());
                }
                Ok(post_lroot(c, from, to))
            }
            Call::ReplaceEnclave { contract, pb_key, tee_key, from, to, signature, operator_sig } => {
                let msg = replace_message(contract, pb_key, tee_key, from, to, signature);
                if !crypto::verify(&c.operator, &msg, operator_sig) {
                    return Err("operator signature does not verify".into());
                }
                if !crypto::verify(pb_key, &transition_message(from, to), signature) {
                    return Err("replacement enclave signature does not verify".into());
                }
                let (out, mut events) = post_lroot(c, from, to);
                if out == CallOutput::Accepted(true) {
                    c.pb_keys.push(pb_key.clone());
                    c.tee_keys.push(tee_key.clone());
                    events.push(EventKind::EnclaveReplaced { pb_key: pb_key.clone(), tee_key: tee_key.clone() });
                }
                Ok((out, events))
            }
            Call::SubmitCensTx { etx, ticket, .. } => {
                check_ticket(c, &tx.caller, ticket, height)?;
                let index = push_request(c, RequestKind::Tx, etx, &tx.caller, height);
                Ok((CallOutput::Index(index), vec![EventKind::CensTxSubmitted { index, etx: etx.clone() }]))
            }
            Call::SubmitCensQry { equery, ticket, .. } => {
                check_ticket(c, &tx.caller, ticket, height)?;
                let index = push_request(c, RequestKind::Query, equery, &tx.caller, height);
                Ok((
                    CallOutput::Index(index),
                    vec![EventKind::CensQrySubmitted { index, equery: equery.clone() }],
                ))
            }
            Call::ResolveCensTx { index, status, signature, .. } => {
                let pk = c.active_pb_key().clone();
                let req = pending_request(c, *index)?;
                let etx_hash = match req.kind {
                    RequestKind::Tx => req.request_hash,
                    RequestKind::Query => hash(b""),
                };
                if !crypto::verify(&pk, &cens_tx_message(&etx_hash, *status), signature) {
                    return Err("enclave signature does not verify".into());
                }
                req.status = *status;
                let ev = EventKind::CensTxResolved { index: *index, status: *status, signature: signature.clone() };
                Ok((CallOutput::None, vec![ev]))
            }
            Call::ResolveCensQry { index, status, edata, signature, .. } => {
                let pk = c.active_pb_key().clone();
                let req = pending_request(c, *index)?;
                let equery_hash = match req.kind {
                    RequestKind::Query => req.request_hash,
                    RequestKind::Tx => hash(b""),
                };
                let edata_hash = hash(edata.as_deref().unwrap_or_default());
                if !crypto::verify(&pk, &cens_qry_message(&equery_hash, *status, &edata_hash), signature) {
                    return Err("enclave signature does not verify".into());
                }
                req.status = *status;
                req.edata_hash = edata.as_ref().map(|_| edata_hash);
                let ev = EventKind::CensQryResolved {
                    index: *index,
                    status: *status,
                    edata: edata.clone(),
                    signature: signature.clone(),
                };
                Ok((CallOutput::None, vec![ev]))
            }
        }
    }

    /// Contract state and event log as JSON.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "height": self.height,
            "contracts": self.contracts.iter().map(|(id, c)| (id.to_hex(), c)).collect::<BTreeMap<_, _>>(),
            "events": self.events,
        })
    }
}

/// The anchoring rule: a signed transition is accepted only from the
/// currently anchored root. Stale transitions succeed without effect and
/// leave a rejection event.
fn post_lroot(c: &mut ContractState, from: &Commitment, to: &Commitment) -> (CallOutput, Vec<EventKind>) {
    if c.lroot_pb == *from {
        c.lroot_pb = *to;
        (CallOutput::Accepted(true), vec![EventKind::RootAdvanced { from: *from, to: *to }])
    } else {
        let ev = EventKind::TransitionRejected { from: *from, to: *to, anchored: c.lroot_pb };
        (CallOutput::Accepted(false), vec![ev])
    }
}

fn check_ticket(c: &ContractState, caller: &PublicKey, t: &AccessTicket, height: u64) -> Result<(), String> {
    if t.client != *caller {
        return Err("ticket issued to another client".into());
    }
    if height >= t.expiry {
        return Err("ticket expired".into());
    }
    if !crypto::verify(c.active_pb_key(), &ticket_message(&t.client, t.expiry), &t.signature) {
        return Err("ticket signature does not verify".into());
    }
    Ok(())
}

fn push_request(c: &mut ContractState, kind: RequestKind, payload: &[u8], caller: &PublicKey, height: u64) -> u64 {
    c.requests.push(CensInfo {
        kind,
        request_hash: hash(payload),
        status: CensStatus::Pending,
        edata_hash: None,
        submitter: caller.clone(),
        submitted_at: height,
    });
    c.requests.len() as u64 - 1
}

fn pending_request(c: &mut ContractState, index: u64) -> Result<&mut CensInfo, String> {
    let req = c.requests.get_mut(index as usize).ok_or("request index out of range")?;
    if req.status != CensStatus::Pending {
        return Err("request already resolved".into());
    }
    Ok(req)
}
