//! Client library: building and signing transactions, attesting the
//! enclave, verifying receipts and escalating censored requests on chain.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Call, CallOutput, Chain, ContractState, EventKind, RequestKind};
use crate::codec::Canonical;
use crate::crypto::{self, hash, CryptoError, Digest, KeyPair, PublicKey};
use crate::enclave::{Quote, QuoteError};
use crate::ledger::{cens_qry_message, cens_tx_message, transition_message, AccessTicket, CensStatus, Query};
use crate::operator::ReceiptBundle;
use crate::vm::{Transaction, MAX_PAYLOAD};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(usize),
    #[error("contract not found on chain")]
    NoContract,
    #[error("enclave keys are not attested; call attest first")]
    NotAttested,
    #[error("attestation failed: {0}")]
    Attestation(#[from] QuoteError),
    #[error("no access ticket")]
    NoTicket,
    #[error("encryption failed: {0}")]
    Crypto(#[from] CryptoError),
    #[error("chain call reverted: {0}")]
    Reverted(String),
    #[error("request {0} does not exist")]
    UnknownRequest(u64),
    #[error("resolution of request {0} carries no valid enclave signature")]
    UnsignedResolution(u64),
    #[error("request {0} resolved as OK but its answer does not decrypt")]
    ProtocolViolation(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReceiptError {
    #[error("contract not found on chain")]
    NoContract,
    #[error("pinned enclave key is not the contract's active key")]
    StaleKeys,
    #[error("bundle claims to be anchored but the contract holds another root")]
    NotAnchored,
    #[error("incremental proof and signature must be both present or both absent")]
    Incomplete,
    #[error("enclave signature over the version transition is invalid")]
    Signature,
    #[error("incremental proof does not extend the anchored root")]
    Extension,
    #[error("header is not in the ledger")]
    Header,
    #[error("receipt is not in the block")]
    Receipt,
    #[error("receipt belongs to another transaction")]
    WrongTx,
}

/// How firmly a verified receipt is backed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    /// The block is part of the version anchored on chain.
    Anchored,
    /// Signed by the enclave as an extension of the anchored version but not
    /// yet anchored itself.
    Promise,
}

/// Public record that a request has gone unanswered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensorshipEvidence {
    pub contract: Digest,
    pub request_index: u64,
    pub submitted_at: u64,
    pub now: u64,
    pub ciphertext_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Pending(CensorshipEvidence),
    Resolved { status: CensStatus, data: Option<Vec<u8>> },
}

pub struct Client {
    keys: KeyPair,
    nonce: u64,
    contract: Digest,
    vendor: PublicKey,
    measurement: Digest,
    pinned: Option<(PublicKey, PublicKey)>,
    ticket: Option<AccessTicket>,
    rng: ChaCha20Rng,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client")
            .field("public", self.keys.public())
            .field("nonce", &self.nonce)
            .finish_non_exhaustive()
    }
}

impl Client {
    /// `vendor` and `measurement` are the attestation root and the expected
    /// enclave program measurement the client trusts.
    pub fn new(keys: KeyPair, contract: Digest, vendor: PublicKey, measurement: Digest, rng: ChaCha20Rng) -> Self {
        Client { keys, nonce: 0, contract, vendor, measurement, pinned: None, ticket: None, rng }
    }

    pub fn public(&self) -> &PublicKey {
        self.keys.public()
    }

    pub fn account(&self) -> Digest {
        self.keys.public().account_id()
    }

    pub fn nonce(&self) -> u64 {
        self.nonce
    }

    pub fn set_nonce(&mut self, nonce: u64) {
        self.nonce = nonce;
    }

    pub fn set_ticket(&mut self, ticket: AccessTicket) {
        self.ticket = Some(ticket);
    }

    pub fn pinned_pb_key(&self) -> Option<&PublicKey> {
        self.pinned.as_ref().map(|(pb, _)| pb)
    }

    fn contract_state<'c>(&self, chain: &'c Chain) -> Result<&'c ContractState, ClientError> {
        chain.contract(&self.contract).ok_or(ClientError::NoContract)
    }

    /// Checks the quote against the vendor root, the expected measurement
    /// and the keys the contract currently lists, and pins those keys.
    pub fn attest(&mut self, quote: &Quote, chain: &Chain) -> Result<(), ClientError> {
        let c = self.contract_state(chain)?;
        quote.verify_keys(&self.vendor, &self.measurement, c.active_tee_key(), c.active_pb_key())?;
        self.pinned = Some((quote.pb_key.clone(), quote.tee_key.clone()));
        Ok(())
    }

    fn next(&mut self, build: impl FnOnce(&KeyPair, u64) -> Transaction, payload_len: usize) -> Result<Transaction, ClientError> {
        if payload_len > MAX_PAYLOAD {
            return Err(ClientError::PayloadTooLarge(payload_len));
        }
        let tx = build(&self.keys, self.nonce);
        self.nonce += 1;
        Ok(tx)
    }

    pub fn transfer(&mut self, to: Digest, amount: u64) -> Result<Transaction, ClientError> {
        self.next(|k, n| Transaction::transfer(k, n, to, amount), 0)
    }

    pub fn deploy(&mut self, code: Vec<u8>, endowment: u64) -> Result<Transaction, ClientError> {
        let len = code.len();
        self.next(|k, n| Transaction::deploy(k, n, code, endowment), len)
    }

    pub fn call(&mut self, contract: Digest, value: u64, data: Vec<u8>) -> Result<Transaction, ClientError> {
        let len = data.len();
        self.next(|k, n| Transaction::call(k, n, contract, value, data), len)
    }

    /// Verifies that `tx` was executed with the bundled receipt, relative to
    /// the root currently anchored on chain.
    pub fn verify_receipt(&self, bundle: &ReceiptBundle, tx: &Transaction, chain: &Chain) -> Result<Confidence, ReceiptError> {
        let c = chain.contract(&self.contract).ok_or(ReceiptError::NoContract)?;
        let pk = match &self.pinned {
            Some((pb, _)) if pb == c.active_pb_key() => pb,
            _ => return Err(ReceiptError::StaleKeys),
        };
        let anchored = c.lroot_pb;
        let confidence = match (&bundle.inc_proof, &bundle.signature) {
            (None, None) => {
                if bundle.lroot_cur != anchored {
                    return Err(ReceiptError::NotAnchored);
                }
                Confidence::Anchored
            }
            (Some(inc), Some(sig)) => {
                if !crypto::verify(pk, &transition_message(&anchored, &bundle.lroot_cur), sig) {
                    return Err(ReceiptError::Signature);
                }
                if !inc.verify(&anchored, &bundle.lroot_cur) {
                    return Err(ReceiptError::Extension);
                }
                Confidence::Promise
            }
            _ => return Err(ReceiptError::Incomplete),
        };
        let id = bundle.header.id;
        if id == 0 || !bundle.header_proof.verify(id - 1, &bundle.header.record(), &bundle.lroot_cur) {
            return Err(ReceiptError::Header);
        }
        if !bundle.receipt_proof.verify(&bundle.receipt.encode(), &bundle.header.rcp_root) {
            return Err(ReceiptError::Receipt);
        }
        if bundle.receipt.tx_hash != tx.id() {
            return Err(ReceiptError::WrongTx);
        }
        Ok(confidence)
    }

    fn encrypt_to_enclave(&mut self, plain: &[u8]) -> Result<Vec<u8>, ClientError> {
        let (pb, _) = self.pinned.as_ref().ok_or(ClientError::NotAttested)?;
        Ok(crypto::encrypt(pb, plain, &mut self.rng)?.to_bytes())
    }

    /// Files `tx` with the contract as a censored transaction. Returns the
    /// chain transaction hash; see [`request_index`](Self::request_index).
    pub fn escalate_tx(&mut self, tx: &Transaction, chain: &mut Chain) -> Result<Digest, ClientError> {
        let etx = self.encrypt_to_enclave(&tx.encode())?;
        self.escalate_raw_tx(etx, chain)
    }

    /// Files an arbitrary ciphertext as a censored transaction.
    pub fn escalate_raw_tx(&mut self, etx: Vec<u8>, chain: &mut Chain) -> Result<Digest, ClientError> {
        let ticket = self.ticket.clone().ok_or(ClientError::NoTicket)?;
        Ok(chain.send(&self.keys, Call::SubmitCensTx { contract: self.contract, etx, ticket }))
    }

    pub fn escalate_query(&mut self, query: &Query, chain: &mut Chain) -> Result<Digest, ClientError> {
        let equery = self.encrypt_to_enclave(&query.encode())?;
        let ticket = self.ticket.clone().ok_or(ClientError::NoTicket)?;
        Ok(chain.send(&self.keys, Call::SubmitCensQry { contract: self.contract, equery, ticket }))
    }

    pub fn read_tx_query(&self, tx_id: Digest, block_id: u64) -> Query {
        Query::ReadTx { tx_id, block_id, reply_to: self.keys.public().clone() }
    }

    pub fn read_account_query(&self, account: Digest) -> Query {
        Query::ReadAs { account, reply_to: self.keys.public().clone() }
    }

    /// Registry index assigned to an escalation once it is confirmed.
    pub fn request_index(&self, chain: &Chain, chain_tx: &Digest) -> Result<Option<u64>, ClientError> {
        match chain.receipt(chain_tx) {
            None => Ok(None),
            Some(r) => match (&r.revert, r.output) {
                (Some(reason), _) => Err(ClientError::Reverted(reason.clone())),
                (None, CallOutput::Index(i)) => Ok(Some(i)),
                (None, _) => Err(ClientError::Reverted("unexpected call output".into())),
            },
        }
    }

    /// Reads the registry entry for `index`. A resolved entry is accepted
    /// only with a resolution event whose enclave signature verifies under a
    /// key the contract has registered; an encrypted answer is decrypted.
    pub fn check_resolution(&self, chain: &Chain, index: u64) -> Result<Resolution, ClientError> {
        let c = self.contract_state(chain)?;
        let req = c.requests.get(index as usize).ok_or(ClientError::UnknownRequest(index))?;
        if req.status == CensStatus::Pending {
            return Ok(Resolution::Pending(CensorshipEvidence {
                contract: self.contract,
                request_index: index,
                submitted_at: req.submitted_at,
                now: chain.height(),
                ciphertext_digest: req.request_hash,
            }));
        }
        let signed_by_enclave = |msg: &[u8], sig| c.pb_keys.iter().any(|pk| crypto::verify(pk, msg, sig));
        for ev in chain.events_since(0).iter().filter(|e| e.contract == self.contract) {
            match (&ev.kind, req.kind) {
                (EventKind::CensTxResolved { index: i, status, signature }, RequestKind::Tx) if *i == index => {
                    if *status == req.status && signed_by_enclave(&cens_tx_message(&req.request_hash, *status), signature) {
                        return Ok(Resolution::Resolved { status: *status, data: None });
                    }
                }
                (EventKind::CensQryResolved { index: i, status, edata, signature }, RequestKind::Query) if *i == index => {
                    let edata_hash = hash(edata.as_deref().unwrap_or_default());
                    let msg = cens_qry_message(&req.request_hash, *status, &edata_hash);
                    if *status != req.status || !signed_by_enclave(&msg, signature) {
                        continue;
                    }
                    let data = match edata {
                        None => None,
                        Some(blob) => match crypto::decrypt_bytes(&self.keys, blob) {
                            Ok(plain) => Some(plain),
                            Err(_) => return Err(ClientError::ProtocolViolation(index)),
                        },
                    };
                    if *status == CensStatus::Ok && data.is_none() {
                        return Err(ClientError::ProtocolViolation(index));
                    }
                    return Ok(Resolution::Resolved { status: *status, data });
                }
                _ => {}
            }
        }
        Err(ClientError::UnsignedResolution(index))
    }
}
