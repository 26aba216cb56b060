//! Signing resolutions for censorship requests filed on chain. Every status
//! the enclave signs is backed by a proof against the anchored ledger root
//! (for transactions and blocks) or the current state root (for accounts).

use serde::{Deserialize, Serialize};

use crate::codec::Canonical;
use crate::crypto::{self, hash, Signature};
use crate::history::MembershipProof;
use crate::ledger::{cens_qry_message, cens_tx_message, Block, CensStatus, Header, Query};
use crate::merkle::MerkleProof;
use crate::mpt::MptProof;
use crate::vm::{AccountState, Transaction};

use super::{Enclave, EnclaveError};

/// Proof that a transaction sits in a block anchored on chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxEvidence {
    pub tx_proof: MerkleProof,
    pub header: Header,
    pub header_proof: MembershipProof,
}

/// Signed answer to a censored query. `edata` is the answer encrypted to the
/// client's reply key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResolution {
    pub status: CensStatus,
    pub edata: Option<Vec<u8>>,
    pub signature: Signature,
}

impl Enclave {
    fn parse_tx(&self, etx: &[u8]) -> Result<Transaction, CensStatus> {
        let plain = self.decrypt(etx).map_err(|_| CensStatus::ParsingError)?;
        let tx = Transaction::decode(&plain).map_err(|_| CensStatus::ParsingError)?;
        if !tx.is_well_formed() {
            return Err(CensStatus::ParsingError);
        }
        if !tx.has_valid_signature() {
            return Err(CensStatus::SignatureError);
        }
        Ok(tx)
    }

    fn parse_query(&self, equery: &[u8]) -> Option<Query> {
        let plain = self.decrypt(equery).ok()?;
        let q = Query::decode(&plain).ok()?;
        q.reply_to().is_well_formed().then_some(q)
    }

    /// Resolves a censored transaction. Undecryptable or malformed requests
    /// and bad client signatures are resolved without evidence; a valid
    /// transaction must come with proof of inclusion in an anchored block.
    pub fn sign_tx(&self, etx: &[u8], evidence: Option<&TxEvidence>) -> Result<(Signature, CensStatus), EnclaveError> {
        let s = self.session()?;
        let status = match self.parse_tx(etx) {
            Err(status) => status,
            Ok(tx) => {
                let ev = evidence.ok_or(EnclaveError::BadProof("inclusion evidence required"))?;
                if !ev.tx_proof.verify(&tx.encode(), &ev.header.txs_root) {
                    return Err(EnclaveError::BadProof("transaction not in header"));
                }
                let id = ev.header.id;
                if id == 0
                    || id > s.lroot_pb.version
                    || !ev.header_proof.verify(id - 1, &ev.header.record(), &s.lroot_pb)
                {
                    return Err(EnclaveError::BadProof("header not in the anchored ledger"));
                }
                CensStatus::Included
            }
        };
        Ok((s.pb.sign(&cens_tx_message(&hash(etx), status)), status))
    }

    fn resolve_query(
        &mut self,
        equery: &[u8],
        status: CensStatus,
        answer: Option<(&Query, Vec<u8>)>,
    ) -> Result<QueryResolution, EnclaveError> {
        let edata = match answer {
            Some((q, plain)) => Some(crypto::encrypt(q.reply_to(), &plain, &mut self.rng)?.to_bytes()),
            None => None,
        };
        let edata_hash = hash(edata.as_deref().unwrap_or_default());
        let s = self.session()?;
        let signature = s.pb.sign(&cens_qry_message(&hash(equery), status, &edata_hash));
        Ok(QueryResolution { status, edata, signature })
    }

    /// Resolves a censored transaction read. Blocks beyond the anchored
    /// version are reported missing; otherwise the block must be proven part
    /// of the anchored ledger and internally consistent.
    pub fn sign_qry_tx(
        &mut self,
        equery: &[u8],
        block: Option<&Block>,
        header_proof: Option<&MembershipProof>,
    ) -> Result<QueryResolution, EnclaveError> {
        let anchored = self.session()?.lroot_pb;
        let Some(q) = self.parse_query(equery) else {
            return self.resolve_query(equery, CensStatus::ParsingError, None);
        };
        let Query::ReadTx { tx_id, block_id, .. } = q else {
            return Err(EnclaveError::WrongQueryKind);
        };
        if block_id == 0 || block_id > anchored.version {
            return self.resolve_query(equery, CensStatus::BlkNotFound, None);
        }
        let (Some(blk), Some(proof)) = (block, header_proof) else {
            return Err(EnclaveError::BadProof("block and header proof required"));
        };
        if blk.header.id != block_id || !proof.verify(block_id - 1, &blk.header.record(), &anchored) {
            return Err(EnclaveError::BadProof("block not in the anchored ledger"));
        }
        blk.check_consistency()?;
        match blk.position(&tx_id) {
            Some(i) => {
                let plain = blk.txs[i].encode();
                self.resolve_query(equery, CensStatus::Ok, Some((&q, plain)))
            }
            None => self.resolve_query(equery, CensStatus::TxNotFound, None),
        }
    }

    /// Resolves a censored account read against the state root of the last
    /// executed block.
    pub fn sign_qry_as(
        &mut self,
        equery: &[u8],
        account: Option<&AccountState>,
        proof: &MptProof,
    ) -> Result<QueryResolution, EnclaveError> {
        let root = self.state_root()?;
        let Some(q) = self.parse_query(equery) else {
            return self.resolve_query(equery, CensStatus::ParsingError, None);
        };
        let Query::ReadAs { account: id, .. } = q else {
            return Err(EnclaveError::WrongQueryKind);
        };
        match account {
            None => {
                if !proof.verify_exclusion(&id, &root) {
                    return Err(EnclaveError::BadProof("exclusion proof"));
                }
                self.resolve_query(equery, CensStatus::NotFound, None)
            }
            Some(acct) => {
                let plain = acct.encode();
                if proof.verify_inclusion(&id, &root).as_ref() != Some(&plain) {
                    return Err(EnclaveError::BadProof("inclusion proof"));
                }
                self.resolve_query(equery, CensStatus::Ok, Some((&q, plain)))
            }
        }
    }
}
