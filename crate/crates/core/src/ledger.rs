//! Ledger records and the protocol messages shared by the enclave, the chain
//! contract, the operator and clients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{hash, Digest, PublicKey, Signature};
use crate::history::Commitment;
use crate::merkle::mk_root;
use crate::vm::{Receipt, Transaction};

const TRANSITION_DOMAIN: &[u8] = b"vledger/transition/v1";
const CENS_TX_DOMAIN: &[u8] = b"vledger/cens-tx/v1";
const CENS_QRY_DOMAIN: &[u8] = b"vledger/cens-qry/v1";
const TICKET_DOMAIN: &[u8] = b"vledger/ticket/v1";

/// Block header. `id` equals the history-tree version reached by appending
/// this header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub id: u64,
    pub txs_root: Digest,
    pub rcp_root: Digest,
    pub st_root: Digest,
}

impl Header {
    /// Record stored in the history tree for this header.
    pub fn record(&self) -> Digest {
        hash(&self.encode())
    }
}

/// Record the operator appends in place of the not-yet-known header when it
/// builds a proof template; the enclave overwrites it.
pub fn placeholder_record() -> Digest {
    Digest::ZERO
}

impl Canonical for Header {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(self.id)
            .digest(&self.txs_root)
            .digest(&self.rcp_root)
            .digest(&self.st_root);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Header {
            id: dec.u64()?,
            txs_root: dec.digest()?,
            rcp_root: dec.digest()?,
            st_root: dec.digest()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockError {
    #[error("{txs} transactions but {rcps} receipts")]
    CountMismatch { txs: usize, rcps: usize },
    #[error("receipt {0} does not refer to the transaction at the same position")]
    ReceiptOrder(usize),
    #[error("transaction root does not match the header")]
    TxsRoot,
    #[error("receipt root does not match the header")]
    RcpRoot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: Header,
    pub txs: Vec<Transaction>,
    pub receipts: Vec<Receipt>,
}

pub fn txs_root(txs: &[Transaction]) -> Digest {
    mk_root(&txs.iter().map(Canonical::encode).collect::<Vec<_>>())
}

pub fn rcp_root(rcps: &[Receipt]) -> Digest {
    mk_root(&rcps.iter().map(Canonical::encode).collect::<Vec<_>>())
}

impl Block {
    /// Recomputes both Merkle roots and checks that receipts line up with
    /// transactions one to one.
    pub fn check_consistency(&self) -> Result<(), BlockError> {
        if self.txs.len() != self.receipts.len() {
            return Err(BlockError::CountMismatch { txs: self.txs.len(), rcps: self.receipts.len() });
        }
        for (i, (tx, rcp)) in self.txs.iter().zip(&self.receipts).enumerate() {
            if rcp.tx_hash != tx.id() {
                return Err(BlockError::ReceiptOrder(i));
            }
        }
        if txs_root(&self.txs) != self.header.txs_root {
            return Err(BlockError::TxsRoot);
        }
        if rcp_root(&self.receipts) != self.header.rcp_root {
            return Err(BlockError::RcpRoot);
        }
        Ok(())
    }

    pub fn position(&self, tx_id: &Digest) -> Option<usize> {
        self.txs.iter().position(|tx| tx.id() == *tx_id)
    }
}

impl Canonical for Block {
    fn encode_into(&self, enc: &mut Encoder) {
        self.header.encode_into(enc);
        enc.u32(self.txs.len() as u32);
        for tx in &self.txs {
            tx.encode_into(enc);
        }
        enc.u32(self.receipts.len() as u32);
        for r in &self.receipts {
            r.encode_into(enc);
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let header = Header::decode_from(dec)?;
        let n = dec.count(1)?;
        let txs = (0..n).map(|_| Transaction::decode_from(dec)).collect::<Result<_, _>>()?;
        let n = dec.count(1)?;
        let receipts = (0..n).map(|_| Receipt::decode_from(dec)).collect::<Result<_, _>>()?;
        Ok(Block { header, txs, receipts })
    }
}

/// Message the enclave signs to move the anchored root from `from` to `to`.
pub fn transition_message(from: &Commitment, to: &Commitment) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(TRANSITION_DOMAIN);
    from.encode_into(&mut enc);
    to.encode_into(&mut enc);
    enc.finish()
}

/// Outcome of a censorship request. `Pending` is the on-chain state before
/// resolution and is never signed by the enclave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CensStatus {
    Pending,
    Included,
    ParsingError,
    SignatureError,
    Ok,
    TxNotFound,
    BlkNotFound,
    NotFound,
}

impl CensStatus {
    pub fn tag(self) -> u8 {
        match self {
            CensStatus::Pending => 0,
            CensStatus::Included => 1,
            CensStatus::ParsingError => 2,
            CensStatus::SignatureError => 3,
            CensStatus::Ok => 4,
            CensStatus::TxNotFound => 5,
            CensStatus::BlkNotFound => 6,
            CensStatus::NotFound => 7,
        }
    }

    /// Wire name, as used in JSON.
    pub fn name(self) -> &'static str {
        match self {
            CensStatus::Pending => "PENDING",
            CensStatus::Included => "INCLUDED",
            CensStatus::ParsingError => "PARSING_ERROR",
            CensStatus::SignatureError => "SIGNATURE_ERROR",
            CensStatus::Ok => "OK",
            CensStatus::TxNotFound => "TX_NOT_FOUND",
            CensStatus::BlkNotFound => "BLK_NOT_FOUND",
            CensStatus::NotFound => "NOT_FOUND",
        }
    }
}

pub fn cens_tx_message(etx_hash: &Digest, status: CensStatus) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(CENS_TX_DOMAIN).digest(etx_hash).u8(status.tag());
    enc.finish()
}

/// `edata_hash` is the hash of the encrypted answer, or of the empty string
/// when there is none.
pub fn cens_qry_message(equery_hash: &Digest, status: CensStatus, edata_hash: &Digest) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(CENS_QRY_DOMAIN).digest(equery_hash).u8(status.tag()).digest(edata_hash);
    enc.finish()
}

/// Read request a client escalates to the chain when the operator ignores it.
/// Answers are encrypted to `reply_to`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Query {
    ReadTx { tx_id: Digest, block_id: u64, reply_to: PublicKey },
    ReadAs { account: Digest, reply_to: PublicKey },
}

impl Query {
    pub fn reply_to(&self) -> &PublicKey {
        match self {
            Query::ReadTx { reply_to, .. } | Query::ReadAs { reply_to, .. } => reply_to,
        }
    }
}

impl Canonical for Query {
    fn encode_into(&self, enc: &mut Encoder) {
        match self {
            Query::ReadTx { tx_id, block_id, reply_to } => {
                enc.u8(1).digest(tx_id).u64(*block_id);
                reply_to.encode_into(enc);
            }
            Query::ReadAs { account, reply_to } => {
                enc.u8(2).digest(account);
                reply_to.encode_into(enc);
            }
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            1 => Ok(Query::ReadTx {
                tx_id: dec.digest()?,
                block_id: dec.u64()?,
                reply_to: PublicKey::decode_from(dec)?,
            }),
            2 => Ok(Query::ReadAs { account: dec.digest()?, reply_to: PublicKey::decode_from(dec)? }),
            tag => Err(DecodeError::BadTag { what: "query type", tag }),
        }
    }
}

/// Enclave-issued permission for a registered client to file censorship
/// requests until chain height `expiry`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessTicket {
    pub client: PublicKey,
    pub expiry: u64,
    pub signature: Signature,
}

pub fn ticket_message(client: &PublicKey, expiry: u64) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(TICKET_DOMAIN);
    client.encode_into(&mut enc);
    enc.u64(expiry);
    enc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyPair, Scheme};
    use crate::merkle::{leaf_hash, node_hash};
    use crate::vm::ReturnCode;
    use rand_chacha::ChaCha20Rng;
    use rand_core::SeedableRng;

    #[test]
    fn status_names_match_json() {
        use CensStatus::*;
        for s in [Pending, Included, ParsingError, SignatureError, Ok, TxNotFound, BlkNotFound, NotFound] {
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }

    fn block(n: usize) -> Block {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let k = KeyPair::generate(Scheme::Pb, &mut rng);
        let txs: Vec<Transaction> =
            (0..n).map(|i| Transaction::transfer(&k, i as u64, Digest::ZERO, 1)).collect();
        let receipts: Vec<Receipt> = txs
            .iter()
            .map(|t| Receipt { tx_hash: t.id(), code: ReturnCode::Ok, logs: vec![] })
            .collect();
        let header = Header {
            id: 1,
            txs_root: txs_root(&txs),
            rcp_root: rcp_root(&receipts),
            st_root: Digest::ZERO,
        };
        Block { header, txs, receipts }
    }

    #[test]
    fn roots_are_merkle_over_encodings() {
        let b = block(2);
        let l = leaf_hash(&b.txs[0].encode());
        let r = leaf_hash(&b.txs[1].encode());
        assert_eq!(b.header.txs_root, node_hash(&l, &r));
        assert_eq!(b.check_consistency(), Ok(()));
        assert_eq!(Block::decode(&b.encode()).unwrap(), b);
    }

    #[test]
    fn consistency_failures() {
        let mut b = block(3);
        b.receipts.swap(0, 1);
        assert_eq!(b.check_consistency(), Err(BlockError::ReceiptOrder(0)));
        let mut b = block(3);
        b.receipts.pop();
        assert!(matches!(b.check_consistency(), Err(BlockError::CountMismatch { .. })));
        let mut b = block(3);
        b.header.rcp_root = Digest::ZERO;
        assert_eq!(b.check_consistency(), Err(BlockError::RcpRoot));
        let mut b = block(3);
        b.receipts[2].code = ReturnCode::Reverted;
        assert_eq!(b.check_consistency(), Err(BlockError::RcpRoot));
        let empty = Block {
            header: Header { id: 1, txs_root: mk_root::<&[u8]>(&[]), rcp_root: mk_root::<&[u8]>(&[]), st_root: Digest::ZERO },
            txs: vec![],
            receipts: vec![],
        };
        assert_eq!(empty.check_consistency(), Ok(()));
    }

    #[test]
    fn header_layout() {
        let h = Header { id: 7, txs_root: Digest::new([1; 32]), rcp_root: Digest::new([2; 32]), st_root: Digest::new([3; 32]) };
        let bytes = h.encode();
        assert_eq!(bytes.len(), 8 + 96);
        assert_eq!(&bytes[..8], &7u64.to_be_bytes());
        assert_eq!(h.record(), hash(&bytes));
    }

    #[test]
    fn messages_are_domain_separated() {
        let d = Digest::new([9; 32]);
        let a = cens_tx_message(&d, CensStatus::Included);
        let b = cens_tx_message(&d, CensStatus::ParsingError);
        assert_ne!(a, b);
        assert_ne!(&a[..], &cens_qry_message(&d, CensStatus::Included, &d)[..a.len()]);
        let c = Commitment { version: 1, root: d };
        assert_ne!(transition_message(&c, &c), transition_message(&Commitment::genesis(), &c));
    }

    #[test]
    fn query_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let k = KeyPair::generate(Scheme::Pb, &mut rng);
        for q in [
            Query::ReadTx { tx_id: Digest::new([4; 32]), block_id: 3, reply_to: k.public().clone() },
            Query::ReadAs { account: Digest::new([5; 32]), reply_to: k.public().clone() },
        ] {
            assert_eq!(Query::decode(&q.encode()).unwrap(), q);
            let json = serde_json::to_string(&q).unwrap();
            assert_eq!(serde_json::from_str::<Query>(&json).unwrap(), q);
        }
        assert!(Query::decode(&[3]).is_err());
    }
}
