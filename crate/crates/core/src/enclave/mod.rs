//! The trusted ledger program. It executes blocks against partial state,
//! extends the ledger through operator-built proof templates, signs version
//! transitions, resolves censorship requests, seals its state and can be
//! re-initialized on a new platform after a failure.
//!
//! Everything secret lives in private fields; the only way in or out is the
//! method surface below, which plays the role of the enclave boundary.

mod censorship;
pub mod tee;

use rand_chacha::ChaCha20Rng;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{self, CryptoError, Digest, KeyPair, PublicKey, Scheme, Signature};
use crate::history::{Commitment, HistoryError, IncrementalProof, MembershipProof};
use crate::ledger::{rcp_root, ticket_message, transition_message, txs_root, AccessTicket, Block, BlockError, Header};
use crate::mpt::{MptError, PartialState};
use crate::vm::{run_vm, RunOutcome, Transaction, VmConfig, VmError};

pub use censorship::{QueryResolution, TxEvidence};
pub use tee::{measurement, Quote, QuoteError, TeePlatform, TeeVendor};
use tee::PlatformContext;

/// Magic bytes opening every sealed-state blob.
pub const SEAL_MAGIC: &[u8; 4] = b"AQSE";

/// Launch parameters bound into the measurement. Binding the genesis state
/// root means clients that attest the enclave also agree on the initial
/// balances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnclaveConfig {
    pub genesis_root: Digest,
    pub vm: VmConfig,
}

impl Canonical for EnclaveConfig {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.digest(&self.genesis_root).u64(self.vm.step_budget);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(EnclaveConfig {
            genesis_root: dec.digest()?,
            vm: VmConfig { step_budget: dec.u64()? },
        })
    }
}

#[derive(Debug, Error)]
pub enum EnclaveError {
    #[error("enclave is not initialized")]
    NotInitialized,
    #[error("enclave is already initialized")]
    AlreadyInitialized,
    #[error("partial state rejected: {0}")]
    PartialState(#[from] MptError),
    #[error("proof template rejected: {0}")]
    Template(&'static str),
    #[error("history proof rejected: {0}")]
    History(#[from] HistoryError),
    #[error("execution failed: {0}")]
    Vm(#[from] VmError),
    #[error("decryption failed: {0}")]
    Decrypt(#[from] CryptoError),
    #[error("supplied proof does not verify: {0}")]
    BadProof(&'static str),
    #[error("block is inconsistent: {0}")]
    Block(#[from] BlockError),
    #[error("query type does not match the handler")]
    WrongQueryKind,
    #[error("sealed state rejected: {0}")]
    Seal(&'static str),
    #[error("replay diverged: {0}")]
    Divergence(String),
    #[error("operator callback failed: {0}")]
    Host(String),
}

/// Result of executing one block.
#[derive(Debug, Clone)]
pub struct ExecOutput {
    pub lroot_pb: Commitment,
    pub lroot_cur: Commitment,
    pub ps_new: PartialState,
    /// Header plus the executed transactions and their receipts.
    pub block: Block,
    /// Transactions dropped for being malformed or badly signed.
    pub rejected: Vec<Transaction>,
    /// Signature over the pair (`lroot_pb`, `lroot_cur`).
    pub signature: Signature,
}

#[derive(Debug, Clone)]
pub struct ReinitOutput {
    pub lroot_pb: Commitment,
    pub lroot_cur: Commitment,
    pub signature: Signature,
    pub pb_key: PublicKey,
    pub tee_key: PublicKey,
}

/// Freshness information recovered when unsealing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnsealReport {
    pub counter: u64,
    /// The platform has sealed a newer state since this blob was written,
    /// so the blob may be a rollback.
    pub stale: bool,
}

/// Operator services the enclave calls back into while replaying
/// unsynced blocks during re-initialization.
pub trait ReplayHost {
    /// Membership proof for the record at `index` against `at`.
    fn header_proof(&mut self, index: u64, at: &Commitment) -> Result<MembershipProof, String>;
    /// Proof template extending the operator's current ledger by one slot.
    fn next_template(&mut self) -> Result<(IncrementalProof, Commitment), String>;
    /// Partial state for the accounts `txs` touch, at the operator's current state.
    fn partial_state(&mut self, txs: &[Transaction]) -> Result<PartialState, String>;
    /// Re-executes `block` on the operator side and appends it to its ledger,
    /// returning the new ledger commitment.
    fn replay(&mut self, block: &Block) -> Result<Commitment, String>;
}

struct Session {
    pb: KeyPair,
    tee: KeyPair,
    hdr_last: Option<Header>,
    lroot_pb: Commitment,
    lroot_cur: Commitment,
}

impl Session {
    fn fresh(rng: &mut ChaCha20Rng) -> Self {
        Session {
            pb: KeyPair::generate(Scheme::Pb, rng),
            tee: KeyPair::generate(Scheme::Tee, rng),
            hdr_last: None,
            lroot_pb: Commitment::genesis(),
            lroot_cur: Commitment::genesis(),
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(&self.pb.secret_bytes()).raw(&self.tee.secret_bytes());
        enc.bool(self.hdr_last.is_some());
        if let Some(h) = &self.hdr_last {
            h.encode_into(&mut enc);
        }
        self.lroot_pb.encode_into(&mut enc);
        self.lroot_cur.encode_into(&mut enc);
        enc.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, EnclaveError> {
        let bad = |_| EnclaveError::Seal("sealed payload does not decode");
        let mut dec = Decoder::new(bytes);
        let pb = KeyPair::from_secret(Scheme::Pb, &dec.array().map_err(bad)?)?;
        let tee = KeyPair::from_secret(Scheme::Tee, &dec.array().map_err(bad)?)?;
        let hdr_last = if dec.bool().map_err(bad)? {
            Some(Header::decode_from(&mut dec).map_err(bad)?)
        } else {
            None
        };
        let lroot_pb = Commitment::decode_from(&mut dec).map_err(bad)?;
        let lroot_cur = Commitment::decode_from(&mut dec).map_err(bad)?;
        dec.finish().map_err(bad)?;
        Ok(Session { pb, tee, hdr_last, lroot_pb, lroot_cur })
    }
}

/// Result of processing a block without committing it.
struct Processed {
    lroot_cur: Commitment,
    ps_new: PartialState,
    block: Block,
    rejected: Vec<Transaction>,
}

pub struct Enclave {
    config: EnclaveConfig,
    measurement: Digest,
    platform: PlatformContext,
    rng: ChaCha20Rng,
    session: Option<Session>,
}

impl std::fmt::Debug for Enclave {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Enclave")
            .field("measurement", &self.measurement)
            .field("initialized", &self.session.is_some())
            .finish_non_exhaustive()
    }
}

impl Enclave {
    fn new(config: EnclaveConfig, measurement: Digest, platform: PlatformContext, rng: ChaCha20Rng) -> Self {
        Enclave { config, measurement, platform, rng, session: None }
    }

    fn session(&self) -> Result<&Session, EnclaveError> {
        self.session.as_ref().ok_or(EnclaveError::NotInitialized)
    }

    fn ensure_fresh(&self) -> Result<(), EnclaveError> {
        match self.session {
            Some(_) => Err(EnclaveError::AlreadyInitialized),
            None => Ok(()),
        }
    }

    pub fn config(&self) -> &EnclaveConfig {
        &self.config
    }

    pub fn measurement(&self) -> Digest {
        self.measurement
    }

    pub fn is_initialized(&self) -> bool {
        self.session.is_some()
    }

    /// Generates both key pairs and starts at the genesis roots. Returns
    /// (tee key, chain-platform key).
    pub fn init(&mut self) -> Result<(PublicKey, PublicKey), EnclaveError> {
        self.ensure_fresh()?;
        let s = Session::fresh(&mut self.rng);
        let keys = (s.tee.public().clone(), s.pb.public().clone());
        self.session = Some(s);
        Ok(keys)
    }

    pub fn pb_key(&self) -> Result<&PublicKey, EnclaveError> {
        Ok(self.session()?.pb.public())
    }

    pub fn tee_key(&self) -> Result<&PublicKey, EnclaveError> {
        Ok(self.session()?.tee.public())
    }

    pub fn lroot_pb(&self) -> Result<Commitment, EnclaveError> {
        Ok(self.session()?.lroot_pb)
    }

    pub fn lroot_cur(&self) -> Result<Commitment, EnclaveError> {
        Ok(self.session()?.lroot_cur)
    }

    pub fn hdr_last(&self) -> Result<Option<Header>, EnclaveError> {
        Ok(self.session()?.hdr_last)
    }

    /// Identifier the next executed block will carry.
    pub fn id_cur(&self) -> Result<u64, EnclaveError> {
        Ok(self.session()?.lroot_cur.version + 1)
    }

    /// State root after the last executed block, or the genesis root.
    pub fn state_root(&self) -> Result<Digest, EnclaveError> {
        let s = self.session()?;
        Ok(s.hdr_last.map_or(self.config.genesis_root, |h| h.st_root))
    }

    pub fn quote(&self) -> Result<Quote, EnclaveError> {
        let s = self.session()?;
        let msg = tee::quote_message(&self.measurement, s.tee.public(), s.pb.public());
        Ok(Quote {
            measurement: self.measurement,
            tee_key: s.tee.public().clone(),
            pb_key: s.pb.public().clone(),
            platform_key: self.platform.attest.public().clone(),
            platform_cert: self.platform.cert.clone(),
            signature: self.platform.attest.sign(&msg),
        })
    }

    /// Executes `txs` on `ps_old` and extends the ledger by one block using
    /// the operator's proof template. On any error the enclave state is left
    /// untouched.
    pub fn exec(
        &mut self,
        txs: &[Transaction],
        ps_old: PartialState,
        template: IncrementalProof,
        lroot_tmp: Commitment,
    ) -> Result<ExecOutput, EnclaveError> {
        let s = self.session()?;
        let p = process(&self.config, s, txs, ps_old, template, lroot_tmp)?;
        let signature = s.pb.sign(&transition_message(&s.lroot_pb, &p.lroot_cur));
        let lroot_pb = s.lroot_pb;
        let s = self.session.as_mut().expect("checked above");
        s.hdr_last = Some(p.block.header);
        s.lroot_cur = p.lroot_cur;
        Ok(ExecOutput {
            lroot_pb,
            lroot_cur: p.lroot_cur,
            ps_new: p.ps_new,
            block: p.block,
            rejected: p.rejected,
            signature,
        })
    }

    /// Marks the current root as anchored on chain.
    pub fn flush(&mut self) -> Result<(), EnclaveError> {
        let s = self.session.as_mut().ok_or(EnclaveError::NotInitialized)?;
        s.lroot_pb = s.lroot_cur;
        Ok(())
    }

    /// Decrypts a ciphertext addressed to the enclave's chain-platform key.
    pub fn decrypt(&self, blob: &[u8]) -> Result<Vec<u8>, EnclaveError> {
        Ok(crypto::decrypt_bytes(&self.session()?.pb, blob)?)
    }

    /// Grants `client` the right to file censorship requests until chain
    /// height `expiry`.
    pub fn issue_ticket(&self, client: &PublicKey, expiry: u64) -> Result<AccessTicket, EnclaveError> {
        let s = self.session()?;
        Ok(AccessTicket {
            client: client.clone(),
            expiry,
            signature: s.pb.sign(&ticket_message(client, expiry)),
        })
    }

    /// Encrypts the full enclave state under the platform sealing key.
    /// Layout: magic, 8-byte big-endian counter, nonce, ciphertext, tag.
    pub fn seal(&mut self) -> Result<Vec<u8>, EnclaveError> {
        let plain = self.session()?.encode();
        let counter = self.platform.next_counter();
        let mut nonce = [0u8; 12];
        self.rng.fill_bytes(&mut nonce);
        let mut aad = SEAL_MAGIC.to_vec();
        aad.extend_from_slice(&counter.to_be_bytes());
        let (ct, tag) = crypto::aead_seal(&self.platform.seal_key, &nonce, &aad, &plain);
        let mut out = aad;
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out.extend_from_slice(&tag);
        Ok(out)
    }

    /// Restores a sealed state into this fresh enclave. Blobs from another
    /// platform or another program fail authentication.
    pub fn unseal(&mut self, blob: &[u8]) -> Result<UnsealReport, EnclaveError> {
        self.ensure_fresh()?;
        if blob.len() < 4 + 8 + 12 + 16 {
            return Err(EnclaveError::Seal("blob too short"));
        }
        if &blob[..4] != SEAL_MAGIC {
            return Err(EnclaveError::Seal("bad magic"));
        }
        let (aad, rest) = blob.split_at(12);
        let counter = u64::from_be_bytes(aad[4..12].try_into().expect("8 bytes"));
        let (nonce, rest) = rest.split_at(12);
        let (ct, tag) = rest.split_at(rest.len() - 16);
        let plain = crypto::aead_open(
            &self.platform.seal_key,
            nonce.try_into().expect("12 bytes"),
            aad,
            ct,
            tag.try_into().expect("16 bytes"),
        )
        .map_err(|_| EnclaveError::Seal("authentication failed"))?;
        self.session = Some(Session::decode(&plain)?);
        Ok(UnsealReport { counter, stale: counter < self.platform.current_counter() })
    }

    /// Re-initializes a fresh enclave after its predecessor was lost.
    ///
    /// `lroot_old` is the root anchored on chain and `hdr_sync` the header at
    /// that version (absent at genesis); the header is checked against
    /// `lroot_old` through a membership proof from the operator. Each block in
    /// `prev_blks` is then re-executed, must reproduce the supplied block
    /// exactly, and must bring the operator's ledger to the same root. Any
    /// divergence discards the new keys and leaves the enclave fresh.
    pub fn reinit(
        &mut self,
        lroot_old: Commitment,
        prev_blks: &[Block],
        hdr_sync: Option<Header>,
        host: &mut dyn ReplayHost,
    ) -> Result<ReinitOutput, EnclaveError> {
        self.ensure_fresh()?;
        let mut s = Session::fresh(&mut self.rng);
        match (lroot_old.version, hdr_sync) {
            (0, None) => {
                if lroot_old != Commitment::genesis() {
                    return Err(EnclaveError::BadProof("version 0 must carry the genesis root"));
                }
            }
            (0, Some(_)) => return Err(EnclaveError::BadProof("header supplied for genesis")),
            (_, None) => return Err(EnclaveError::BadProof("missing synced header")),
            (v, Some(h)) => {
                if h.id != v {
                    return Err(EnclaveError::BadProof("synced header id differs from version"));
                }
                let proof = host.header_proof(v - 1, &lroot_old).map_err(EnclaveError::Host)?;
                if !proof.verify(v - 1, &h.record(), &lroot_old) {
                    return Err(EnclaveError::BadProof("synced header membership"));
                }
            }
        }
        s.hdr_last = hdr_sync;
        s.lroot_pb = lroot_old;
        s.lroot_cur = lroot_old;

        for blk in prev_blks {
            let (template, lroot_tmp) = host.next_template().map_err(EnclaveError::Host)?;
            let ps = host.partial_state(&blk.txs).map_err(EnclaveError::Host)?;
            let expected = s.hdr_last.map_or(self.config.genesis_root, |h| h.st_root);
            if ps.root != expected {
                return Err(EnclaveError::Divergence(format!(
                    "partial state root {:?} differs from {:?}",
                    ps.root, expected
                )));
            }
            let p = process(&self.config, &s, &blk.txs, ps, template, lroot_tmp)?;
            if !p.rejected.is_empty() || p.block != *blk {
                return Err(EnclaveError::Divergence(format!(
                    "block {} does not re-execute to the stored block",
                    blk.header.id
                )));
            }
            let host_root = host.replay(blk).map_err(EnclaveError::Host)?;
            if host_root != p.lroot_cur {
                return Err(EnclaveError::Divergence(format!(
                    "operator ledger at {:?} but enclave at {:?}",
                    host_root, p.lroot_cur
                )));
            }
            s.hdr_last = Some(p.block.header);
            s.lroot_cur = p.lroot_cur;
        }

        let signature = s.pb.sign(&transition_message(&s.lroot_pb, &s.lroot_cur));
        let out = ReinitOutput {
            lroot_pb: s.lroot_pb,
            lroot_cur: s.lroot_cur,
            signature,
            pb_key: s.pb.public().clone(),
            tee_key: s.tee.public().clone(),
        };
        self.session = Some(s);
        Ok(out)
    }
}

/// Block processing shared by normal execution and re-initialization. Pure
/// with respect to the session.
fn process(
    config: &EnclaveConfig,
    s: &Session,
    txs: &[Transaction],
    ps_old: PartialState,
    mut template: IncrementalProof,
    lroot_tmp: Commitment,
) -> Result<Processed, EnclaveError> {
    let expected = s.hdr_last.map_or(config.genesis_root, |h| h.st_root);
    ps_old.check_root(&expected)?;
    if lroot_tmp.version != s.lroot_cur.version + 1 {
        return Err(EnclaveError::Template("template must extend the ledger by exactly one block"));
    }
    if !template.verify(&s.lroot_cur, &lroot_tmp) {
        return Err(EnclaveError::Template("template does not extend the current root"));
    }

    let (ps_new, RunOutcome { included, receipts, rejected }) = run_vm(txs, ps_old, &config.vm)?;
    let header = Header {
        id: lroot_tmp.version,
        txs_root: txs_root(&included),
        rcp_root: rcp_root(&receipts),
        st_root: ps_new.root,
    };
    template.set_last_record(header.record())?;
    let (old_root, new_root) = template.derive_roots()?;
    if old_root != s.lroot_cur.root {
        return Err(EnclaveError::Template("slot replacement changed the old root"));
    }
    Ok(Processed {
        lroot_cur: Commitment { version: lroot_tmp.version, root: new_root },
        ps_new,
        block: Block { header, txs: included, receipts },
        rejected,
    })
}

#[cfg(test)]
mod tests;
