//! Simulated trusted-hardware platform: a vendor that certifies platform
//! attestation keys, platforms that launch enclaves and derive sealing keys,
//! and the quotes enclaves produce.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use hkdf::Hkdf;
use rand_chacha::ChaCha20Rng;
use rand_core::{CryptoRngCore, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::codec::{Canonical, Encoder};
use crate::crypto::{self, hash, Digest, KeyPair, PublicKey, Scheme, Signature};

use super::{Enclave, EnclaveConfig};

const CERT_DOMAIN: &[u8] = b"vledger/tee-cert/v1";
const QUOTE_DOMAIN: &[u8] = b"vledger/quote/v1";
const SEAL_INFO: &[u8] = b"vledger/seal/v1";

/// Identity string of the enclave program. Changing the program means
/// changing this string, which changes every measurement.
pub const CODE_IDENTITY: &[u8] = b"vledger-enclave/v1";

/// Measurement of the enclave program launched with `config`.
pub fn measurement(config: &EnclaveConfig) -> Digest {
    let mut enc = Encoder::new();
    enc.raw(CODE_IDENTITY);
    config.encode_into(&mut enc);
    hash(&enc.finish())
}

/// Root of trust for attestation, standing in for the hardware vendor.
pub struct TeeVendor {
    keys: KeyPair,
}

impl std::fmt::Debug for TeeVendor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TeeVendor").field("public", self.keys.public()).finish()
    }
}

fn cert_message(platform_key: &PublicKey) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(CERT_DOMAIN);
    platform_key.encode_into(&mut enc);
    enc.finish()
}

impl TeeVendor {
    pub fn new(rng: &mut impl CryptoRngCore) -> Self {
        TeeVendor { keys: KeyPair::generate(Scheme::Tee, rng) }
    }

    pub fn public(&self) -> &PublicKey {
        self.keys.public()
    }

    /// Manufactures a platform with a fresh hardware secret and a certified
    /// attestation key.
    pub fn provision(&self, rng: &mut impl CryptoRngCore) -> TeePlatform {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        let attest = KeyPair::generate(Scheme::Tee, rng);
        let cert = self.keys.sign(&cert_message(attest.public()));
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        TeePlatform {
            secret,
            attest,
            cert,
            counter: Arc::new(AtomicU64::new(0)),
            rng: ChaCha20Rng::from_seed(seed),
        }
    }
}

/// One physical machine. Its secret never leaves this type; enclaves only
/// receive keys derived from it.
pub struct TeePlatform {
    secret: [u8; 32],
    attest: KeyPair,
    cert: Signature,
    counter: Arc<AtomicU64>,
    rng: ChaCha20Rng,
}

impl std::fmt::Debug for TeePlatform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TeePlatform")
            .field("attestation_key", self.attest.public())
            .field("secret", &"<redacted>")
            .finish()
    }
}

impl TeePlatform {
    pub fn attestation_key(&self) -> &PublicKey {
        self.attest.public()
    }

    /// Current value of the platform's monotonic counter, bumped on every seal.
    pub fn counter(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }

    /// Starts a fresh, uninitialized enclave running the program with `config`.
    pub fn launch(&mut self, config: EnclaveConfig) -> Enclave {
        let m = measurement(&config);
        let mut seal_key = [0u8; 32];
        Hkdf::<Sha256>::new(Some(m.as_bytes()), &self.secret)
            .expand(SEAL_INFO, &mut seal_key)
            .expect("32 bytes is a valid HKDF-SHA256 output length");
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut seed);
        let ctx = PlatformContext {
            attest: self.attest.clone(),
            cert: self.cert.clone(),
            seal_key,
            counter: Arc::clone(&self.counter),
        };
        Enclave::new(config, m, ctx, ChaCha20Rng::from_seed(seed))
    }
}

/// What a launched enclave holds from its platform.
pub(crate) struct PlatformContext {
    pub(crate) attest: KeyPair,
    pub(crate) cert: Signature,
    pub(crate) seal_key: [u8; 32],
    pub(crate) counter: Arc<AtomicU64>,
}

impl PlatformContext {
    pub(crate) fn next_counter(&self) -> u64 {
        self.counter.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub(crate) fn current_counter(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuoteError {
    #[error("platform key is not certified by the vendor")]
    Certificate,
    #[error("quote signature is invalid")]
    Signature,
    #[error("measurement {got:?} differs from expected {expected:?}")]
    Measurement { expected: Digest, got: Digest },
    #[error("reported enclave key differs from the expected key")]
    ReportedKey,
}

/// Attestation statement: which program runs and which keys it generated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub measurement: Digest,
    pub tee_key: PublicKey,
    pub pb_key: PublicKey,
    pub platform_key: PublicKey,
    pub platform_cert: Signature,
    pub signature: Signature,
}

pub(crate) fn quote_message(measurement: &Digest, tee_key: &PublicKey, pb_key: &PublicKey) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.raw(QUOTE_DOMAIN).digest(measurement);
    tee_key.encode_into(&mut enc);
    pb_key.encode_into(&mut enc);
    enc.finish()
}

impl Quote {
    /// Checks the certificate chain and the measurement. The caller still
    /// compares the reported keys with the ones it expects.
    pub fn verify(&self, vendor: &PublicKey, expected: &Digest) -> Result<(), QuoteError> {
        if !crypto::verify(vendor, &cert_message(&self.platform_key), &self.platform_cert) {
            return Err(QuoteError::Certificate);
        }
        let msg = quote_message(&self.measurement, &self.tee_key, &self.pb_key);
        if !crypto::verify(&self.platform_key, &msg, &self.signature) {
            return Err(QuoteError::Signature);
        }
        if self.measurement != *expected {
            return Err(QuoteError::Measurement { expected: *expected, got: self.measurement });
        }
        Ok(())
    }

    /// Full check against the keys published on chain.
    pub fn verify_keys(
        &self,
        vendor: &PublicKey,
        expected: &Digest,
        tee_key: &PublicKey,
        pb_key: &PublicKey,
    ) -> Result<(), QuoteError> {
        self.verify(vendor, expected)?;
        if self.tee_key != *tee_key || self.pb_key != *pb_key {
            return Err(QuoteError::ReportedKey);
        }
        Ok(())
    }
}
