//! Hashing, the two signature schemes, and hybrid public-key encryption.
//!
//! * `hash` is SHA-256.
//! * [`Scheme::Pb`] is ECDSA over secp256k1 with recoverable signatures
//!   (RFC 6979 nonces, low-S), the signature scheme of the chain platform.
//! * [`Scheme::Tee`] is Ed25519, used only for attestation identities.
//! * [`encrypt`]/[`decrypt`] are ECIES over secp256k1: ephemeral ECDH,
//!   HKDF-SHA256 key derivation, ChaCha20-Poly1305.
//!
//! Every function that needs randomness takes the generator as an argument
//! so that simulations are reproducible from a seed.

use std::fmt;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use ed25519_dalek::Signer as _;
use hkdf::Hkdf;
use k256::elliptic_curve::sec1::ToEncodedPoint;
use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};

pub const DIGEST_LEN: usize = 32;
pub const PB_PUBLIC_LEN: usize = 33;
pub const TEE_PUBLIC_LEN: usize = 32;

const ECIES_INFO: &[u8] = b"vledger/ecies/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("invalid {0:?} secret key")]
    InvalidSecret(Scheme),
    #[error("invalid {0:?} public key")]
    InvalidPublicKey(Scheme),
    #[error("operation requires a {expected:?} key, got {got:?}")]
    WrongScheme { expected: Scheme, got: Scheme },
    #[error("ciphertext is too short")]
    MalformedCiphertext,
    #[error("decryption failed: authentication tag mismatch")]
    Decryption,
}

/// A SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub const fn new(bytes: [u8; DIGEST_LEN]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; DIGEST_LEN];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }

    /// First eight bytes as a big-endian word.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().expect("32 >= 8"))
    }

    /// The 64 hex nibbles of the digest, most significant first.
    pub fn nibbles(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        for (i, b) in self.0.iter().enumerate() {
            out[2 * i] = b >> 4;
            out[2 * i + 1] = b & 0x0f;
        }
        out
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}…)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl From<[u8; DIGEST_LEN]> for Digest {
    fn from(b: [u8; DIGEST_LEN]) -> Self {
        Digest(b)
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash of the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Chain-platform scheme: ECDSA/secp256k1.
    Pb,
    /// TEE-platform scheme: Ed25519.
    Tee,
}

impl Scheme {
    fn tag(self) -> u8 {
        match self {
            Scheme::Pb => 0,
            Scheme::Tee => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        match tag {
            0 => Ok(Scheme::Pb),
            1 => Ok(Scheme::Tee),
            tag => Err(DecodeError::BadTag { what: "scheme", tag }),
        }
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey {
    pub scheme: Scheme,
    #[serde(with = "crate::codec::hex_bytes")]
    pub bytes: Vec<u8>,
}

impl PublicKey {
    /// Account identifier derived from a chain-platform key.
    pub fn account_id(&self) -> Digest {
        hash(&self.bytes)
    }

    /// Whether the bytes parse as a key of the declared scheme.
    pub fn is_well_formed(&self) -> bool {
        match self.scheme {
            Scheme::Pb => {
                self.bytes.len() == PB_PUBLIC_LEN
                    && k256::ecdsa::VerifyingKey::from_sec1_bytes(&self.bytes).is_ok()
            }
            Scheme::Tee => <[u8; TEE_PUBLIC_LEN]>::try_from(self.bytes.as_slice())
                .ok()
                .and_then(|b| ed25519_dalek::VerifyingKey::from_bytes(&b).ok())
                .is_some(),
        }
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = hex::encode(&self.bytes);
        write!(f, "PublicKey({:?}, {}…)", self.scheme, &h[..h.len().min(12)])
    }
}

impl Canonical for PublicKey {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(self.scheme.tag()).bytes(&self.bytes);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let scheme = Scheme::from_tag(dec.u8()?)?;
        let bytes = dec.bytes()?;
        Ok(PublicKey { scheme, bytes })
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    #[serde(with = "crate::codec::hex_bytes")]
    pub bytes: Vec<u8>,
    /// ECDSA recovery id; absent for Ed25519.
    pub recovery: Option<u8>,
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = hex::encode(&self.bytes);
        write!(f, "Signature({}…)", &h[..h.len().min(12)])
    }
}

impl Canonical for Signature {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.bytes(&self.bytes);
        match self.recovery {
            Some(v) => enc.u8(1).u8(v),
            None => enc.u8(0),
        };
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let bytes = dec.bytes()?;
        let recovery = if dec.bool()? { Some(dec.u8()?) } else { None };
        Ok(Signature { bytes, recovery })
    }
}

#[derive(Clone)]
enum Secret {
    Pb(k256::ecdsa::SigningKey),
    Tee(ed25519_dalek::SigningKey),
}

/// A secret/public key pair. The secret never leaves this type except
/// through [`KeyPair::secret_bytes`], which is crate-private.
#[derive(Clone)]
pub struct KeyPair {
    secret: Secret,
    public: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .field("secret", &"<redacted>")
            .finish()
    }
}

impl KeyPair {
    pub fn generate(scheme: Scheme, rng: &mut impl CryptoRngCore) -> Self {
        match scheme {
            Scheme::Pb => Self::from_pb(k256::ecdsa::SigningKey::random(rng)),
            Scheme::Tee => Self::from_tee(ed25519_dalek::SigningKey::generate(rng)),
        }
    }

    pub fn from_secret(scheme: Scheme, secret: &[u8; 32]) -> Result<Self, CryptoError> {
        match scheme {
            Scheme::Pb => k256::ecdsa::SigningKey::from_slice(secret)
                .map(Self::from_pb)
                .map_err(|_| CryptoError::InvalidSecret(scheme)),
            Scheme::Tee => Ok(Self::from_tee(ed25519_dalek::SigningKey::from_bytes(secret))),
        }
    }

    fn from_pb(sk: k256::ecdsa::SigningKey) -> Self {
        let public = PublicKey {
            scheme: Scheme::Pb,
            bytes: sk.verifying_key().to_encoded_point(true).as_bytes().to_vec(),
        };
        KeyPair { secret: Secret::Pb(sk), public }
    }

    fn from_tee(sk: ed25519_dalek::SigningKey) -> Self {
        let public = PublicKey {
            scheme: Scheme::Tee,
            bytes: sk.verifying_key().to_bytes().to_vec(),
        };
        KeyPair { secret: Secret::Tee(sk), public }
    }

    pub fn scheme(&self) -> Scheme {
        self.public.scheme
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub(crate) fn secret_bytes(&self) -> [u8; 32] {
        match &self.secret {
            Secret::Pb(sk) => sk.to_bytes().into(),
            Secret::Tee(sk) => sk.to_bytes(),
        }
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        match &self.secret {
            Secret::Pb(sk) => {
                let (sig, recid) = sk
                    .sign_recoverable(message)
                    .expect("secp256k1 signing with a valid key does not fail");
                Signature {
                    bytes: sig.to_bytes().to_vec(),
                    recovery: Some(recid.to_byte()),
                }
            }
            Secret::Tee(sk) => Signature {
                bytes: sk.sign(message).to_bytes().to_vec(),
                recovery: None,
            },
        }
    }
}

/// Signature verification; malformed keys or signatures yield `false`.
pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    match public.scheme {
        Scheme::Pb => {
            let Ok(s) = k256::ecdsa::Signature::from_slice(&sig.bytes) else {
                return false;
            };
            // k256 accepts high-S on verify; canonical signatures are low-S only.
            if s.normalize_s().is_some() {
                return false;
            }
            // Recovery checks the signature and also pins the recovery id, so
            // no field of a valid signature can be altered.
            recover(message, sig).is_some_and(|pk| pk == *public)
        }
        Scheme::Tee => {
            let Ok(pk) = <[u8; TEE_PUBLIC_LEN]>::try_from(public.bytes.as_slice()) else {
                return false;
            };
            let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&pk) else {
                return false;
            };
            let Ok(sb) = <[u8; 64]>::try_from(sig.bytes.as_slice()) else {
                return false;
            };
            vk.verify_strict(message, &ed25519_dalek::Signature::from_bytes(&sb))
                .is_ok()
        }
    }
}

/// Recovers the chain-platform public key that produced `sig` over `message`.
pub fn recover(message: &[u8], sig: &Signature) -> Option<PublicKey> {
    let recid = k256::ecdsa::RecoveryId::from_byte(sig.recovery?)?;
    let s = k256::ecdsa::Signature::from_slice(&sig.bytes).ok()?;
    let vk = k256::ecdsa::VerifyingKey::recover_from_msg(message, &s, recid).ok()?;
    Some(PublicKey {
        scheme: Scheme::Pb,
        bytes: vk.to_encoded_point(true).as_bytes().to_vec(),
    })
}

/// ECIES ciphertext. Wire layout: `ephemeral(33) || nonce(12) || payload || tag(16)`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Ciphertext {
    pub ephemeral: [u8; PB_PUBLIC_LEN],
    pub nonce: [u8; 12],
    pub payload: Vec<u8>,
    pub tag: [u8; 16],
}

impl Ciphertext {
    pub const OVERHEAD: usize = PB_PUBLIC_LEN + 12 + 16;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::OVERHEAD + self.payload.len());
        out.extend_from_slice(&self.ephemeral);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, CryptoError> {
        if b.len() < Self::OVERHEAD {
            return Err(CryptoError::MalformedCiphertext);
        }
        let (ephemeral, rest) = b.split_at(PB_PUBLIC_LEN);
        let (nonce, rest) = rest.split_at(12);
        let (payload, tag) = rest.split_at(rest.len() - 16);
        Ok(Ciphertext {
            ephemeral: ephemeral.try_into().expect("split length"),
            nonce: nonce.try_into().expect("split length"),
            payload: payload.to_vec(),
            tag: tag.try_into().expect("split length"),
        })
    }
}

fn ecies_key(shared: &[u8], ephemeral: &[u8], recipient: &[u8]) -> [u8; 32] {
    let mut salt = Vec::with_capacity(ephemeral.len() + recipient.len());
    salt.extend_from_slice(ephemeral);
    salt.extend_from_slice(recipient);
    let mut okm = [0u8; 32];
    Hkdf::<Sha256>::new(Some(&salt), shared)
        .expand(ECIES_INFO, &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    okm
}

pub fn encrypt(
    public: &PublicKey,
    plaintext: &[u8],
    rng: &mut impl CryptoRngCore,
) -> Result<Ciphertext, CryptoError> {
    if public.scheme != Scheme::Pb {
        return Err(CryptoError::WrongScheme { expected: Scheme::Pb, got: public.scheme });
    }
    let recipient = k256::PublicKey::from_sec1_bytes(&public.bytes)
        .map_err(|_| CryptoError::InvalidPublicKey(Scheme::Pb))?;
    let eph = k256::SecretKey::random(rng);
    let eph_pub: [u8; PB_PUBLIC_LEN] = eph
        .public_key()
        .to_encoded_point(true)
        .as_bytes()
        .try_into()
        .expect("compressed point is 33 bytes");
    let shared = k256::ecdh::diffie_hellman(eph.to_nonzero_scalar(), recipient.as_affine());
    let key = ecies_key(shared.raw_secret_bytes(), &eph_pub, &public.bytes);

    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let (payload, tag) = aead_seal(&key, &nonce, &eph_pub, plaintext);
    Ok(Ciphertext { ephemeral: eph_pub, nonce, payload, tag })
}

pub fn decrypt(keys: &KeyPair, ct: &Ciphertext) -> Result<Vec<u8>, CryptoError> {
    let Secret::Pb(sk) = &keys.secret else {
        return Err(CryptoError::WrongScheme { expected: Scheme::Pb, got: keys.scheme() });
    };
    // An invalid ephemeral point cannot have come from `encrypt`.
    let eph = k256::PublicKey::from_sec1_bytes(&ct.ephemeral).map_err(|_| CryptoError::Decryption)?;
    let shared = k256::ecdh::diffie_hellman(sk.as_nonzero_scalar(), eph.as_affine());
    let key = ecies_key(shared.raw_secret_bytes(), &ct.ephemeral, &keys.public.bytes);
    aead_open(&key, &ct.nonce, &ct.ephemeral, &ct.payload, &ct.tag)
}

/// Decrypts the wire form produced by [`Ciphertext::to_bytes`].
pub fn decrypt_bytes(keys: &KeyPair, blob: &[u8]) -> Result<Vec<u8>, CryptoError> {
    decrypt(keys, &Ciphertext::from_bytes(blob)?)
}

pub(crate) fn aead_seal(
    key: &[u8; 32],
    nonce: &[u8; 12],
    aad: &[u8],
    plaintext: &[u8],
) -> (Vec<u8>, [u8; 16]) {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(nonce), aad, &mut buf)
        .expect("plaintext within ChaCha20-Poly1305 limits");
    (buf, tag.into())
}

pub(crate) fn aead_open(
    key: &[u8; 32],
    nonce: &[u8; 12],
    aad: &[u8],
    ciphertext: &[u8],
    tag: &[u8; 16],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    let mut buf = ciphertext.to_vec();
    cipher
        .decrypt_in_place_detached(Nonce::from_slice(nonce), aad, &mut buf, Tag::from_slice(tag))
        .map_err(|_| CryptoError::Decryption)?;
    Ok(buf)
}
