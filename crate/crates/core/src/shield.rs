//! `.sfl` authenticated-encryption container with a counter binding.
//!
//! ```text
//! "SFL1" | version u16 | aead_alg u8 | key_id 16B | counter_id 16B | counter_value u64 | nonce 12B | ciphertext+tag
//! ```
//!
//! All integers are big-endian. The 59 header bytes are the AEAD associated
//! data, so any header change fails authentication. A file decrypts only if
//! its counter value equals the counter's current stable value.

use std::fmt;

use ed25519_dalek::VerifyingKey;
use thiserror::Error;

use crate::counter::{CounterClient, CounterError, CounterId, CounterToken};
use crate::crypto::{self, AEAD_ALG_CHACHA20POLY1305, AEAD_NONCE_LEN, AEAD_TAG_LEN};

pub const SHIELD_MAGIC: &[u8; 4] = b"SFL1";
pub const SHIELD_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 16 + 16 + 8 + AEAD_NONCE_LEN;
pub const FILE_EXTENSION: &str = "sfl";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShieldError {
    #[error("shield key must be 32 bytes, got {0}")]
    InvalidKey(usize),
    #[error("freshness token rejected: {0}")]
    FreshnessToken(String),
    #[error("shielded file failed authentication")]
    Integrity,
    #[error("rollback detected: file written at counter value {found}, stable value is {stable}")]
    RollbackDetected { found: u64, stable: u64 },
    #[error("no key for key id {0}")]
    KeyResolution(KeyId),
    #[error("malformed shielded file: {0}")]
    Decode(String),
    #[error("counter: {0}")]
    Counter(#[from] CounterError),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 16]);

impl KeyId {
    /// Stable identifier for the policy secret named `name`.
    pub fn for_secret(name: &str) -> Self {
        let d = crypto::sha256(&[b"secfl-key-id:", name.as_bytes()]);
        KeyId(d[..16].try_into().unwrap())
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShieldHeader {
    pub version: u16,
    pub aead_alg: u8,
    pub key_id: KeyId,
    pub counter_id: CounterId,
    pub counter_value: u64,
    pub nonce: [u8; AEAD_NONCE_LEN],
}

impl ShieldHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(SHIELD_MAGIC);
        h[4..6].copy_from_slice(&self.version.to_be_bytes());
        h[6] = self.aead_alg;
        h[7..23].copy_from_slice(&self.key_id.0);
        h[23..39].copy_from_slice(&self.counter_id.0);
        h[39..47].copy_from_slice(&self.counter_value.to_be_bytes());
        h[47..59].copy_from_slice(&self.nonce);
        h
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ShieldError> {
        if bytes.len() < HEADER_LEN {
            return Err(ShieldError::Decode(format!("header needs {HEADER_LEN} bytes, got {}", bytes.len())));
        }
        if &bytes[..4] != SHIELD_MAGIC {
            return Err(ShieldError::Decode("bad magic".into()));
        }
        let version = u16::from_be_bytes([bytes[4], bytes[5]]);
        if version != SHIELD_VERSION {
            return Err(ShieldError::Decode(format!("unsupported version {version}")));
        }
        if bytes[6] != AEAD_ALG_CHACHA20POLY1305 {
            return Err(ShieldError::Decode(format!("unsupported aead algorithm {}", bytes[6])));
        }
        Ok(Self {
            version,
            aead_alg: bytes[6],
            key_id: KeyId(bytes[7..23].try_into().unwrap()),
            counter_id: CounterId(bytes[23..39].try_into().unwrap()),
            counter_value: u64::from_be_bytes(bytes[39..47].try_into().unwrap()),
            nonce: bytes[47..59].try_into().unwrap(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShieldedFile {
    pub header: ShieldHeader,
    pub body: Vec<u8>,
}

impl ShieldedFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes().to_vec();
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ShieldError> {
        let header = ShieldHeader::parse(bytes)?;
        if bytes.len() < HEADER_LEN + AEAD_TAG_LEN {
            return Err(ShieldError::Decode("body shorter than the authentication tag".into()));
        }
        Ok(Self {
            header,
            body: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

fn key_array(key: &[u8]) -> Result<[u8; 32], ShieldError> {
    key.try_into().map_err(|_| ShieldError::InvalidKey(key.len()))
}

/// Encrypts `plaintext`, binding the counter value from `token`.
///
/// The token may be provisional; the file only decrypts once that value is
/// the counter's stable value.
pub fn shield_encrypt(
    plaintext: &[u8],
    key: &[u8],
    key_id: KeyId,
    token: &CounterToken,
    counter_key: &VerifyingKey,
) -> Result<ShieldedFile, ShieldError> {
    let nonce = crypto::random_array();
    shield_encrypt_with_nonce(plaintext, key, key_id, token, counter_key, nonce)
}

/// Deterministic form of [`shield_encrypt`] for fixtures.
pub fn shield_encrypt_with_nonce(
    plaintext: &[u8],
    key: &[u8],
    key_id: KeyId,
    token: &CounterToken,
    counter_key: &VerifyingKey,
    nonce: [u8; AEAD_NONCE_LEN],
) -> Result<ShieldedFile, ShieldError> {
    let key = key_array(key)?;
    token
        .verify(counter_key)
        .map_err(|e| ShieldError::FreshnessToken(e.to_string()))?;
    if token.value == 0 {
        return Err(ShieldError::FreshnessToken("counter value must be positive".into()));
    }
    let header = ShieldHeader {
        version: SHIELD_VERSION,
        aead_alg: AEAD_ALG_CHACHA20POLY1305,
        key_id,
        counter_id: token.counter_id,
        counter_value: token.value,
        nonce,
    };
    let body = crypto::aead_seal(&key, &nonce, &header.to_bytes(), plaintext);
    Ok(ShieldedFile { header, body })
}

/// Source of the current stable value of a counter.
pub trait Freshness {
    fn stable_value(&self, id: CounterId) -> Result<u64, ShieldError>;
}

impl<C: CounterClient + ?Sized> Freshness for C {
    fn stable_value(&self, id: CounterId) -> Result<u64, ShieldError> {
        let token = self.read_stable(id)?;
        token
            .verify(&self.verifying_key())
            .map_err(|e| ShieldError::FreshnessToken(e.to_string()))?;
        if !token.stable || token.counter_id != id {
            return Err(ShieldError::FreshnessToken("service returned a non-stable token".into()));
        }
        Ok(token.value)
    }
}

pub fn shield_decrypt(file: &ShieldedFile, key: &[u8], freshness: &dyn Freshness) -> Result<Vec<u8>, ShieldError> {
    let key = key_array(key)?;
    let h = &file.header;
    let plaintext = crypto::aead_open(&key, &h.nonce, &h.to_bytes(), &file.body).map_err(|_| ShieldError::Integrity)?;
    let stable = freshness.stable_value(h.counter_id)?;
    if h.counter_value != stable {
        return Err(ShieldError::RollbackDetected {
            found: h.counter_value,
            stable,
        });
    }
    Ok(plaintext)
}

/// Decrypts, looking the key up by the header's key id.
pub fn shield_decrypt_with(
    file: &ShieldedFile,
    resolve: &dyn Fn(KeyId) -> Option<Vec<u8>>,
    freshness: &dyn Freshness,
) -> Result<Vec<u8>, ShieldError> {
    let key = resolve(file.header.key_id).ok_or(ShieldError::KeyResolution(file.header.key_id))?;
    shield_decrypt(file, &key, freshness)
}

/// Increments `counter_id`, encrypts under the new value and waits until
/// that value is stable, so the returned file is immediately decryptable.
pub fn shield_encrypt_fresh(
    plaintext: &[u8],
    key: &[u8],
    key_id: KeyId,
    counter: &dyn CounterClient,
    counter_id: CounterId,
    timeout: std::time::Duration,
) -> Result<ShieldedFile, ShieldError> {
    let token = counter.increment_async(counter_id)?;
    let file = shield_encrypt(plaintext, key, key_id, &token, &counter.verifying_key())?;
    counter.wait_stable(counter_id, token.value, timeout)?;
    Ok(file)
}
