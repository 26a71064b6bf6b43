//! Software-simulated enclave runtime.
//!
//! A [`Platform`] owns a root signing key (standing in for the vendor
//! attestation key) and a platform secret (standing in for the fused sealing
//! root). Enclaves spawned on it get an identity derived from the code they
//! run, can produce signed quotes, and can seal data to their measurement.
//!
//! Nothing here is protected by the operating system: key files are ordinary
//! files and "enclave memory" is process memory. The trust boundary is a
//! simulation and tests treat it as such.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::crypto::{
    self, AEAD_ALG_CHACHA20POLY1305, AEAD_NONCE_LEN, AEAD_TAG_LEN, HASH_ALG_SHA256,
    SIGNATURE_LEN, SIG_ALG_ED25519,
};

pub const QUOTE_VERSION: u16 = 1;
pub const REPORT_DATA_LEN: usize = 64;
pub const QUOTE_NONCE_LEN: usize = 32;
/// Length of the signed prefix of a serialized quote.
pub const QUOTE_BODY_LEN: usize = 2 + 1 + 1 + 32 + 16 + 2 + REPORT_DATA_LEN + QUOTE_NONCE_LEN;
pub const QUOTE_LEN: usize = QUOTE_BODY_LEN + SIGNATURE_LEN;

pub const SEALED_MAGIC: &[u8; 4] = b"SSB1";
const SEALED_HEADER_LEN: usize = 4 + 1 + 1 + 32 + 16 + AEAD_NONCE_LEN + 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TeeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("sealed blob belongs to a different enclave identity")]
    SealAuthentication,
    #[error("sealed blob failed integrity check")]
    Integrity,
    #[error("malformed encoding: {0}")]
    Decode(String),
    #[error("key file: {0}")]
    KeyFile(String),
}

/// Digest of a canonical code bundle and its configuration.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", hex::encode(&self.0[..8]))
    }
}

impl FromStr for Measurement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        crypto::hex_array(s).map(Measurement)
    }
}

impl Serialize for Measurement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Measurement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Measures a code bundle: SHA-256 over `u64 len || code || u64 len || config`.
pub fn measure(code_bundle: &[u8], config: &[u8]) -> Result<Measurement, TeeError> {
    if code_bundle.is_empty() {
        return Err(TeeError::InvalidInput("code bundle is empty".into()));
    }
    if config.is_empty() {
        return Err(TeeError::InvalidInput("config is empty".into()));
    }
    let code_len = (code_bundle.len() as u64).to_be_bytes();
    let config_len = (config.len() as u64).to_be_bytes();
    Ok(Measurement(crypto::sha256(&[
        &code_len,
        code_bundle,
        &config_len,
        config,
    ])))
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PlatformId(pub [u8; 16]);

impl fmt::Debug for PlatformId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PlatformId({})", hex::encode(self.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnclaveIdentity {
    pub measurement: Measurement,
    pub platform_id: PlatformId,
    pub svn: u16,
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    root_signing_key: String,
    platform_id: String,
    platform_secret: String,
    svn: u16,
}

/// Key material of one simulated platform.
#[derive(Clone)]
pub struct Platform {
    root: SigningKey,
    platform_id: PlatformId,
    platform_secret: [u8; 32],
    svn: u16,
}

impl fmt::Debug for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Platform")
            .field("platform_id", &self.platform_id)
            .field("svn", &self.svn)
            .finish_non_exhaustive()
    }
}

impl Platform {
    /// A fresh platform with its own root key.
    pub fn generate() -> Self {
        Self::with_root(SigningKey::from_bytes(&crypto::random_array()))
    }

    /// A fresh platform whose quotes are signed by an existing root key.
    pub fn with_root(root: SigningKey) -> Self {
        Self {
            root,
            platform_id: PlatformId(crypto::random_array()),
            platform_secret: crypto::random_array(),
            svn: 1,
        }
    }

    pub fn from_parts(root: SigningKey, platform_id: [u8; 16], platform_secret: [u8; 32], svn: u16) -> Self {
        Self {
            root,
            platform_id: PlatformId(platform_id),
            platform_secret,
            svn,
        }
    }

    /// Returns a copy of this platform after a security-version upgrade.
    pub fn upgraded(&self, svn: u16) -> Result<Self, TeeError> {
        if svn < self.svn {
            return Err(TeeError::InvalidInput(format!(
                "svn may not decrease ({} -> {svn})",
                self.svn
            )));
        }
        Ok(Self { svn, ..self.clone() })
    }

    pub fn root_public(&self) -> VerifyingKey {
        self.root.verifying_key()
    }

    pub fn root_signing_key(&self) -> &SigningKey {
        &self.root
    }

    pub fn platform_id(&self) -> PlatformId {
        self.platform_id
    }

    pub fn svn(&self) -> u16 {
        self.svn
    }

    pub fn to_key_file(&self) -> String {
        let kf = KeyFile {
            root_signing_key: hex::encode(self.root.to_bytes()),
            platform_id: hex::encode(self.platform_id.0),
            platform_secret: hex::encode(self.platform_secret),
            svn: self.svn,
        };
        serde_json::to_string_pretty(&kf).expect("key file serializes")
    }

    pub fn from_key_file(text: &str) -> Result<Self, TeeError> {
        let kf: KeyFile = serde_json::from_str(text).map_err(|e| TeeError::KeyFile(e.to_string()))?;
        let root = crypto::hex_array::<32>(&kf.root_signing_key).map_err(TeeError::KeyFile)?;
        let platform_id = crypto::hex_array::<16>(&kf.platform_id).map_err(TeeError::KeyFile)?;
        let secret = crypto::hex_array::<32>(&kf.platform_secret).map_err(TeeError::KeyFile)?;
        Ok(Self::from_parts(SigningKey::from_bytes(&root), platform_id, secret, kf.svn))
    }

    pub fn load(path: &Path) -> Result<Self, TeeError> {
        let text = fs::read_to_string(path).map_err(|e| TeeError::KeyFile(format!("{}: {e}", path.display())))?;
        Self::from_key_file(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TeeError> {
        fs::write(path, self.to_key_file()).map_err(|e| TeeError::KeyFile(format!("{}: {e}", path.display())))
    }

    /// Launches an enclave running `code_bundle` with `config`.
    pub fn spawn_enclave(&self, code_bundle: &[u8], config: &[u8]) -> Result<Enclave, TeeError> {
        let measurement = measure(code_bundle, config)?;
        let identity = EnclaveIdentity {
            measurement,
            platform_id: self.platform_id,
            svn: self.svn,
        };
        let sealing_key = crypto::derive_key(
            &self.platform_secret,
            &self.platform_id.0,
            &[b"secfl-seal".as_slice(), &measurement.0].concat(),
        );
        Ok(Enclave(Arc::new(EnclaveInner {
            identity,
            root: self.root.clone(),
            platform_secret: self.platform_secret,
            sealing_key,
        })))
    }
}

struct EnclaveInner {
    identity: EnclaveIdentity,
    root: SigningKey,
    platform_secret: [u8; 32],
    sealing_key: [u8; 32],
}

/// Handle to a live simulated enclave. Cheap to clone, immutable.
#[derive(Clone)]
pub struct Enclave(Arc<EnclaveInner>);

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Enclave").field(&self.0.identity).finish()
    }
}

impl Enclave {
    pub fn identity(&self) -> EnclaveIdentity {
        self.0.identity
    }

    pub fn measurement(&self) -> Measurement {
        self.0.identity.measurement
    }

    pub fn generate_quote(&self, report_data: &[u8], nonce: [u8; QUOTE_NONCE_LEN]) -> Result<Quote, TeeError> {
        let report_data: [u8; REPORT_DATA_LEN] = report_data.try_into().map_err(|_| {
            TeeError::InvalidInput(format!(
                "report_data must be {REPORT_DATA_LEN} bytes, got {}",
                report_data.len()
            ))
        })?;
        Ok(Quote::sign(&self.0.root, self.0.identity, report_data, nonce))
    }

    /// Derives a key bound to this enclave's measurement and platform.
    pub fn derive_key(&self, label: &str) -> [u8; 32] {
        crypto::derive_key(
            &self.0.platform_secret,
            &self.0.identity.measurement.0,
            &[b"secfl-derive:".as_slice(), label.as_bytes()].concat(),
        )
    }

    pub fn seal(&self, plaintext: &[u8]) -> SealedBlob {
        let nonce = crypto::random_array::<AEAD_NONCE_LEN>();
        let ad = self.sealing_ad();
        SealedBlob {
            sealing_measurement: self.0.identity.measurement,
            platform_id: self.0.identity.platform_id,
            nonce,
            ciphertext: crypto::aead_seal(&self.0.sealing_key, &nonce, &ad, plaintext),
        }
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, TeeError> {
        if blob.sealing_measurement != self.0.identity.measurement
            || blob.platform_id != self.0.identity.platform_id
        {
            return Err(TeeError::SealAuthentication);
        }
        crypto::aead_open(&self.0.sealing_key, &blob.nonce, &self.sealing_ad(), &blob.ciphertext)
            .map_err(|_| TeeError::Integrity)
    }

    fn sealing_ad(&self) -> Vec<u8> {
        [
            self.0.identity.measurement.0.as_slice(),
            &self.0.identity.platform_id.0,
        ]
        .concat()
    }
}

/// Signed attestation evidence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub version: u16,
    pub identity: EnclaveIdentity,
    pub report_data: [u8; REPORT_DATA_LEN],
    pub nonce: [u8; QUOTE_NONCE_LEN],
    pub signature: [u8; SIGNATURE_LEN],
}

impl Quote {
    /// Builds and signs a quote. Exposed so tests and tools can construct
    /// evidence under arbitrary keys.
    pub fn sign(
        key: &SigningKey,
        identity: EnclaveIdentity,
        report_data: [u8; REPORT_DATA_LEN],
        nonce: [u8; QUOTE_NONCE_LEN],
    ) -> Self {
        let mut q = Quote {
            version: QUOTE_VERSION,
            identity,
            report_data,
            nonce,
            signature: [0u8; SIGNATURE_LEN],
        };
        q.signature = key.sign(&q.body_bytes()).to_bytes();
        q
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(QUOTE_LEN);
        out.extend_from_slice(&self.version.to_be_bytes());
        out.push(HASH_ALG_SHA256);
        out.push(SIG_ALG_ED25519);
        out.extend_from_slice(&self.identity.measurement.0);
        out.extend_from_slice(&self.identity.platform_id.0);
        out.extend_from_slice(&self.identity.svn.to_be_bytes());
        out.extend_from_slice(&self.report_data);
        out.extend_from_slice(&self.nonce);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body_bytes();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TeeError> {
        if bytes.len() != QUOTE_LEN {
            return Err(TeeError::Decode(format!(
                "quote must be {QUOTE_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let version = u16::from_be_bytes([bytes[0], bytes[1]]);
        if version != QUOTE_VERSION {
            return Err(TeeError::Decode(format!("unsupported quote version {version}")));
        }
        if bytes[2] != HASH_ALG_SHA256 || bytes[3] != SIG_ALG_ED25519 {
            return Err(TeeError::Decode(format!(
                "unsupported algorithm ids hash={} sig={}",
                bytes[2], bytes[3]
            )));
        }
        let mut at = 4;
        let mut take = |n: usize| {
            let s = &bytes[at..at + n];
            at += n;
            s
        };
        let measurement = Measurement(take(32).try_into().unwrap());
        let platform_id = PlatformId(take(16).try_into().unwrap());
        let svn = u16::from_be_bytes(take(2).try_into().unwrap());
        let report_data = take(REPORT_DATA_LEN).try_into().unwrap();
        let nonce = take(QUOTE_NONCE_LEN).try_into().unwrap();
        let signature = take(SIGNATURE_LEN).try_into().unwrap();
        Ok(Quote {
            version,
            identity: EnclaveIdentity {
                measurement,
                platform_id,
                svn,
            },
            report_data,
            nonce,
            signature,
        })
    }

    pub fn signature_valid(&self, root: &VerifyingKey) -> bool {
        root.verify(&self.body_bytes(), &Signature::from_bytes(&self.signature))
            .is_ok()
    }
}

/// Data sealed to one enclave measurement on one platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub sealing_measurement: Measurement,
    pub platform_id: PlatformId,
    pub nonce: [u8; AEAD_NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl SealedBlob {
    /// `"SSB1" | aead u8 | hash u8 | measurement 32B | platform_id 16B | nonce 12B | u64 len | ciphertext+tag`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SEALED_HEADER_LEN + self.ciphertext.len());
        out.extend_from_slice(SEALED_MAGIC);
        out.push(AEAD_ALG_CHACHA20POLY1305);
        out.push(HASH_ALG_SHA256);
        out.extend_from_slice(&self.sealing_measurement.0);
        out.extend_from_slice(&self.platform_id.0);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u64).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TeeError> {
        if bytes.len() < SEALED_HEADER_LEN {
            return Err(TeeError::Decode("sealed blob truncated".into()));
        }
        if &bytes[..4] != SEALED_MAGIC {
            return Err(TeeError::Decode("bad sealed blob magic".into()));
        }
        if bytes[4] != AEAD_ALG_CHACHA20POLY1305 || bytes[5] != HASH_ALG_SHA256 {
            return Err(TeeError::Decode("unsupported sealed blob algorithms".into()));
        }
        let sealing_measurement = Measurement(bytes[6..38].try_into().unwrap());
        let platform_id = PlatformId(bytes[38..54].try_into().unwrap());
        let nonce = bytes[54..66].try_into().unwrap();
        let len = u64::from_be_bytes(bytes[66..74].try_into().unwrap());
        let body = &bytes[SEALED_HEADER_LEN..];
        if body.len() as u64 != len || len < AEAD_TAG_LEN as u64 {
            return Err(TeeError::Decode(format!(
                "sealed blob length field {len} does not match body of {} bytes",
                body.len()
            )));
        }
        Ok(SealedBlob {
            sealing_measurement,
            platform_id,
            nonce,
            ciphertext: body.to_vec(),
        })
    }
}
