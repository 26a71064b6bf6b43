//! Signed, asynchronous monotonic counters for rollback protection.
//!
//! An increment is acknowledged at once with a provisional token and becomes
//! stable only after its write-ahead record is durable. Stable values are
//! never served before they are persisted, so no restart can observe a
//! stable value lower than one already returned.
//!
//! Data written under a provisional token must not be published until the
//! token's value is stable: an increment lost in a crash may be re-issued.

mod remote;
mod service;
pub mod wal;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::crypto::{self, SIGNATURE_LEN};

pub use remote::{serve_counter_request, RemoteCounter};
pub use service::{CounterService, Stabilization};

pub const MSG_COUNTER_CREATE: u8 = 20;
pub const MSG_COUNTER_INC: u8 = 21;
pub const MSG_COUNTER_READ: u8 = 22;
/// Fetches the service's token-verification key over the attested channel.
pub const MSG_COUNTER_KEY: u8 = 23;

pub const TOKEN_LEN: usize = 16 + 8 + 1 + SIGNATURE_LEN;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CounterId(pub [u8; 16]);

impl CounterId {
    pub fn random() -> Self {
        CounterId(crypto::random_array())
    }
}

impl fmt::Display for CounterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for CounterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CounterId({self})")
    }
}

impl FromStr for CounterId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        crypto::hex_array(s).map(CounterId)
    }
}

impl Serialize for CounterId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CounterId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CounterError {
    #[error("counter {0} not found")]
    NotFound(CounterId),
    #[error("counter token signature does not verify")]
    BadSignature,
    #[error("malformed counter message: {0}")]
    Decode(String),
    #[error("counter storage: {0}")]
    Storage(String),
    #[error("timed out waiting for counter {0} to stabilize")]
    Timeout(CounterId),
    #[error("counter service unavailable: {0}")]
    Unavailable(String),
}

/// Signed statement of a counter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterToken {
    pub counter_id: CounterId,
    pub value: u64,
    pub stable: bool,
    pub signature: [u8; SIGNATURE_LEN],
}

impl CounterToken {
    fn signed_bytes(id: &CounterId, value: u64, stable: bool) -> [u8; 25] {
        let mut m = [0u8; 25];
        m[..16].copy_from_slice(&id.0);
        m[16..24].copy_from_slice(&value.to_be_bytes());
        m[24] = stable as u8;
        m
    }

    pub(crate) fn sign(key: &SigningKey, counter_id: CounterId, value: u64, stable: bool) -> Self {
        let signature = key
            .sign(&Self::signed_bytes(&counter_id, value, stable))
            .to_bytes();
        Self {
            counter_id,
            value,
            stable,
            signature,
        }
    }

    pub fn verify(&self, key: &VerifyingKey) -> Result<(), CounterError> {
        key.verify(
            &Self::signed_bytes(&self.counter_id, self.value, self.stable),
            &Signature::from_bytes(&self.signature),
        )
        .map_err(|_| CounterError::BadSignature)
    }

    /// `counter_id 16B | value u64 BE | stable u8 | signature`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Self::signed_bytes(&self.counter_id, self.value, self.stable).to_vec();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CounterError> {
        if bytes.len() != TOKEN_LEN {
            return Err(CounterError::Decode(format!(
                "token must be {TOKEN_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let stable = match bytes[24] {
            0 => false,
            1 => true,
            b => return Err(CounterError::Decode(format!("bad stable flag {b}"))),
        };
        Ok(Self {
            counter_id: CounterId(bytes[..16].try_into().unwrap()),
            value: u64::from_be_bytes(bytes[16..24].try_into().unwrap()),
            stable,
            signature: bytes[25..].try_into().unwrap(),
        })
    }
}

/// Operations a counter consumer needs, whether the service is in-process
/// or remote.
pub trait CounterClient: Send + Sync {
    fn create_counter(&self) -> Result<CounterId, CounterError>;
    fn increment_async(&self, id: CounterId) -> Result<CounterToken, CounterError>;
    fn read_stable(&self, id: CounterId) -> Result<CounterToken, CounterError>;
    /// Blocks until `id` is stable at `value` or higher.
    fn wait_stable(&self, id: CounterId, value: u64, timeout: Duration) -> Result<CounterToken, CounterError>;
    fn verifying_key(&self) -> VerifyingKey;
}

impl<C: CounterClient + ?Sized> CounterClient for std::sync::Arc<C> {
    fn create_counter(&self) -> Result<CounterId, CounterError> {
        (**self).create_counter()
    }
    fn increment_async(&self, id: CounterId) -> Result<CounterToken, CounterError> {
        (**self).increment_async(id)
    }
    fn read_stable(&self, id: CounterId) -> Result<CounterToken, CounterError> {
        (**self).read_stable(id)
    }
    fn wait_stable(&self, id: CounterId, value: u64, timeout: Duration) -> Result<CounterToken, CounterError> {
        (**self).wait_stable(id, value, timeout)
    }
    fn verifying_key(&self) -> VerifyingKey {
        (**self).verifying_key()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_round_trip_and_tamper() {
        let key = SigningKey::from_bytes(&[5u8; 32]);
        let t = CounterToken::sign(&key, CounterId([1; 16]), 7, true);
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), TOKEN_LEN);
        let back = CounterToken::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        back.verify(&key.verifying_key()).unwrap();

        let mut forged = back;
        forged.value += 1;
        assert_eq!(forged.verify(&key.verifying_key()), Err(CounterError::BadSignature));
        let mut promoted = CounterToken::sign(&key, CounterId([1; 16]), 7, false);
        promoted.stable = true;
        assert_eq!(promoted.verify(&key.verifying_key()), Err(CounterError::BadSignature));
    }

    #[test]
    fn token_layout() {
        let key = SigningKey::from_bytes(&[5u8; 32]);
        let b = CounterToken::sign(&key, CounterId([0xAB; 16]), 0x0102, false).to_bytes();
        assert_eq!(&b[..16], &[0xAB; 16]);
        assert_eq!(&b[16..24], &[0, 0, 0, 0, 0, 0, 1, 2]);
        assert_eq!(b[24], 0);
    }
}
