//! Quote verification and mutually attested channels.
//!
//! Verification runs its checks in a fixed order (decode, signature, nonce,
//! measurement, svn, binding) and reports only the first failure.

mod channel;
mod transport;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto;
use crate::tee::{EnclaveIdentity, Measurement, Quote, REPORT_DATA_LEN};

pub use channel::{
    attested_handshake, Attester, ChannelError, HandshakeConfig, HandshakeError, PeerCheck,
    PeerEvidence, SecureChannel, Side, Unattested,
};
pub use transport::{
    decode_frame, encode_frame, frame_kind, CaptureDirection, CapturedFrame, FrameKind,
    MemoryTransport, Tapped, TcpTransport, Transport, TransportError, WireCapture, MAX_FRAME_LEN,
};

/// Handshake message types.
pub const MSG_HELLO: u8 = 1;
pub const MSG_KEYSHARE: u8 = 2;
pub const MSG_QUOTE: u8 = 3;
pub const MSG_FINISH: u8 = 4;

/// Application-level error reply carried inside an established channel;
/// the body is UTF-8 text.
pub const MSG_ERROR: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Client,
    Coordinator,
    PolicyManager,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Client => "client",
            Role::Coordinator => "coordinator",
            Role::PolicyManager => "policy-manager",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "client" => Ok(Role::Client),
            "coordinator" => Ok(Role::Coordinator),
            "policy-manager" => Ok(Role::PolicyManager),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationPolicy {
    pub trusted_root: VerifyingKey,
    pub expected_measurements: BTreeSet<Measurement>,
    pub min_svn: u16,
}

impl AttestationPolicy {
    pub fn new(
        trusted_root: VerifyingKey,
        expected_measurements: impl IntoIterator<Item = Measurement>,
        min_svn: u16,
    ) -> Result<Self, AttestationError> {
        let expected_measurements: BTreeSet<_> = expected_measurements.into_iter().collect();
        if expected_measurements.is_empty() {
            return Err(AttestationError::EmptyPolicy);
        }
        Ok(Self {
            trusted_root,
            expected_measurements,
            min_svn,
        })
    }

    pub fn single(trusted_root: VerifyingKey, measurement: Measurement) -> Self {
        Self::new(trusted_root, [measurement], 0).expect("one measurement")
    }
}

/// Why a quote was not accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    Signature,
    NonceMismatch,
    MeasurementMismatch,
    SvnTooLow,
    BindingMismatch,
    /// The peer offered no attestation evidence at all.
    NoEvidence,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rejection::Signature => "signature",
            Rejection::NonceMismatch => "nonce-mismatch",
            Rejection::MeasurementMismatch => "measurement-mismatch",
            Rejection::SvnTooLow => "svn-too-low",
            Rejection::BindingMismatch => "binding-mismatch",
            Rejection::NoEvidence => "no-evidence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttestationVerdict {
    Accepted(EnclaveIdentity),
    Rejected(Rejection),
}

impl AttestationVerdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, AttestationVerdict::Accepted(_))
    }

    pub fn rejection(&self) -> Option<Rejection> {
        match self {
            AttestationVerdict::Rejected(r) => Some(*r),
            AttestationVerdict::Accepted(_) => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestationError {
    #[error("quote decode error: {0}")]
    Decode(String),
    #[error("attestation policy must pin at least one measurement")]
    EmptyPolicy,
}

/// Binds an ephemeral channel key into quote report data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelBinding<'a> {
    pub ephemeral_public_key: &'a [u8],
    pub role: Role,
    pub session_nonce: [u8; 32],
}

impl ChannelBinding<'_> {
    /// `H(ephemeral_public_key || role || session_nonce)`, zero-padded to 64 bytes.
    pub fn report_data(&self) -> [u8; REPORT_DATA_LEN] {
        let digest = crypto::sha256(&[
            self.ephemeral_public_key,
            self.role.as_str().as_bytes(),
            &self.session_nonce,
        ]);
        let mut rd = [0u8; REPORT_DATA_LEN];
        rd[..32].copy_from_slice(&digest);
        rd
    }
}

/// Checks a serialized quote against `policy` and the nonce the verifier issued.
pub fn verify_quote(
    quote_bytes: &[u8],
    policy: &AttestationPolicy,
    expected_nonce: &[u8; 32],
) -> Result<AttestationVerdict, AttestationError> {
    check_quote(
        quote_bytes,
        &policy.trusted_root,
        Some(&policy.expected_measurements),
        policy.min_svn,
        expected_nonce,
        None,
    )
}

/// Like [`verify_quote`], additionally requiring the report data to equal
/// `expected_report_data` (the channel binding check).
pub fn verify_bound_quote(
    quote_bytes: &[u8],
    policy: &AttestationPolicy,
    expected_nonce: &[u8; 32],
    expected_report_data: &[u8; REPORT_DATA_LEN],
) -> Result<AttestationVerdict, AttestationError> {
    check_quote(
        quote_bytes,
        &policy.trusted_root,
        Some(&policy.expected_measurements),
        policy.min_svn,
        expected_nonce,
        Some(expected_report_data),
    )
}

pub(crate) fn check_quote(
    quote_bytes: &[u8],
    trusted_root: &VerifyingKey,
    measurements: Option<&BTreeSet<Measurement>>,
    min_svn: u16,
    expected_nonce: &[u8; 32],
    expected_report_data: Option<&[u8; REPORT_DATA_LEN]>,
) -> Result<AttestationVerdict, AttestationError> {
    let quote = Quote::from_bytes(quote_bytes).map_err(|e| AttestationError::Decode(e.to_string()))?;
    let reject = |r| Ok(AttestationVerdict::Rejected(r));
    if !quote.signature_valid(trusted_root) {
        return reject(Rejection::Signature);
    }
    if &quote.nonce != expected_nonce {
        return reject(Rejection::NonceMismatch);
    }
    if let Some(set) = measurements {
        if !set.contains(&quote.identity.measurement) {
            return reject(Rejection::MeasurementMismatch);
        }
    }
    if quote.identity.svn < min_svn {
        return reject(Rejection::SvnTooLow);
    }
    if let Some(rd) = expected_report_data {
        if &quote.report_data != rd {
            return reject(Rejection::BindingMismatch);
        }
    }
    Ok(AttestationVerdict::Accepted(quote.identity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tee::Platform;
    use ed25519_dalek::SigningKey;

    fn setup() -> (Platform, crate::tee::Enclave, AttestationPolicy) {
        let p = Platform::generate();
        let e = p.spawn_enclave(b"coordinator code", b"cfg").unwrap();
        let policy = AttestationPolicy::single(p.root_public(), e.measurement());
        (p, e, policy)
    }

    #[test]
    fn genuine_quote_is_accepted() {
        let (_, e, policy) = setup();
        let q = e.generate_quote(&[0u8; 64], [4u8; 32]).unwrap().to_bytes();
        assert_eq!(
            verify_quote(&q, &policy, &[4u8; 32]).unwrap(),
            AttestationVerdict::Accepted(e.identity())
        );
    }

    #[test]
    fn unpinned_measurement_is_rejected() {
        let (p, _, policy) = setup();
        let rogue = p.spawn_enclave(b"patched coordinator", b"cfg").unwrap();
        let q = rogue.generate_quote(&[0u8; 64], [4u8; 32]).unwrap().to_bytes();
        assert_eq!(
            verify_quote(&q, &policy, &[4u8; 32]).unwrap().rejection(),
            Some(Rejection::MeasurementMismatch)
        );
    }

    #[test]
    fn replayed_quote_is_rejected_on_nonce() {
        let (_, e, policy) = setup();
        let q = e.generate_quote(&[0u8; 64], [4u8; 32]).unwrap().to_bytes();
        assert_eq!(
            verify_quote(&q, &policy, &[5u8; 32]).unwrap().rejection(),
            Some(Rejection::NonceMismatch)
        );
    }

    #[test]
    fn foreign_root_is_signature_rejection() {
        let (_, e, policy) = setup();
        let forged = Quote::sign(
            &SigningKey::from_bytes(&[9u8; 32]),
            e.identity(),
            [0u8; 64],
            [4u8; 32],
        );
        assert_eq!(
            verify_quote(&forged.to_bytes(), &policy, &[4u8; 32]).unwrap().rejection(),
            Some(Rejection::Signature)
        );
    }

    #[test]
    fn svn_floor_is_enforced() {
        let (p, e, mut policy) = setup();
        policy.min_svn = 2;
        let q = e.generate_quote(&[0u8; 64], [1u8; 32]).unwrap().to_bytes();
        assert_eq!(
            verify_quote(&q, &policy, &[1u8; 32]).unwrap().rejection(),
            Some(Rejection::SvnTooLow)
        );
        let upgraded = p.upgraded(2).unwrap().spawn_enclave(b"coordinator code", b"cfg").unwrap();
        let q = upgraded.generate_quote(&[0u8; 64], [1u8; 32]).unwrap().to_bytes();
        assert!(verify_quote(&q, &policy, &[1u8; 32]).unwrap().is_accepted());
    }

    #[test]
    fn first_failing_check_wins() {
        let (p, _, policy) = setup();
        // Wrong measurement and wrong nonce: nonce is checked first.
        let rogue = p.spawn_enclave(b"other", b"cfg").unwrap();
        let q = rogue.generate_quote(&[0u8; 64], [1u8; 32]).unwrap().to_bytes();
        assert_eq!(
            verify_quote(&q, &policy, &[2u8; 32]).unwrap().rejection(),
            Some(Rejection::NonceMismatch)
        );
    }

    #[test]
    fn binding_checked_last() {
        let (_, e, policy) = setup();
        let binding = ChannelBinding {
            ephemeral_public_key: &[1u8; 32],
            role: Role::Coordinator,
            session_nonce: [3u8; 32],
        };
        let q = e.generate_quote(&binding.report_data(), [3u8; 32]).unwrap().to_bytes();
        assert!(verify_bound_quote(&q, &policy, &[3u8; 32], &binding.report_data())
            .unwrap()
            .is_accepted());
        let other = ChannelBinding {
            ephemeral_public_key: &[2u8; 32],
            ..binding.clone()
        };
        assert_eq!(
            verify_bound_quote(&q, &policy, &[3u8; 32], &other.report_data())
                .unwrap()
                .rejection(),
            Some(Rejection::BindingMismatch)
        );
    }

    #[test]
    fn malformed_quote_is_decode_error_not_rejection() {
        let (_, e, policy) = setup();
        let q = e.generate_quote(&[0u8; 64], [4u8; 32]).unwrap().to_bytes();
        assert!(matches!(
            verify_quote(&q[..q.len() - 1], &policy, &[4u8; 32]),
            Err(AttestationError::Decode(_))
        ));
    }

    #[test]
    fn verification_is_pure() {
        let (_, e, policy) = setup();
        let q = e.generate_quote(&[8u8; 64], [4u8; 32]).unwrap().to_bytes();
        let a = verify_quote(&q, &policy, &[4u8; 32]).unwrap();
        let b = verify_quote(&q, &policy, &[4u8; 32]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_policy_is_refused() {
        let p = Platform::generate();
        assert_eq!(
            AttestationPolicy::new(p.root_public(), [], 0),
            Err(AttestationError::EmptyPolicy)
        );
    }

    #[test]
    fn report_data_is_zero_padded_digest() {
        let b = ChannelBinding {
            ephemeral_public_key: b"key",
            role: Role::Client,
            session_nonce: [0u8; 32],
        };
        let rd = b.report_data();
        assert_eq!(&rd[..32], &crypto::sha256(&[b"key", b"client", &[0u8; 32]]));
        assert_eq!(&rd[32..], &[0u8; 32]);
    }
}
