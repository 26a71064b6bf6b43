//! Mutually attested handshake and the AEAD-framed channel it yields.
//!
//! Each side sends `HELLO(nonce || role)`, then `KEYSHARE(x25519 public key)`
//! and `QUOTE(quote over H(own key || own role || peer nonce))`. After
//! checking the peer's evidence both sides derive direction keys from the
//! X25519 secret salted with the transcript hash, and exchange `FINISH`
//! MACs over the transcript.

use std::time::Duration;

use hmac::{Hmac, Mac};
use rand::rngs::OsRng;
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{EphemeralSecret, PublicKey};

use super::transport::{decode_frame, encode_frame, Transport, TransportError};
use super::{
    verify_bound_quote, AttestationError, AttestationPolicy, AttestationVerdict, ChannelBinding,
    Rejection, Role, MSG_FINISH, MSG_HELLO, MSG_KEYSHARE, MSG_QUOTE,
};
use crate::crypto::{self, AEAD_NONCE_LEN, AEAD_TAG_LEN};
use crate::tee::{Enclave, EnclaveIdentity, REPORT_DATA_LEN};

type HmacSha256 = Hmac<Sha256>;

const DATA_HEADER_LEN: usize = 12;

/// Source of attestation evidence for the local side of a handshake.
pub trait Attester: Send + Sync {
    /// Serialized quote over `report_data` and `nonce`, or `None` when the
    /// local side runs outside any enclave.
    fn attest(&self, report_data: &[u8; REPORT_DATA_LEN], nonce: [u8; 32]) -> Option<Vec<u8>>;
}

impl Attester for Enclave {
    fn attest(&self, report_data: &[u8; REPORT_DATA_LEN], nonce: [u8; 32]) -> Option<Vec<u8>> {
        Some(
            self.generate_quote(report_data, nonce)
                .expect("report data has the fixed length")
                .to_bytes(),
        )
    }
}

/// An endpoint without an enclave, such as an operator tool.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unattested;

impl Attester for Unattested {
    fn attest(&self, _: &[u8; REPORT_DATA_LEN], _: [u8; 32]) -> Option<Vec<u8>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Initiator,
    Responder,
}

#[derive(Debug, Clone)]
pub enum PeerCheck {
    /// Verify the peer during the handshake and abort on rejection.
    Verify(AttestationPolicy),
    /// Record the peer's evidence for the application to judge once it
    /// knows which policy applies.
    Defer,
}

pub struct HandshakeConfig<'a> {
    pub side: Side,
    pub role: Role,
    pub attester: &'a dyn Attester,
    pub peer_check: PeerCheck,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("transport: {0}")]
    Transport(TransportError),
    #[error("peer closed the connection during the handshake")]
    PeerAborted,
    #[error("malformed handshake message: {0}")]
    Decode(String),
    #[error("expected handshake message {expected}, got {got}")]
    UnexpectedMessage { expected: u8, got: u8 },
    #[error("peer attestation rejected: {0}")]
    Rejected(Rejection),
    #[error("peer quote: {0}")]
    Attestation(#[from] AttestationError),
    #[error("key exchange produced a non-contributory secret")]
    KeyExchange,
    #[error("transcript MAC mismatch")]
    FinishMismatch,
}

impl From<TransportError> for HandshakeError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Closed => HandshakeError::PeerAborted,
            other => HandshakeError::Transport(other),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("malformed channel frame: {0}")]
    Decode(String),
    #[error("channel frame failed authentication")]
    Integrity,
    #[error("channel frame counter {got}, expected {expected}")]
    Replay { expected: u64, got: u64 },
    #[error("channel is closed")]
    Closed,
    #[error("read timed out")]
    Timeout,
    #[error("transport: {0}")]
    Transport(TransportError),
}

impl From<TransportError> for ChannelError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Closed => ChannelError::Closed,
            TransportError::Timeout => ChannelError::Timeout,
            other => ChannelError::Transport(other),
        }
    }
}

/// What the peer presented during the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerEvidence {
    pub role: Role,
    pub quote: Option<Vec<u8>>,
    /// The nonce this side issued for the peer's quote.
    pub issued_nonce: [u8; 32],
    /// Report data the peer's quote must carry to bind its channel key.
    pub expected_report_data: [u8; REPORT_DATA_LEN],
}

impl PeerEvidence {
    pub fn verify(&self, policy: &AttestationPolicy) -> Result<AttestationVerdict, AttestationError> {
        match &self.quote {
            None => Ok(AttestationVerdict::Rejected(Rejection::NoEvidence)),
            Some(q) => verify_bound_quote(q, policy, &self.issued_nonce, &self.expected_report_data),
        }
    }
}

pub struct SecureChannel<T> {
    transport: T,
    send_key: [u8; 32],
    recv_key: [u8; 32],
    send_counter: u64,
    recv_counter: u64,
    closed: bool,
    peer: PeerEvidence,
    peer_identity: Option<EnclaveIdentity>,
}

fn expect<'a>(frame: &'a [u8], expected: u8) -> Result<&'a [u8], HandshakeError> {
    let (got, payload) = decode_frame(frame).map_err(HandshakeError::Decode)?;
    if got != expected {
        return Err(HandshakeError::UnexpectedMessage { expected, got });
    }
    Ok(payload)
}

/// Runs the attested key exchange over `transport`.
///
/// On any failure the transport is dropped, so the peer observes a closed
/// connection and no application frame is ever sent.
pub fn attested_handshake<T: Transport>(
    mut transport: T,
    cfg: HandshakeConfig<'_>,
) -> Result<SecureChannel<T>, HandshakeError> {
    let my_nonce: [u8; 32] = crypto::random_array();
    let hello = encode_frame(MSG_HELLO, &[my_nonce.as_slice(), cfg.role.as_str().as_bytes()].concat());
    transport.send_frame(&hello)?;
    let peer_hello = transport.recv_frame()?;
    let payload = expect(&peer_hello, MSG_HELLO)?;
    if payload.len() < 32 {
        return Err(HandshakeError::Decode("HELLO shorter than its nonce".into()));
    }
    let peer_nonce: [u8; 32] = payload[..32].try_into().unwrap();
    let peer_role: Role = std::str::from_utf8(&payload[32..])
        .map_err(|_| HandshakeError::Decode("role is not UTF-8".into()))?
        .parse()
        .map_err(HandshakeError::Decode)?;

    let secret = EphemeralSecret::random_from_rng(OsRng);
    let my_public = PublicKey::from(&secret);
    let keyshare = encode_frame(MSG_KEYSHARE, my_public.as_bytes());
    transport.send_frame(&keyshare)?;

    let binding = ChannelBinding {
        ephemeral_public_key: my_public.as_bytes(),
        role: cfg.role,
        session_nonce: peer_nonce,
    };
    let my_quote = cfg.attester.attest(&binding.report_data(), peer_nonce);
    let quote_frame = encode_frame(MSG_QUOTE, my_quote.as_deref().unwrap_or(&[]));
    transport.send_frame(&quote_frame)?;

    let peer_keyshare = transport.recv_frame()?;
    let peer_public: [u8; 32] = expect(&peer_keyshare, MSG_KEYSHARE)?
        .try_into()
        .map_err(|_| HandshakeError::Decode("KEYSHARE must carry 32 bytes".into()))?;
    let peer_quote_frame = transport.recv_frame()?;
    let peer_quote = expect(&peer_quote_frame, MSG_QUOTE)?;

    let peer = PeerEvidence {
        role: peer_role,
        quote: (!peer_quote.is_empty()).then(|| peer_quote.to_vec()),
        issued_nonce: my_nonce,
        expected_report_data: ChannelBinding {
            ephemeral_public_key: &peer_public,
            role: peer_role,
            session_nonce: my_nonce,
        }
        .report_data(),
    };
    let peer_identity = match &cfg.peer_check {
        PeerCheck::Verify(policy) => match peer.verify(policy)? {
            AttestationVerdict::Accepted(id) => Some(id),
            AttestationVerdict::Rejected(r) => {
                log::debug!("aborting handshake with {peer_role}: {r}");
                return Err(HandshakeError::Rejected(r));
            }
        },
        PeerCheck::Defer => None,
    };

    let shared = secret.diffie_hellman(&PublicKey::from(peer_public));
    if !shared.was_contributory() {
        return Err(HandshakeError::KeyExchange);
    }

    let (first, second) = match cfg.side {
        Side::Initiator => ((&hello, &keyshare, &quote_frame), (&peer_hello, &peer_keyshare, &peer_quote_frame)),
        Side::Responder => ((&peer_hello, &peer_keyshare, &peer_quote_frame), (&hello, &keyshare, &quote_frame)),
    };
    let transcript = crypto::sha256(&[
        b"secfl-handshake-v1",
        first.0,
        second.0,
        first.1,
        second.1,
        first.2,
        second.2,
    ]);
    let i2r = crypto::derive_key(shared.as_bytes(), &transcript, b"initiator->responder");
    let r2i = crypto::derive_key(shared.as_bytes(), &transcript, b"responder->initiator");
    let finish_key = crypto::derive_key(shared.as_bytes(), &transcript, b"finish");

    let finish_mac = |label: &[u8]| {
        let mut mac = HmacSha256::new_from_slice(&finish_key).expect("any key length");
        mac.update(label);
        mac.update(&transcript);
        mac
    };
    let (my_label, peer_label): (&[u8], &[u8]) = match cfg.side {
        Side::Initiator => (b"initiator", b"responder"),
        Side::Responder => (b"responder", b"initiator"),
    };
    transport.send_frame(&encode_frame(
        MSG_FINISH,
        &finish_mac(my_label).finalize().into_bytes(),
    ))?;
    let peer_finish = transport.recv_frame()?;
    finish_mac(peer_label)
        .verify_slice(expect(&peer_finish, MSG_FINISH)?)
        .map_err(|_| HandshakeError::FinishMismatch)?;

    let (send_key, recv_key) = match cfg.side {
        Side::Initiator => (i2r, r2i),
        Side::Responder => (r2i, i2r),
    };
    Ok(SecureChannel {
        transport,
        send_key,
        recv_key,
        send_counter: 0,
        recv_counter: 0,
        closed: false,
        peer,
        peer_identity,
    })
}

fn data_nonce(counter: u64) -> [u8; AEAD_NONCE_LEN] {
    let mut n = [0u8; AEAD_NONCE_LEN];
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

impl<T: Transport> SecureChannel<T> {
    pub fn peer_role(&self) -> Role {
        self.peer.role
    }

    /// The peer identity verified during the handshake, when the handshake
    /// was run with [`PeerCheck::Verify`].
    pub fn peer_identity(&self) -> Option<EnclaveIdentity> {
        self.peer_identity
    }

    pub fn peer_evidence(&self) -> &PeerEvidence {
        &self.peer
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn set_read_timeout(&mut self, timeout: Option<Duration>) -> Result<(), ChannelError> {
        self.transport.set_read_timeout(timeout).map_err(ChannelError::from)
    }

    /// Frame: `u32 BE length | u64 BE counter | ciphertext+tag`.
    pub fn send(&mut self, payload: &[u8]) -> Result<(), ChannelError> {
        if self.closed {
            return Err(ChannelError::Closed);
        }
        let counter = self.send_counter;
        let len = (8 + payload.len() + AEAD_TAG_LEN) as u32;
        let mut frame = Vec::with_capacity(4 + len as usize);
        frame.extend_from_slice(&len.to_be_bytes());
        frame.extend_from_slice(&counter.to_be_bytes());
        let ct = crypto::aead_seal(&self.send_key, &data_nonce(counter), &frame[..DATA_HEADER_LEN], payload);
        frame.extend_from_slice(&ct);
        self.send_counter += 1;
        self.transport.send_frame(&frame).map_err(|e| {
            self.closed = true;
            ChannelError::from(e)
        })
    }

    pub fn recv(&mut self) -> Result<Vec<u8>, ChannelError> {
        if self.closed {
            return Err(ChannelError::Closed);
        }
        let frame = match self.transport.recv_frame() {
            Ok(f) => f,
            Err(TransportError::Timeout) => return Err(ChannelError::Timeout),
            Err(e) => {
                self.closed = true;
                return Err(e.into());
            }
        };
        let result = self.open(&frame);
        if result.is_err() {
            self.closed = true;
        }
        result
    }

    fn open(&mut self, frame: &[u8]) -> Result<Vec<u8>, ChannelError> {
        if frame.len() < DATA_HEADER_LEN + AEAD_TAG_LEN {
            return Err(ChannelError::Decode(format!("frame of {} bytes is too short", frame.len())));
        }
        let declared = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        if declared != frame.len() - 4 {
            return Err(ChannelError::Decode(format!(
                "length prefix {declared} does not match {} body bytes",
                frame.len() - 4
            )));
        }
        let counter = u64::from_be_bytes(frame[4..12].try_into().unwrap());
        if counter != self.recv_counter {
            return Err(ChannelError::Replay {
                expected: self.recv_counter,
                got: counter,
            });
        }
        let pt = crypto::aead_open(
            &self.recv_key,
            &data_nonce(counter),
            &frame[..DATA_HEADER_LEN],
            &frame[DATA_HEADER_LEN..],
        )
        .map_err(|_| ChannelError::Integrity)?;
        self.recv_counter += 1;
        Ok(pt)
    }

    /// Sends `msg_type || body` as one record.
    pub fn send_msg(&mut self, msg_type: u8, body: &[u8]) -> Result<(), ChannelError> {
        let mut p = Vec::with_capacity(1 + body.len());
        p.push(msg_type);
        p.extend_from_slice(body);
        self.send(&p)
    }

    pub fn recv_msg(&mut self) -> Result<(u8, Vec<u8>), ChannelError> {
        let mut p = self.recv()?;
        if p.is_empty() {
            self.closed = true;
            return Err(ChannelError::Decode("empty message".into()));
        }
        let body = p.split_off(1);
        Ok((p[0], body))
    }
}
