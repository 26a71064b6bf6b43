use serde::Deserialize;
use serde_json::json;

use super::{InjectionBundle, PolicyError, MSG_GENERATE, MSG_REQUEST_SECRETS, MSG_UPLOAD_POLICY};
use crate::attestation::{
    attested_handshake, AttestationPolicy, Attester, HandshakeConfig, PeerCheck, Role, SecureChannel, Side, Transport,
    MSG_ERROR,
};
use crate::canonical;
use crate::crypto::Digest;

/// Requests to a policy manager over a channel that has attested the
/// manager's own measurement.
pub struct PolicyClient<T> {
    channel: SecureChannel<T>,
}

#[derive(Deserialize)]
struct HashReply {
    policy_hash: Digest,
}

impl<T: Transport> PolicyClient<T> {
    /// Handshakes as `role`, presenting evidence from `attester` and
    /// requiring the manager to match `manager`.
    pub fn connect(transport: T, attester: &dyn Attester, role: Role, manager: AttestationPolicy) -> Result<Self, PolicyError> {
        let channel = attested_handshake(
            transport,
            HandshakeConfig {
                side: Side::Initiator,
                role,
                attester,
                peer_check: PeerCheck::Verify(manager),
            },
        )
        .map_err(|e| PolicyError::Unavailable(e.to_string()))?;
        Ok(Self { channel })
    }

    pub fn from_channel(channel: SecureChannel<T>) -> Self {
        Self { channel }
    }

    pub fn into_channel(self) -> SecureChannel<T> {
        self.channel
    }

    fn call(&mut self, msg_type: u8, body: &[u8]) -> Result<Vec<u8>, PolicyError> {
        let unavailable = |e: crate::attestation::ChannelError| PolicyError::Unavailable(e.to_string());
        self.channel.send_msg(msg_type, body).map_err(unavailable)?;
        let (ty, reply) = self.channel.recv_msg().map_err(unavailable)?;
        match ty {
            t if t == msg_type => Ok(reply),
            MSG_ERROR => Err(PolicyError::from_wire(&reply)),
            other => Err(PolicyError::Protocol(format!("unexpected reply type {other}"))),
        }
    }

    pub fn upload_policy(&mut self, source: &[u8]) -> Result<Digest, PolicyError> {
        let reply = self.call(MSG_UPLOAD_POLICY, source)?;
        let r: HashReply = canonical::from_slice(&reply).map_err(|e| PolicyError::Protocol(e.to_string()))?;
        Ok(r.policy_hash)
    }

    pub fn generate_secrets(&mut self, policy_hash: &Digest) -> Result<(), PolicyError> {
        let body = canonical::to_bytes(&json!({ "policy_hash": policy_hash })).expect("JSON value");
        self.call(MSG_GENERATE, &body).map(|_| ())
    }

    pub fn request_secrets(&mut self, policy_hash: &Digest, role: Role) -> Result<InjectionBundle, PolicyError> {
        self.request_raw(policy_hash, role.as_str())
    }

    /// Like [`request_secrets`](Self::request_secrets) with the role given as
    /// free text.
    pub fn request_raw(&mut self, policy_hash: &Digest, role: &str) -> Result<InjectionBundle, PolicyError> {
        let body = canonical::to_bytes(&json!({ "policy_hash": policy_hash, "role": role })).expect("JSON value");
        let reply = self.call(MSG_REQUEST_SECRETS, &body)?;
        canonical::from_slice(&reply).map_err(|e| PolicyError::Protocol(e.to_string()))
    }
}
