//! Round protocol messages. Every body is canonical JSON; parameter vectors
//! travel as base64 of their binary serialization.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attestation::{ChannelError, SecureChannel, Transport, MSG_ERROR};
use crate::canonical;
use crate::crypto::Digest;
use crate::fl::{FlError, ParameterVector};

pub const MSG_JOIN: u8 = 30;
pub const MSG_MODEL_BROADCAST: u8 = 31;
pub const MSG_UPDATE_SUBMIT: u8 = 32;
pub const MSG_ROUND_COMMIT: u8 = 33;
pub const MSG_SESSION_END: u8 = 34;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Join {
    pub client_id: String,
    pub dataset_hash: Digest,
    pub num_examples: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinAccepted {
    pub client_id: String,
    /// Last committed round; training resumes at the next one.
    pub round: u64,
}

/// Body of an `MSG_ERROR` reply to a join.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinRejected {
    pub error: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBroadcast {
    pub round: u64,
    pub params: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateSubmit {
    pub client_id: String,
    pub round: u64,
    pub params: String,
    pub num_examples: u64,
    pub params_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundCommit {
    pub round: u64,
    pub params: String,
    pub accuracy: f64,
    pub loss: f64,
    /// Whether this recipient's update was left out of the aggregate.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEnd {
    pub round: u64,
    pub reason: String,
}

pub fn encode_params(p: &ParameterVector<f64>) -> String {
    B64.encode(p.to_bytes())
}

pub fn decode_params(s: &str) -> Result<ParameterVector<f64>, FlError> {
    let bytes = B64
        .decode(s)
        .map_err(|e| FlError::InvalidInput(format!("parameters are not base64: {e}")))?;
    ParameterVector::from_bytes(&bytes)
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("malformed message: {0}")]
    Decode(String),
}

pub fn send<T: Transport, M: Serialize>(ch: &mut SecureChannel<T>, msg_type: u8, msg: &M) -> Result<(), ChannelError> {
    ch.send_msg(msg_type, &canonical::to_bytes(msg).expect("messages serialize"))
}

pub fn parse<M: DeserializeOwned>(body: &[u8]) -> Result<M, WireError> {
    canonical::from_slice(body).map_err(|e| WireError::Decode(e.to_string()))
}

pub fn send_error<T: Transport>(ch: &mut SecureChannel<T>, reason: &str) -> Result<(), ChannelError> {
    let body = JoinRejected {
        error: "rejected".into(),
        reason: reason.into(),
    };
    send(ch, MSG_ERROR, &body)
}
