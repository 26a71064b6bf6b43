use std::time::Duration;

use thiserror::Error;

use super::protocol::{
    self, decode_params, encode_params, Join, JoinAccepted, JoinRejected, ModelBroadcast, RoundCommit, SessionEnd,
    UpdateSubmit, MSG_JOIN, MSG_MODEL_BROADCAST, MSG_ROUND_COMMIT, MSG_SESSION_END, MSG_UPDATE_SUBMIT,
};
use crate::attestation::{
    attested_handshake, AttestationPolicy, Attester, ChannelError, HandshakeConfig, HandshakeError, PeerCheck, Role,
    Side, Transport, MSG_ERROR,
};
use crate::config::SessionConfig;
use crate::crypto::Digest;
use crate::fl::{local_train, Dataset, FlError, ModelUpdate, ParameterVector};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("handshake with coordinator: {0}")]
    Handshake(#[from] HandshakeError),
    #[error("coordinator rejected the join: {0}")]
    Rejected(String),
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Fl(#[from] FlError),
}

/// Deliberate misbehavior, for exercising the outlier guard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Attack {
    /// Submit the honest update multiplied by this factor.
    Scale(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitSeen {
    pub round: u64,
    pub accuracy: f64,
    pub excluded: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ClientReport {
    pub client_id: String,
    pub joined_at: u64,
    pub submitted: Vec<ModelUpdate<f64>>,
    pub commits: Vec<CommitSeen>,
    pub final_params: Option<ParameterVector<f64>>,
    /// `None` if the coordinator went away without ending the session.
    pub end: Option<SessionEnd>,
}

/// A data owner's training loop inside its enclave.
pub struct ClientAgent<'a> {
    pub client_id: String,
    pub attester: &'a dyn Attester,
    pub coordinator: AttestationPolicy,
    pub data: &'a Dataset<f64>,
    pub dataset_hash: Digest,
    pub session: SessionConfig,
    pub attack: Option<Attack>,
    pub recv_timeout: Option<Duration>,
}

impl ClientAgent<'_> {
    /// Attests the coordinator, joins, and trains until the session ends.
    pub fn run<T: Transport>(&self, transport: T) -> Result<ClientReport, ClientError> {
        let mut ch = attested_handshake(
            transport,
            HandshakeConfig {
                side: Side::Initiator,
                role: Role::Client,
                attester: self.attester,
                peer_check: PeerCheck::Verify(self.coordinator.clone()),
            },
        )?;
        ch.set_read_timeout(self.recv_timeout)?;
        let join = Join {
            client_id: self.client_id.clone(),
            dataset_hash: self.dataset_hash,
            num_examples: self.data.len() as u64,
        };
        protocol::send(&mut ch, MSG_JOIN, &join)?;
        let (ty, body) = ch.recv_msg()?;
        let accepted: JoinAccepted = match ty {
            MSG_JOIN => parse(&body)?,
            MSG_ERROR => return Err(ClientError::Rejected(parse::<JoinRejected>(&body)?.reason)),
            other => return Err(ClientError::Protocol(format!("unexpected reply {other} to JOIN"))),
        };
        let mut report = ClientReport {
            client_id: self.client_id.clone(),
            joined_at: accepted.round,
            ..Default::default()
        };
        loop {
            let (ty, body) = match ch.recv_msg() {
                Ok(m) => m,
                Err(ChannelError::Closed) => return Ok(report),
                Err(e) => return Err(e.into()),
            };
            match ty {
                MSG_MODEL_BROADCAST => {
                    let b: ModelBroadcast = parse(&body)?;
                    let start = decode_params(&b.params)?;
                    let update = self.train(b.round, &start, b.seed)?;
                    let sub = UpdateSubmit {
                        client_id: update.client_id.clone(),
                        round: update.round,
                        params: encode_params(&update.params),
                        num_examples: update.num_examples,
                        params_hash: Digest(update.params_hash),
                    };
                    protocol::send(&mut ch, MSG_UPDATE_SUBMIT, &sub)?;
                    report.submitted.push(update);
                }
                MSG_ROUND_COMMIT => {
                    let c: RoundCommit = parse(&body)?;
                    report.final_params = Some(decode_params(&c.params)?);
                    report.commits.push(CommitSeen {
                        round: c.round,
                        accuracy: c.accuracy,
                        excluded: c.excluded,
                    });
                }
                MSG_SESSION_END => {
                    report.end = Some(parse(&body)?);
                    return Ok(report);
                }
                other => return Err(ClientError::Protocol(format!("unexpected message {other}"))),
            }
        }
    }

    fn train(&self, round: u64, start: &ParameterVector<f64>, seed: u64) -> Result<ModelUpdate<f64>, ClientError> {
        let honest = local_train(&self.client_id, round, start, self.data, &self.session, seed)?;
        Ok(match self.attack {
            None => honest,
            Some(Attack::Scale(f)) => ModelUpdate::new(&self.client_id, round, honest.params.scaled(f), honest.num_examples)?,
        })
    }
}

fn parse<M: serde::de::DeserializeOwned>(body: &[u8]) -> Result<M, ClientError> {
    protocol::parse(body).map_err(|e| ClientError::Protocol(e.to_string()))
}
