use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use ed25519_dalek::VerifyingKey;

use super::{
    CounterClient, CounterError, CounterId, CounterService, CounterToken, MSG_COUNTER_CREATE,
    MSG_COUNTER_INC, MSG_COUNTER_KEY, MSG_COUNTER_READ,
};
use crate::attestation::{SecureChannel, Transport, MSG_ERROR};

/// Handles one counter request; `None` if `msg_type` is not a counter message.
pub fn serve_counter_request(service: &CounterService, msg_type: u8, body: &[u8]) -> Option<(u8, Vec<u8>)> {
    let parse_id = || -> Result<CounterId, CounterError> {
        body.try_into()
            .map(CounterId)
            .map_err(|_| CounterError::Decode("counter id must be 16 bytes".into()))
    };
    let result = match msg_type {
        MSG_COUNTER_CREATE => service
            .create_counter()
            .and_then(|id| service.read_stable(id)),
        MSG_COUNTER_INC => parse_id().and_then(|id| service.increment_async(id)),
        MSG_COUNTER_READ => parse_id().and_then(|id| service.read_stable(id)),
        MSG_COUNTER_KEY => return Some((MSG_COUNTER_KEY, service.public_key().to_bytes().to_vec())),
        _ => return None,
    };
    Some(match result {
        Ok(token) => (msg_type, token.to_bytes()),
        Err(e) => (MSG_ERROR, e.to_string().into_bytes()),
    })
}

/// Counter client speaking to a service over an attested channel.
pub struct RemoteCounter<T> {
    channel: Mutex<SecureChannel<T>>,
    key: VerifyingKey,
}

impl<T: Transport> RemoteCounter<T> {
    /// Fetches the service key over `channel`. The channel must already be
    /// attested to the counter service's measurement.
    pub fn connect(mut channel: SecureChannel<T>) -> Result<Self, CounterError> {
        let body = request(&mut channel, MSG_COUNTER_KEY, &[])?;
        let bytes: [u8; 32] = body
            .as_slice()
            .try_into()
            .map_err(|_| CounterError::Decode("service key must be 32 bytes".into()))?;
        let key = VerifyingKey::from_bytes(&bytes).map_err(|e| CounterError::Decode(e.to_string()))?;
        Ok(Self {
            channel: Mutex::new(channel),
            key,
        })
    }

    fn token(&self, msg_type: u8, body: &[u8]) -> Result<CounterToken, CounterError> {
        let reply = request(&mut self.channel.lock().unwrap(), msg_type, body)?;
        let token = CounterToken::from_bytes(&reply)?;
        token.verify(&self.key)?;
        Ok(token)
    }
}

fn request<T: Transport>(ch: &mut SecureChannel<T>, msg_type: u8, body: &[u8]) -> Result<Vec<u8>, CounterError> {
    let unavailable = |e: crate::attestation::ChannelError| CounterError::Unavailable(e.to_string());
    ch.send_msg(msg_type, body).map_err(unavailable)?;
    let (ty, reply) = ch.recv_msg().map_err(unavailable)?;
    match ty {
        t if t == msg_type => Ok(reply),
        MSG_ERROR => Err(CounterError::Unavailable(String::from_utf8_lossy(&reply).into_owned())),
        other => Err(CounterError::Decode(format!("unexpected reply type {other}"))),
    }
}

impl<T: Transport> CounterClient for RemoteCounter<T> {
    fn create_counter(&self) -> Result<CounterId, CounterError> {
        self.token(MSG_COUNTER_CREATE, &[]).map(|t| t.counter_id)
    }

    fn increment_async(&self, id: CounterId) -> Result<CounterToken, CounterError> {
        self.token(MSG_COUNTER_INC, &id.0)
    }

    fn read_stable(&self, id: CounterId) -> Result<CounterToken, CounterError> {
        self.token(MSG_COUNTER_READ, &id.0)
    }

    fn wait_stable(&self, id: CounterId, value: u64, timeout: Duration) -> Result<CounterToken, CounterError> {
        let deadline = Instant::now() + timeout;
        loop {
            let t = self.read_stable(id)?;
            if t.value >= value {
                return Ok(t);
            }
            if Instant::now() >= deadline {
                return Err(CounterError::Timeout(id));
            }
            thread::sleep(Duration::from_millis(2));
        }
    }

    fn verifying_key(&self) -> VerifyingKey {
        self.key
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::{
        attested_handshake, AttestationPolicy, HandshakeConfig, MemoryTransport, PeerCheck, Role, Side,
    };
    use crate::counter::wal::MemWal;
    use crate::counter::Stabilization;
    use crate::tee::Platform;
    use std::sync::Arc;

    #[test]
    fn remote_client_round_trip() {
        let platform = Platform::generate();
        let svc_enclave = platform.spawn_enclave(b"counter service", b"v1").unwrap();
        let client_enclave = platform.spawn_enclave(b"coordinator", b"v1").unwrap();
        let svc = Arc::new(CounterService::open(&svc_enclave, Box::new(MemWal::new()), Stabilization::Background).unwrap());
        let (a, b) = MemoryTransport::pair();

        let server = {
            let svc = svc.clone();
            let e = svc_enclave.clone();
            thread::spawn(move || {
                let mut ch = attested_handshake(
                    b,
                    HandshakeConfig {
                        side: Side::Responder,
                        role: Role::PolicyManager,
                        attester: &e,
                        peer_check: PeerCheck::Defer,
                    },
                )
                .unwrap();
                while let Ok((ty, body)) = ch.recv_msg() {
                    let (rt, reply) = serve_counter_request(&svc, ty, &body).unwrap();
                    ch.send_msg(rt, &reply).unwrap();
                }
            })
        };
        let ch = attested_handshake(
            a,
            HandshakeConfig {
                side: Side::Initiator,
                role: Role::Coordinator,
                attester: &client_enclave,
                peer_check: PeerCheck::Verify(AttestationPolicy::single(platform.root_public(), svc_enclave.measurement())),
            },
        )
        .unwrap();
        let remote = RemoteCounter::connect(ch).unwrap();
        assert_eq!(remote.verifying_key(), svc.public_key());
        let id = remote.create_counter().unwrap();
        assert_eq!(remote.read_stable(id).unwrap().value, 1);
        let t = remote.increment_async(id).unwrap();
        assert_eq!((t.value, t.stable), (2, false));
        assert_eq!(remote.wait_stable(id, 2, Duration::from_secs(5)).unwrap().value, 2);
        assert!(matches!(remote.read_stable(CounterId([0; 16])), Err(CounterError::Unavailable(_))));
        drop(remote);
        server.join().unwrap();
    }
}
