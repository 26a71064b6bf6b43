use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use ed25519_dalek::{SigningKey, VerifyingKey};

use super::wal::{self, WalStore};
use super::{CounterClient, CounterError, CounterId, CounterToken};
use crate::tee::Enclave;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stabilization {
    /// A worker thread persists acknowledged increments in batches.
    Background,
    /// Increments stay provisional until [`CounterService::stabilize`] runs.
    Manual,
}

#[derive(Default)]
struct State {
    acknowledged: HashMap<CounterId, u64>,
    stable: HashMap<CounterId, u64>,
    pending: Vec<(CounterId, u64)>,
    in_flight: usize,
    shutdown: bool,
    discard_pending: bool,
}

struct Inner {
    key: SigningKey,
    state: Mutex<State>,
    changed: Condvar,
    wal: Mutex<Box<dyn WalStore>>,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap()
    }

    /// Persists one batch of pending increments, then publishes them.
    fn stabilize(&self) -> Result<usize, CounterError> {
        let mut wal = self.wal.lock().unwrap();
        let batch = {
            let mut s = self.lock();
            let batch = std::mem::take(&mut s.pending);
            s.in_flight += batch.len();
            batch
        };
        if batch.is_empty() {
            return Ok(0);
        }
        let mut buf = Vec::with_capacity(batch.len() * wal::RECORD_LEN);
        for (id, v) in &batch {
            buf.extend_from_slice(&wal::encode_record(id, *v));
        }
        let written = wal.append(&buf).and_then(|_| wal.sync());
        let mut s = self.lock();
        s.in_flight -= batch.len();
        if let Err(e) = written {
            // Leave the values provisional; they will be retried.
            s.pending.splice(0..0, batch);
            return Err(CounterError::Storage(e.to_string()));
        }
        if s.discard_pending {
            return Ok(0);
        }
        for (id, v) in &batch {
            let slot = s.stable.entry(*id).or_insert(*v);
            *slot = (*slot).max(*v);
        }
        drop(s);
        self.changed.notify_all();
        Ok(batch.len())
    }
}

/// The counter service. Its signing key is derived from the hosting enclave,
/// so tokens stay verifiable across restarts of the same code on the same
/// platform.
pub struct CounterService {
    inner: Arc<Inner>,
    worker: Option<JoinHandle<()>>,
}

impl CounterService {
    pub fn open(enclave: &Enclave, wal: Box<dyn WalStore>, mode: Stabilization) -> Result<Self, CounterError> {
        let key = SigningKey::from_bytes(&enclave.derive_key("counter-service-signing"));
        Self::with_key(key, wal, mode)
    }

    pub fn with_key(key: SigningKey, mut wal: Box<dyn WalStore>, mode: Stabilization) -> Result<Self, CounterError> {
        let log = wal.read_all().map_err(|e| CounterError::Storage(e.to_string()))?;
        let recovered = wal::replay(&log);
        let state = State {
            acknowledged: recovered.clone(),
            stable: recovered,
            ..State::default()
        };
        let inner = Arc::new(Inner {
            key,
            state: Mutex::new(state),
            changed: Condvar::new(),
            wal: Mutex::new(wal),
        });
        let worker = (mode == Stabilization::Background).then(|| {
            let inner = inner.clone();
            thread::Builder::new()
                .name("counter-stabilizer".into())
                .spawn(move || loop {
                    {
                        let mut s = inner.lock();
                        while s.pending.is_empty() && !s.shutdown {
                            s = inner.changed.wait(s).unwrap();
                        }
                        if s.shutdown && (s.discard_pending || s.pending.is_empty()) {
                            return;
                        }
                    }
                    if let Err(e) = inner.stabilize() {
                        log::error!("counter stabilization failed: {e}");
                        thread::sleep(Duration::from_millis(10));
                    }
                })
                .expect("spawn stabilizer")
        });
        Ok(Self { inner, worker })
    }

    pub fn public_key(&self) -> VerifyingKey {
        self.inner.key.verifying_key()
    }

    /// Runs one stabilization step; returns how many increments it persisted.
    pub fn stabilize(&self) -> Result<usize, CounterError> {
        self.inner.stabilize()
    }

    /// Waits until every acknowledged increment is stable.
    pub fn quiesce(&self) {
        if self.worker.is_none() {
            while self.stabilize().map(|n| n > 0).unwrap_or(false) {}
            return;
        }
        let mut s = self.inner.lock();
        while !s.pending.is_empty() || s.in_flight > 0 {
            s = self.inner.changed.wait(s).unwrap();
        }
    }

    /// Stops the service without persisting pending increments, as a process
    /// kill would.
    pub fn simulate_crash(mut self) {
        {
            let mut s = self.inner.lock();
            s.shutdown = true;
            s.discard_pending = true;
            s.pending.clear();
        }
        self.inner.changed.notify_all();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }

    pub fn acknowledged_value(&self, id: CounterId) -> Option<u64> {
        self.inner.lock().acknowledged.get(&id).copied()
    }
}

impl Drop for CounterService {
    fn drop(&mut self) {
        if let Some(w) = self.worker.take() {
            self.inner.lock().shutdown = true;
            self.inner.changed.notify_all();
            let _ = w.join();
        }
    }
}

impl CounterClient for CounterService {
    fn create_counter(&self) -> Result<CounterId, CounterError> {
        let id = CounterId::random();
        {
            let mut wal = self.inner.wal.lock().unwrap();
            wal.append(&wal::encode_record(&id, 1))
                .and_then(|_| wal.sync())
                .map_err(|e| CounterError::Storage(e.to_string()))?;
        }
        let mut s = self.inner.lock();
        s.acknowledged.insert(id, 1);
        s.stable.insert(id, 1);
        Ok(id)
    }

    fn increment_async(&self, id: CounterId) -> Result<CounterToken, CounterError> {
        let value = {
            let mut s = self.inner.lock();
            let slot = s.acknowledged.get_mut(&id).ok_or(CounterError::NotFound(id))?;
            *slot += 1;
            let v = *slot;
            s.pending.push((id, v));
            v
        };
        self.inner.changed.notify_all();
        Ok(CounterToken::sign(&self.inner.key, id, value, false))
    }

    fn read_stable(&self, id: CounterId) -> Result<CounterToken, CounterError> {
        let value = *self.inner.lock().stable.get(&id).ok_or(CounterError::NotFound(id))?;
        Ok(CounterToken::sign(&self.inner.key, id, value, true))
    }

    fn wait_stable(&self, id: CounterId, value: u64, timeout: Duration) -> Result<CounterToken, CounterError> {
        if self.worker.is_none() {
            self.stabilize()?;
        }
        let deadline = Instant::now() + timeout;
        let mut s = self.inner.lock();
        loop {
            let current = *s.stable.get(&id).ok_or(CounterError::NotFound(id))?;
            if current >= value {
                return Ok(CounterToken::sign(&self.inner.key, id, current, true));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(CounterError::Timeout(id));
            }
            s = self.inner.changed.wait_timeout(s, deadline - now).unwrap().0;
        }
    }

    fn verifying_key(&self) -> VerifyingKey {
        self.public_key()
    }
}
