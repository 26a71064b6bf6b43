//! Frame transports: TCP for deployments, in-process channels for tests, and
//! a tapping wrapper that records or rewrites frames on the wire.
//!
//! A frame always carries its own `u32` big-endian length prefix; transports
//! move whole frames including that prefix.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use super::{MSG_FINISH, MSG_HELLO};

pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("peer closed the connection")]
    Closed,
    #[error("read timed out")]
    Timeout,
    #[error("frame of {0} bytes exceeds limit")]
    Oversized(usize),
    #[error("io: {0}")]
    Io(String),
}

pub trait Transport: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError>;
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> Result<(), TransportError>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        (**self).send_frame(frame)
    }
    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        (**self).recv_frame()
    }
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> Result<(), TransportError> {
        (**self).set_read_timeout(timeout)
    }
}

/// `u32 BE length | u8 type | payload`, where length counts type and payload.
pub fn encode_frame(msg_type: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&((payload.len() + 1) as u32).to_be_bytes());
    out.push(msg_type);
    out.extend_from_slice(payload);
    out
}

/// Splits a typed frame into `(type, payload)`, checking the length prefix.
pub fn decode_frame(frame: &[u8]) -> Result<(u8, &[u8]), String> {
    if frame.len() < 5 {
        return Err(format!("frame of {} bytes is too short", frame.len()));
    }
    let declared = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
    if declared != frame.len() - 4 {
        return Err(format!(
            "frame length prefix {declared} does not match {} body bytes",
            frame.len() - 4
        ));
    }
    Ok((frame[4], &frame[5..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Handshake(u8),
    /// Post-handshake record. Its counter field starts at zero, so the byte
    /// after the length prefix is 0 for any realistic session.
    Data,
    Malformed,
}

pub fn frame_kind(frame: &[u8]) -> FrameKind {
    match frame.get(4) {
        Some(&t) if (MSG_HELLO..=MSG_FINISH).contains(&t) => FrameKind::Handshake(t),
        Some(0) if frame.len() >= 12 => FrameKind::Data,
        _ => FrameKind::Malformed,
    }
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        Self { stream }
    }

    pub fn connect(addr: &str) -> Result<Self, TransportError> {
        TcpStream::connect(addr).map(Self::new).map_err(io_err)
    }
}

fn io_err(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout,
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => TransportError::Closed,
        _ => TransportError::Io(e.to_string()),
    }
}

impl Transport for TcpTransport {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(frame).map_err(io_err)?;
        self.stream.flush().map_err(io_err)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        let mut len = [0u8; 4];
        self.stream.read_exact(&mut len).map_err(io_err)?;
        let n = u32::from_be_bytes(len) as usize;
        if n > MAX_FRAME_LEN {
            return Err(TransportError::Oversized(n));
        }
        let mut frame = vec![0u8; 4 + n];
        frame[..4].copy_from_slice(&len);
        self.stream.read_exact(&mut frame[4..]).map_err(io_err)?;
        Ok(frame)
    }

    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> Result<(), TransportError> {
        self.stream.set_read_timeout(timeout).map_err(io_err)
    }
}

/// One end of an in-process, in-order frame pipe.
pub struct MemoryTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Option<Duration>,
}

impl MemoryTransport {
    pub fn pair() -> (Self, Self) {
        let (a_tx, b_rx) = mpsc::channel();
        let (b_tx, a_rx) = mpsc::channel();
        (
            Self {
                tx: a_tx,
                rx: a_rx,
                timeout: None,
            },
            Self {
                tx: b_tx,
                rx: b_rx,
                timeout: None,
            },
        )
    }
}

impl Transport for MemoryTransport {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.tx.send(frame.to_vec()).map_err(|_| TransportError::Closed)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        match self.timeout {
            None => self.rx.recv().map_err(|_| TransportError::Closed),
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout,
                RecvTimeoutError::Disconnected => TransportError::Closed,
            }),
        }
    }

    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> Result<(), TransportError> {
        self.timeout = timeout;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureDirection {
    Sent,
    Received,
}

#[derive(Debug, Clone)]
pub struct CapturedFrame {
    pub direction: CaptureDirection,
    pub bytes: Vec<u8>,
}

/// Shared packet-capture buffer.
#[derive(Debug, Clone, Default)]
pub struct WireCapture(Arc<Mutex<Vec<CapturedFrame>>>);

impl WireCapture {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frames(&self) -> Vec<CapturedFrame> {
        self.0.lock().unwrap().clone()
    }

    /// All captured bytes, concatenated in capture order.
    pub fn bytes(&self) -> Vec<u8> {
        self.0
            .lock()
            .unwrap()
            .iter()
            .flat_map(|f| f.bytes.iter().copied())
            .collect()
    }

    pub fn data_frames(&self) -> usize {
        self.0
            .lock()
            .unwrap()
            .iter()
            .filter(|f| frame_kind(&f.bytes) == FrameKind::Data)
            .count()
    }

    fn push(&self, direction: CaptureDirection, bytes: &[u8]) {
        self.0.lock().unwrap().push(CapturedFrame {
            direction,
            bytes: bytes.to_vec(),
        });
    }
}

type SendHook = Box<dyn FnMut(Vec<u8>) -> Vec<Vec<u8>> + Send>;

/// Wraps a transport, recording every frame into a [`WireCapture`] and
/// optionally rewriting outgoing frames (drop, duplicate, corrupt).
pub struct Tapped<T> {
    inner: T,
    capture: WireCapture,
    on_send: Option<SendHook>,
}

impl<T: Transport> Tapped<T> {
    pub fn new(inner: T, capture: WireCapture) -> Self {
        Self {
            inner,
            capture,
            on_send: None,
        }
    }

    /// Every outgoing frame is passed through `hook`; the frames it returns
    /// are what actually goes on the wire.
    pub fn with_send_hook(mut self, hook: impl FnMut(Vec<u8>) -> Vec<Vec<u8>> + Send + 'static) -> Self {
        self.on_send = Some(Box::new(hook));
        self
    }
}

impl<T: Transport> Transport for Tapped<T> {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        let frames = match self.on_send.as_mut() {
            Some(hook) => hook(frame.to_vec()),
            None => vec![frame.to_vec()],
        };
        for f in frames {
            self.capture.push(CaptureDirection::Sent, &f);
            self.inner.send_frame(&f)?;
        }
        Ok(())
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        let f = self.inner.recv_frame()?;
        self.capture.push(CaptureDirection::Received, &f);
        Ok(f)
    }

    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> Result<(), TransportError> {
        self.inner.set_read_timeout(timeout)
    }
}
