//! Console sessions: a principal's attachment to one port.
//!
//! At most one ReadWrite session holds a port at a time; any number of
//! readers fan out from the same stream. A new session replays the port's
//! ring buffer, then receives live bytes spliced without loss or
//! duplication. Writers detach cleanly with `~.` at the start of a line.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::Duration;

use thiserror::Error;

use crate::clock::Clock;
use crate::transport::{PortEndpoint, Received};

/// Bytes a slow reader may queue before it is marked lagged and starts
/// dropping.
pub const SESSION_QUEUE_CAP: usize = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionMode {
    ReadWrite,
    ReadOnly,
}

impl SessionMode {
    pub fn name(&self) -> &'static str {
        match self {
            SessionMode::ReadWrite => "rw",
            SessionMode::ReadOnly => "ro",
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session is read-only")]
    ReadOnly,
    #[error("session closed")]
    Closed,
    #[error("port transport: {0}")]
    Transport(#[from] crate::transport::TransportError),
}

#[derive(Debug, PartialEq, Eq)]
pub enum WriteOutcome {
    Forwarded,
    /// The escape sequence ended the session; remaining input was dropped.
    Detached,
}

struct OutBuf {
    buf: VecDeque<u8>,
    closed: bool,
    lagged: bool,
}

/// Daemon-side state of one session; the pump pushes output bytes here.
pub(crate) struct SessionShared {
    pub id: u64,
    pub principal: String,
    pub host: String,
    pub mode: SessionMode,
    pub port_index: u16,
    out: Mutex<OutBuf>,
    arrived: Condvar,
}

impl SessionShared {
    pub(crate) fn new(
        id: u64,
        principal: &str,
        host: &str,
        mode: SessionMode,
        port_index: u16,
    ) -> Arc<SessionShared> {
        Arc::new(SessionShared {
            id,
            principal: principal.to_string(),
            host: host.to_string(),
            mode,
            port_index,
            out: Mutex::new(OutBuf {
                buf: VecDeque::new(),
                closed: false,
                lagged: false,
            }),
            arrived: Condvar::new(),
        })
    }

    /// Fan-out path. A full queue marks the session lagged and drops the
    /// bytes rather than stalling the port pump.
    pub(crate) fn push_bytes(&self, bytes: &[u8]) {
        let mut out = self.out.lock().unwrap();
        if out.closed {
            return;
        }
        if out.buf.len() + bytes.len() > SESSION_QUEUE_CAP {
            out.lagged = true;
            return;
        }
        out.buf.extend(bytes);
        drop(out);
        self.arrived.notify_all();
    }

    pub(crate) fn close(&self) {
        self.out.lock().unwrap().closed = true;
        self.arrived.notify_all();
    }

    pub(crate) fn is_closed(&self) -> bool {
        self.out.lock().unwrap().closed
    }

    pub(crate) fn take_buffered(&self) -> Vec<u8> {
        let mut out = self.out.lock().unwrap();
        let n = out.buf.len();
        out.buf.drain(..n).collect()
    }
}

/// Tracks `~.` at line start; a lone `~` is held until the next byte.
struct EscapeFilter {
    at_line_start: bool,
    pending_tilde: bool,
}

impl EscapeFilter {
    fn new() -> EscapeFilter {
        EscapeFilter {
            at_line_start: true,
            pending_tilde: false,
        }
    }

    fn filter(&mut self, input: &[u8]) -> (Vec<u8>, bool) {
        let mut out = Vec::with_capacity(input.len());
        for &b in input {
            if self.pending_tilde {
                self.pending_tilde = false;
                if b == b'.' {
                    return (out, true);
                }
                out.push(b'~');
                out.push(b);
                self.at_line_start = b == b'\r' || b == b'\n';
            } else if self.at_line_start && b == b'~' {
                self.pending_tilde = true;
            } else {
                out.push(b);
                self.at_line_start = b == b'\r' || b == b'\n';
            }
        }
        (out, false)
    }
}

/// Client handle for an attached session.
pub struct ConsoleSession {
    shared: Arc<SessionShared>,
    port: PortEndpoint,
    clock: Arc<Clock>,
    server: Weak<super::ServerInner>,
    escape: Mutex<EscapeFilter>,
}

impl ConsoleSession {
    pub(crate) fn new(
        shared: Arc<SessionShared>,
        port: PortEndpoint,
        clock: Arc<Clock>,
        server: Weak<super::ServerInner>,
    ) -> ConsoleSession {
        ConsoleSession {
            shared,
            port,
            clock,
            server,
            escape: Mutex::new(EscapeFilter::new()),
        }
    }

    pub fn id(&self) -> u64 {
        self.shared.id
    }

    pub fn host(&self) -> &str {
        &self.shared.host
    }

    pub fn mode(&self) -> SessionMode {
        self.shared.mode
    }

    /// Whether fan-out has dropped bytes for this (slow) session.
    pub fn lagged(&self) -> bool {
        self.shared.out.lock().unwrap().lagged
    }

    /// Output already queued, without waiting.
    pub fn try_read_output(&self, max: usize) -> Result<Vec<u8>, SessionError> {
        let mut out = self.shared.out.lock().unwrap();
        if out.buf.is_empty() {
            if out.closed {
                return Err(SessionError::Closed);
            }
            return Ok(Vec::new());
        }
        let n = max.min(out.buf.len());
        Ok(out.buf.drain(..n).collect())
    }

    /// Bounded-blocking read of session output; timeouts follow the shared
    /// clock, like port reads.
    pub fn read_output(&self, max: usize, timeout: Duration) -> Result<Received, SessionError> {
        let deadline = self.clock.now() + timeout;
        loop {
            {
                let mut out = self.shared.out.lock().unwrap();
                if !out.buf.is_empty() {
                    let n = max.min(out.buf.len());
                    return Ok(Received::Bytes(out.buf.drain(..n).collect()));
                }
                if out.closed {
                    return Err(SessionError::Closed);
                }
                if self.clock.now() >= deadline {
                    return Ok(Received::Timeout);
                }
                if self.clock.is_realtime() {
                    let _ = self
                        .shared
                        .arrived
                        .wait_timeout(out, Duration::from_millis(5))
                        .unwrap();
                    continue;
                }
            }
            self.clock.advance_step(deadline);
        }
    }

    /// Keystroke path: forwards verbatim to the port, except the `~.`
    /// escape which detaches.
    pub fn write_input(&self, bytes: &[u8]) -> Result<WriteOutcome, SessionError> {
        if self.shared.mode != SessionMode::ReadWrite {
            return Err(SessionError::ReadOnly);
        }
        if self.shared.is_closed() {
            return Err(SessionError::Closed);
        }
        let (forward, detach) = self.escape.lock().unwrap().filter(bytes);
        if !forward.is_empty() {
            self.port.write(&forward)?;
        }
        if detach {
            self.detach();
            return Ok(WriteOutcome::Detached);
        }
        Ok(WriteOutcome::Forwarded)
    }

    /// Clean detach; the port stays logged and other sessions continue.
    pub fn detach(&self) {
        if let Some(server) = self.server.upgrade() {
            server.detach_session(self.shared.port_index, self.shared.id);
        }
        self.shared.close();
    }
}

impl Drop for ConsoleSession {
    fn drop(&mut self) {
        self.detach();
    }
}
