//! Per-port pipeline: drain the endpoint, feed the replay ring, assemble
//! log chunks, fan out to sessions, and track answerback probes.
//!
//! Each port is an independent serialized pipeline; the daemon pumps all of
//! them on a clock timer. Downstream consumers never block the pump:
//! lagging sessions are marked and skipped, and log lines are returned to
//! the daemon for sinking outside the port lock.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use crate::clock::SimTime;
use crate::transport::PortEndpoint;

use super::session::SessionShared;

pub const RING_CAPACITY: usize = 8192;
pub const FLUSH_BYTES: usize = 512;
pub const FLUSH_IDLE: Duration = Duration::from_secs(1);
pub const ENQ: u8 = 0x05;

/// Last-N-bytes replay buffer with monotone offsets.
pub struct ByteRing {
    buf: VecDeque<u8>,
    cap: usize,
    base: u64,
}

impl ByteRing {
    pub fn new(cap: usize) -> ByteRing {
        ByteRing {
            buf: VecDeque::new(),
            cap,
            base: 0,
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend(bytes);
        while self.buf.len() > self.cap {
            self.buf.pop_front();
            self.base += 1;
        }
    }

    /// (offset of first byte, replay bytes).
    pub fn snapshot(&self) -> (u64, Vec<u8>) {
        (self.base, self.buf.iter().copied().collect())
    }

    /// Offset just past the newest byte.
    pub fn end_offset(&self) -> u64 {
        self.base + self.buf.len() as u64
    }
}

/// Accumulates raw bytes into log chunks: flush on LF, on `flush_bytes`
/// accumulation, or on idle (checked by the pump).
pub struct LineAssembler {
    pending: Vec<u8>,
    last_rx: Option<SimTime>,
    flush_bytes: usize,
}

impl LineAssembler {
    pub fn new(flush_bytes: usize) -> LineAssembler {
        LineAssembler {
            pending: Vec::new(),
            last_rx: None,
            flush_bytes,
        }
    }

    pub fn feed(&mut self, bytes: &[u8], now: SimTime) -> Vec<Vec<u8>> {
        let mut chunks = Vec::new();
        for &b in bytes {
            self.pending.push(b);
            if b == b'\n' || self.pending.len() >= self.flush_bytes {
                chunks.push(std::mem::take(&mut self.pending));
            }
        }
        self.last_rx = Some(now);
        chunks
    }

    pub fn idle_flush(&mut self, now: SimTime, idle: Duration) -> Option<Vec<u8>> {
        if self.pending.is_empty() {
            return None;
        }
        match self.last_rx {
            Some(last) if now.since(last) >= idle => Some(std::mem::take(&mut self.pending)),
            _ => None,
        }
    }

    pub fn force_flush(&mut self) -> Option<Vec<u8>> {
        if self.pending.is_empty() {
            None
        } else {
            Some(std::mem::take(&mut self.pending))
        }
    }
}

/// Streaming matcher for `\x06ID:<hostname>\r\n`. Bytes of a potential
/// answerback are held back from the visible stream until the candidate
/// completes or fails; failed candidates are released byte-exactly.
pub struct AnswerbackMatcher {
    held: Vec<u8>,
}

const MAX_ANSWERBACK_HOST: usize = 255;

enum MatchState {
    Partial,
    Complete(String),
    Fail,
}

impl AnswerbackMatcher {
    pub fn new() -> AnswerbackMatcher {
        AnswerbackMatcher { held: Vec::new() }
    }

    fn check(held: &[u8]) -> MatchState {
        const PREFIX: &[u8] = &[0x06, b'I', b'D', b':'];
        for (i, &b) in held.iter().enumerate() {
            if i < PREFIX.len() {
                if b != PREFIX[i] {
                    return MatchState::Fail;
                }
                continue;
            }
            // Hostname bytes run until CR; LF or an oversized name fails.
            let name_len = i - PREFIX.len();
            if b == b'\r' {
                let name = &held[PREFIX.len()..i];
                match held.get(i + 1) {
                    Some(b'\n') => {
                        return MatchState::Complete(
                            String::from_utf8_lossy(name).into_owned(),
                        )
                    }
                    Some(_) => return MatchState::Fail,
                    None => return MatchState::Partial,
                }
            }
            if b == b'\n' || name_len >= MAX_ANSWERBACK_HOST {
                return MatchState::Fail;
            }
        }
        MatchState::Partial
    }

    /// Split `input` into visible bytes and captured answerback hostnames.
    pub fn process(&mut self, input: &[u8]) -> (Vec<u8>, Vec<String>) {
        let mut visible = Vec::with_capacity(input.len());
        let mut captured = Vec::new();
        let mut queue: VecDeque<u8> = input.iter().copied().collect();
        while let Some(b) = queue.pop_front() {
            if self.held.is_empty() {
                if b == 0x06 {
                    self.held.push(b);
                } else {
                    visible.push(b);
                }
                continue;
            }
            self.held.push(b);
            match Self::check(&self.held) {
                MatchState::Partial => {}
                MatchState::Complete(host) => {
                    // Consume the trailing LF of the answerback.
                    captured.push(host);
                    self.held.clear();
                }
                MatchState::Fail => {
                    // Release the first held byte, rescan the rest: the
                    // prefix has no second 0x06, so this never misses an
                    // answerback that starts inside a failed candidate.
                    let released = std::mem::take(&mut self.held);
                    visible.push(released[0]);
                    for &r in released[1..].iter().rev() {
                        queue.push_front(r);
                    }
                }
            }
        }
        (visible, captured)
    }

    /// Give back anything still held (probe over, candidate unfinished).
    pub fn drain(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.held)
    }

    pub fn holding(&self) -> bool {
        !self.held.is_empty()
    }
}

/// Who asked for the current probe round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeWaiter {
    Detection,
    Watchdog,
}

pub struct ProbeRound {
    attempts_left: u32,
    deadline: SimTime,
    timeout: Duration,
    waiters: Vec<ProbeWaiter>,
}

/// Everything the daemon needs to act on after one pump pass.
#[derive(Default)]
pub struct PumpOutcome {
    /// Flushed log chunks in stream order.
    pub chunks: Vec<Vec<u8>>,
    /// A probe round concluded: detected hostname (or None) plus waiters.
    pub probe_done: Option<(Option<String>, Vec<ProbeWaiter>)>,
    /// Raw bytes drained this pass.
    pub bytes: usize,
}

pub struct PortPipeline {
    pub index: u16,
    pub label: String,
    pub host: String,
    endpoint: PortEndpoint,
    ring: ByteRing,
    assembler: LineAssembler,
    matcher: AnswerbackMatcher,
    sessions: Vec<Arc<SessionShared>>,
    writer: Option<(u64, String)>,
    probe: Option<ProbeRound>,
    flush_idle: Duration,
}

impl PortPipeline {
    pub fn new(
        index: u16,
        host: String,
        endpoint: PortEndpoint,
        ring_capacity: usize,
        flush_bytes: usize,
        flush_idle: Duration,
    ) -> PortPipeline {
        PortPipeline {
            index,
            label: format!("ttyS{index}"),
            host,
            endpoint,
            ring: ByteRing::new(ring_capacity),
            assembler: LineAssembler::new(flush_bytes),
            matcher: AnswerbackMatcher::new(),
            sessions: Vec::new(),
            writer: None,
            probe: None,
            flush_idle,
        }
    }

    pub fn endpoint(&self) -> &PortEndpoint {
        &self.endpoint
    }

    /// One pump pass: drain, filter probes, ring, fan out, assemble.
    pub fn pump(&mut self, now: SimTime) -> PumpOutcome {
        let mut out = PumpOutcome::default();
        let mut data = Vec::new();
        loop {
            match self.endpoint.try_read(4096) {
                Ok(chunk) if chunk.is_empty() => break,
                Ok(chunk) => data.extend(chunk),
                // A gone peer quiets the port; logging of earlier bytes
                // still completes.
                Err(_) => break,
            }
            if data.len() >= 1 << 20 {
                break;
            }
        }
        out.bytes = data.len();

        if !data.is_empty() {
            // The ring and the log carry the true stream, answerback
            // included; session fan-out sees probe bytes filtered out.
            self.ring.push(&data);
            out.chunks = self.assembler.feed(&data, now);
            let visible = if self.probe.is_some() {
                let (visible, captured) = self.matcher.process(&data);
                if let Some(host) = captured.into_iter().next() {
                    let round = self.probe.take().unwrap();
                    out.probe_done = Some((Some(host), round.waiters));
                }
                visible
            } else {
                data
            };
            if !visible.is_empty() {
                self.fan_out(&visible);
            }
        } else if let Some(chunk) = self.assembler.idle_flush(now, self.flush_idle) {
            out.chunks.push(chunk);
        }

        // Probe retry/expiry.
        if out.probe_done.is_none() {
            if let Some(round) = &mut self.probe {
                if now >= round.deadline {
                    if round.attempts_left > 1 {
                        round.attempts_left -= 1;
                        round.deadline = now + round.timeout;
                        let _ = self.endpoint.write(&[ENQ]);
                    } else {
                        let round = self.probe.take().unwrap();
                        // Release a half-matched candidate to the readers.
                        let leftover = self.matcher.drain();
                        if !leftover.is_empty() {
                            self.fan_out(&leftover);
                        }
                        out.probe_done = Some((None, round.waiters));
                    }
                }
            }
        }
        out
    }

    fn fan_out(&mut self, bytes: &[u8]) {
        self.sessions.retain(|s| !s.is_closed());
        for session in &self.sessions {
            session.push_bytes(bytes);
        }
    }

    /// Attach a session: ring replay then live bytes, spliced under the
    /// port lock so the seam neither drops nor duplicates.
    pub fn attach_session(&mut self, session: &Arc<SessionShared>) {
        let (_, replay) = self.ring.snapshot();
        if !replay.is_empty() {
            session.push_bytes(&replay);
        }
        self.sessions.push(Arc::clone(session));
    }

    pub fn writer(&self) -> Option<&(u64, String)> {
        self.writer.as_ref()
    }

    pub fn set_writer(&mut self, id: u64, principal: &str) {
        self.writer = Some((id, principal.to_string()));
    }

    pub fn remove_session(&mut self, id: u64) {
        self.sessions.retain(|s| s.id != id);
        if self.writer.as_ref().is_some_and(|(wid, _)| *wid == id) {
            self.writer = None;
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Start (or join) an answerback probe round.
    pub fn arm_probe(
        &mut self,
        now: SimTime,
        attempts: u32,
        timeout: Duration,
        waiter: ProbeWaiter,
    ) {
        match &mut self.probe {
            Some(round) => round.waiters.push(waiter),
            None => {
                let _ = self.endpoint.write(&[ENQ]);
                self.probe = Some(ProbeRound {
                    attempts_left: attempts.max(1),
                    deadline: now + timeout,
                    timeout,
                    waiters: vec![waiter],
                });
            }
        }
    }

    pub fn probing(&self) -> bool {
        self.probe.is_some()
    }

    /// Flush any pending partial line (shutdown path).
    pub fn final_flush(&mut self) -> Option<Vec<u8>> {
        self.assembler.force_flush()
    }

    pub fn ring_end(&self) -> u64 {
        self.ring.end_offset()
    }
}
