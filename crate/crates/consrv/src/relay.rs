//! Cascaded relay-box control: wire codec, pulse driver, chain emulator.
//!
//! A reset server drives a chain of up to eight 8-relay boxes over one
//! serial line, 64 addressable reset contacts in total. The wire format is
//! a fixed 6-byte frame:
//!
//! ```text
//! 0x02  addr  cmd  dur  cks  0x03
//! ```
//!
//! where `addr = box*8 + relay` (0..=63), `cmd` is `0x50` Pulse / `0x4E` On
//! / `0x46` Off, `dur` is the pulse width in tenths of a second (0 for
//! On/Off), and `cks = addr ^ cmd ^ dur`. A box acknowledges a frame it
//! executed with `[0x06, addr]` and rejects a frame with a bad checksum or
//! command with `[0x15]`. Frames addressed beyond the end of the chain fall
//! off the cascade and produce no reply. This protocol is a stand-in kept
//! behind [`RelayDriver`] so real hardware can replace it.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::clock::{Clock, SimTime};
use crate::transport::{PortEndpoint, Received, TransportError};

pub const STX: u8 = 0x02;
pub const ETX: u8 = 0x03;
pub const ACK: u8 = 0x06;
pub const NAK: u8 = 0x15;
pub const FRAME_LEN: usize = 6;

const CMD_PULSE: u8 = 0x50;
const CMD_ON: u8 = 0x4E;
const CMD_OFF: u8 = 0x46;

/// Default pulse width: one second on the reset contact.
pub const DEFAULT_PULSE: Duration = Duration::from_secs(1);

/// One relay contact in a chain: box 0..=7, relay 0..=7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelayAddress {
    box_index: u8,
    relay: u8,
}

impl RelayAddress {
    pub fn new(box_index: u8, relay: u8) -> Option<RelayAddress> {
        if box_index <= 7 && relay <= 7 {
            Some(RelayAddress { box_index, relay })
        } else {
            None
        }
    }

    pub fn from_flat(flat: u8) -> Option<RelayAddress> {
        if flat <= 63 {
            Some(RelayAddress {
                box_index: flat / 8,
                relay: flat % 8,
            })
        } else {
            None
        }
    }

    pub fn box_index(&self) -> u8 {
        self.box_index
    }

    pub fn relay(&self) -> u8 {
        self.relay
    }

    /// Flat chain address, `box*8 + relay`.
    pub fn flat(&self) -> u8 {
        self.box_index * 8 + self.relay
    }
}

impl std::fmt::Display for RelayAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.box_index, self.relay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelayCommand {
    /// Close the contact for `tenths`/10 seconds; the box times the pulse.
    Pulse { tenths: u8 },
    On,
    Off,
}

impl RelayCommand {
    fn code(&self) -> u8 {
        match self {
            RelayCommand::Pulse { .. } => CMD_PULSE,
            RelayCommand::On => CMD_ON,
            RelayCommand::Off => CMD_OFF,
        }
    }

    fn duration_byte(&self) -> u8 {
        match self {
            RelayCommand::Pulse { tenths } => *tenths,
            RelayCommand::On | RelayCommand::Off => 0,
        }
    }
}

/// One command addressed to one contact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelayFrame {
    pub address: RelayAddress,
    pub command: RelayCommand,
}

impl RelayFrame {
    pub fn pulse(address: RelayAddress, tenths: u8) -> RelayFrame {
        RelayFrame {
            address,
            command: RelayCommand::Pulse { tenths },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad framing (missing STX/ETX or truncated)")]
    BadFraming,
    #[error("checksum mismatch")]
    BadChecksum,
    #[error("unknown or malformed command")]
    BadCommand,
}

/// Encode a frame to its exact 6 wire bytes.
pub fn encode(frame: &RelayFrame) -> [u8; FRAME_LEN] {
    let addr = frame.address.flat();
    let cmd = frame.command.code();
    let dur = frame.command.duration_byte();
    [STX, addr, cmd, dur, addr ^ cmd ^ dur, ETX]
}

/// Decode exactly the first 6 bytes of `raw` as one frame.
pub fn decode(raw: &[u8]) -> Result<RelayFrame, FrameError> {
    if raw.len() < FRAME_LEN || raw[0] != STX || raw[5] != ETX {
        return Err(FrameError::BadFraming);
    }
    decode_body([raw[0], raw[1], raw[2], raw[3], raw[4], raw[5]])
}

fn decode_body(b: [u8; FRAME_LEN]) -> Result<RelayFrame, FrameError> {
    let (addr, cmd, dur, cks) = (b[1], b[2], b[3], b[4]);
    if addr ^ cmd ^ dur != cks {
        return Err(FrameError::BadChecksum);
    }
    let address = RelayAddress::from_flat(addr).ok_or(FrameError::BadCommand)?;
    let command = match cmd {
        CMD_PULSE => RelayCommand::Pulse { tenths: dur },
        CMD_ON if dur == 0 => RelayCommand::On,
        CMD_OFF if dur == 0 => RelayCommand::Off,
        _ => return Err(FrameError::BadCommand),
    };
    Ok(RelayFrame { address, command })
}

/// What the scanner extracted from a byte stream.
#[derive(Debug, PartialEq, Eq)]
pub enum ScanItem {
    Frame(RelayFrame),
    /// A fully framed candidate (STX..ETX) that failed its checksum or
    /// carried a bad command. A box answers these with NAK.
    Rejected(FrameError),
}

/// Incremental frame extractor. Buffers partial frames across pushes and
/// resynchronizes one byte at a time on framing noise, so garbage between
/// valid frames never prevents recognition of the next valid frame.
#[derive(Default)]
pub struct FrameScanner {
    buf: VecDeque<u8>,
}

impl FrameScanner {
    pub fn new() -> FrameScanner {
        FrameScanner::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<ScanItem> {
        self.buf.extend(bytes);
        let mut out = Vec::new();
        loop {
            while matches!(self.buf.front(), Some(b) if *b != STX) {
                self.buf.pop_front();
            }
            if self.buf.len() < FRAME_LEN {
                break;
            }
            let mut candidate = [0u8; FRAME_LEN];
            for (i, b) in self.buf.iter().take(FRAME_LEN).enumerate() {
                candidate[i] = *b;
            }
            if candidate[5] != ETX {
                // A stray STX, not a frame start; slide past it.
                self.buf.pop_front();
                continue;
            }
            self.buf.drain(..FRAME_LEN);
            match decode_body(candidate) {
                Ok(frame) => out.push(ScanItem::Frame(frame)),
                Err(e) => out.push(ScanItem::Rejected(e)),
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum PulseError {
    /// The box saw the frame but rejected it (checksum failure at the box).
    #[error("relay box NAK")]
    Nak,
    /// No acknowledgment within the timeout, after a retry. Dead or absent
    /// box, or an unplugged chain.
    #[error("relay ack timeout")]
    AckTimeout,
    #[error("pulse duration out of range (0, 25.5]s")]
    InvalidDuration,
    #[error("chain transport: {0}")]
    Transport(#[from] TransportError),
}

/// Serializes commands onto one chain endpoint and waits for per-box acks.
pub struct RelayDriver {
    line: Mutex<PortEndpoint>,
    clock: Arc<Clock>,
    ack_timeout: Duration,
    retries: u32,
}

impl RelayDriver {
    pub fn new(endpoint: PortEndpoint, clock: Arc<Clock>) -> RelayDriver {
        RelayDriver {
            line: Mutex::new(endpoint),
            clock,
            ack_timeout: Duration::from_secs(2),
            retries: 1,
        }
    }

    /// Close the addressed contact for `duration` (rounded to tenths of a
    /// second). Returns once the box acknowledges the command; the box
    /// itself times the pulse.
    pub fn pulse(&self, address: RelayAddress, duration: Duration) -> Result<(), PulseError> {
        let ms = duration.as_millis();
        if ms == 0 || ms > 25_500 {
            return Err(PulseError::InvalidDuration);
        }
        let tenths = ((ms + 50) / 100).clamp(1, 255) as u8;
        self.send(&RelayFrame::pulse(address, tenths))
    }

    fn send(&self, frame: &RelayFrame) -> Result<(), PulseError> {
        let line = self.line.lock().unwrap();
        // Drop stale reply bytes from any earlier exchange.
        while !line.try_read(64)?.is_empty() {}
        let wire = encode(frame);
        let want = frame.address.flat();
        for _attempt in 0..=self.retries {
            line.write(&wire)?;
            let deadline = self.clock.now() + self.ack_timeout;
            let mut reply: Vec<u8> = Vec::new();
            loop {
                if reply.contains(&NAK) {
                    return Err(PulseError::Nak);
                }
                if reply.windows(2).any(|w| w == [ACK, want]) {
                    return Ok(());
                }
                let now = self.clock.now();
                if now >= deadline {
                    break;
                }
                match line.read_available(8, deadline.since(now))? {
                    Received::Bytes(b) => reply.extend(b),
                    Received::Timeout => break,
                }
            }
        }
        Err(PulseError::AckTimeout)
    }
}

/// A recorded contact closure on the emulated chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactEvent {
    pub address: RelayAddress,
    pub closed_at: SimTime,
    pub opened_at: Option<SimTime>,
}

type RelaySink = Box<dyn Fn(RelayAddress, Duration) + Send>;

struct EmulatorState {
    boxes: u8,
    contacts: [bool; 64],
    epoch: [u64; 64],
    sinks: Vec<Option<RelaySink>>,
    scanner: FrameScanner,
    events: Vec<ContactEvent>,
}

/// Emulates a full relay chain: executes frames, times pulses on the shared
/// clock, and drives per-relay sinks wired to simulated reset lines.
/// Box positions are fixed at construction, like DIP-switched cascade
/// addresses.
pub struct ChainEmulator {
    state: Arc<Mutex<EmulatorState>>,
    clock: Arc<Clock>,
}

impl ChainEmulator {
    pub fn new(clock: Arc<Clock>, boxes: u8) -> ChainEmulator {
        assert!((1..=8).contains(&boxes), "a chain holds 1..=8 boxes");
        ChainEmulator {
            state: Arc::new(Mutex::new(EmulatorState {
                boxes,
                contacts: [false; 64],
                epoch: [0; 64],
                sinks: (0..64).map(|_| None).collect(),
                scanner: FrameScanner::new(),
                events: Vec::new(),
            })),
            clock,
        }
    }

    /// Wire a callback to one relay's contact; invoked on each pulse with
    /// the pulse width.
    pub fn set_sink(&self, address: RelayAddress, sink: impl Fn(RelayAddress, Duration) + Send + 'static) {
        self.state.lock().unwrap().sinks[address.flat() as usize] = Some(Box::new(sink));
    }

    /// Process raw chain bytes; returns the reply bytes the chain emits.
    /// Partial frames are buffered across calls.
    pub fn feed(&self, raw: &[u8]) -> Vec<u8> {
        let items = self.state.lock().unwrap().scanner.push(raw);
        let mut reply = Vec::new();
        for item in items {
            match item {
                ScanItem::Frame(frame) => {
                    if frame.address.box_index() >= self.state.lock().unwrap().boxes {
                        // Fell off the end of the cascade: no box, no reply.
                        continue;
                    }
                    self.execute(&frame);
                    reply.extend([ACK, frame.address.flat()]);
                }
                ScanItem::Rejected(_) => reply.push(NAK),
            }
        }
        reply
    }

    /// Attach this emulator to the chain's far endpoint: every write from
    /// the driver side is executed and replies flow back automatically.
    pub fn attach(&self, endpoint: PortEndpoint) {
        let state = Arc::clone(&self.state);
        let clock = Arc::clone(&self.clock);
        let writer = endpoint.clone();
        endpoint.set_input_hook(move |bytes| {
            let em = ChainEmulator {
                state: Arc::clone(&state),
                clock: Arc::clone(&clock),
            };
            let reply = em.feed(bytes);
            if !reply.is_empty() {
                let _ = writer.write(&reply);
            }
        });
    }

    fn execute(&self, frame: &RelayFrame) {
        let flat = frame.address.flat() as usize;
        let mut fire: Option<(RelayAddress, Duration)> = None;
        {
            let mut st = self.state.lock().unwrap();
            st.epoch[flat] += 1;
            match frame.command {
                RelayCommand::Pulse { tenths } => {
                    let width = Duration::from_millis(tenths as u64 * 100);
                    st.contacts[flat] = true;
                    st.events.push(ContactEvent {
                        address: frame.address,
                        closed_at: self.clock.now(),
                        opened_at: None,
                    });
                    let idx = st.events.len() - 1;
                    let my_epoch = st.epoch[flat];
                    let state = Arc::clone(&self.state);
                    let clock = Arc::clone(&self.clock);
                    self.clock.schedule_in(width, move || {
                        let mut st = state.lock().unwrap();
                        if st.epoch[flat] == my_epoch {
                            st.contacts[flat] = false;
                            st.events[idx].opened_at = Some(clock.now());
                        }
                    });
                    fire = Some((frame.address, width));
                }
                RelayCommand::On => st.contacts[flat] = true,
                RelayCommand::Off => st.contacts[flat] = false,
            }
        }
        if let Some((addr, width)) = fire {
            let sink = {
                let mut st = self.state.lock().unwrap();
                st.sinks[flat].take()
            };
            if let Some(sink) = sink {
                sink(addr, width);
                self.state.lock().unwrap().sinks[flat] = Some(sink);
            }
        }
    }

    pub fn contact_closed(&self, address: RelayAddress) -> bool {
        self.state.lock().unwrap().contacts[address.flat() as usize]
    }

    /// All pulse closures recorded so far, in execution order.
    pub fn contact_events(&self) -> Vec<ContactEvent> {
        self.state.lock().unwrap().events.clone()
    }

    pub fn pulse_count(&self) -> usize {
        self.state.lock().unwrap().events.len()
    }
}
