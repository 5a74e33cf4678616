//! Byte-stream port endpoints.
//!
//! Everything above this layer talks to a "serial port" through
//! [`PortEndpoint`]: an ordered, lossless, bidirectional byte stream with
//! bounded-blocking reads. Two backends exist. [`create_linked_pair`] makes
//! an in-process null-modem pair used by the simulator and by every test;
//! [`open_device`] is a thin stub over a character device or FIFO path for
//! real hardware. Endpoints carry no line parameters (baud, parity, flow
//! control): the model is bytes only.

use std::collections::{HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use thiserror::Error;

use crate::clock::Clock;

#[derive(Debug, Error)]
pub enum TransportError {
    /// The device path is missing, unopenable, or already held by another
    /// endpoint.
    #[error("device unavailable: {0}")]
    DeviceUnavailable(String),
    /// The peer endpoint is gone and no buffered bytes remain.
    #[error("endpoint closed")]
    EndpointClosed,
}

/// Outcome of a bounded read. A quiet line is a signal, not an error.
#[derive(Debug, PartialEq, Eq)]
pub enum Received {
    Bytes(Vec<u8>),
    Timeout,
}

/// Identifies one port on one console server.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortId {
    pub server_id: String,
    pub index: u16,
}

impl PortId {
    pub fn new(server_id: impl Into<String>, index: u16) -> Self {
        PortId {
            server_id: server_id.into(),
            index,
        }
    }

    /// Conventional device label for this port, e.g. `ttyS5`.
    pub fn label(&self) -> String {
        format!("ttyS{}", self.index)
    }
}

impl std::fmt::Display for PortId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.server_id, self.index)
    }
}

type InputHook = Arc<dyn Fn(&[u8]) + Send + Sync>;

/// One direction of a linked pair.
struct PipeState {
    queue: VecDeque<u8>,
    closed: bool,
    hook: Option<InputHook>,
}

struct Pipe {
    state: Mutex<PipeState>,
    arrived: Condvar,
}

impl Pipe {
    fn new() -> Arc<Pipe> {
        Arc::new(Pipe {
            state: Mutex::new(PipeState {
                queue: VecDeque::new(),
                closed: false,
                hook: None,
            }),
            arrived: Condvar::new(),
        })
    }

    fn push(&self, bytes: &[u8]) -> Result<(), TransportError> {
        let hook = {
            let mut st = self.state.lock().unwrap();
            if st.closed {
                return Err(TransportError::EndpointClosed);
            }
            match &st.hook {
                // A hooked pipe delivers to its consumer instead of queueing.
                Some(h) => Some(Arc::clone(h)),
                None => {
                    st.queue.extend(bytes);
                    None
                }
            }
        };
        match hook {
            Some(h) => h(bytes),
            None => self.arrived.notify_all(),
        }
        Ok(())
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.arrived.notify_all();
    }
}

enum Backend {
    Pair { rx: Arc<Pipe>, tx: Arc<Pipe> },
    Device(DeviceEndpoint),
}

/// A bidirectional byte-stream handle. Cloning shares the underlying stream;
/// at most one reader and one writer should operate on an endpoint at a time.
#[derive(Clone)]
pub struct PortEndpoint {
    backend: Arc<Backend>,
    clock: Arc<Clock>,
}

impl PortEndpoint {
    /// Write bytes toward the peer. Ordered and lossless.
    pub fn write(&self, bytes: &[u8]) -> Result<(), TransportError> {
        match &*self.backend {
            Backend::Pair { tx, .. } => tx.push(bytes),
            Backend::Device(dev) => dev.write(bytes),
        }
    }

    /// Read whatever is available without waiting; empty when quiet.
    pub fn try_read(&self, max: usize) -> Result<Vec<u8>, TransportError> {
        assert!(max >= 1, "read of zero bytes");
        match &*self.backend {
            Backend::Pair { rx, .. } => {
                let mut st = rx.state.lock().unwrap();
                if st.queue.is_empty() {
                    if st.closed {
                        return Err(TransportError::EndpointClosed);
                    }
                    return Ok(Vec::new());
                }
                let n = max.min(st.queue.len());
                Ok(st.queue.drain(..n).collect())
            }
            Backend::Device(dev) => dev.try_read(max),
        }
    }

    /// Read 1..=max bytes, waiting up to `timeout` for traffic.
    ///
    /// On a manual clock the wait advances the clock through pending timers
    /// up to the deadline, so timeouts in tests consume simulated time, not
    /// wall time. Device endpoints always wait in wall time.
    pub fn read_available(
        &self,
        max: usize,
        timeout: Duration,
    ) -> Result<Received, TransportError> {
        assert!(max >= 1, "read of zero bytes");
        match &*self.backend {
            Backend::Pair { rx, .. } => {
                let deadline = self.clock.now() + timeout;
                loop {
                    {
                        let mut st = rx.state.lock().unwrap();
                        if !st.queue.is_empty() {
                            let n = max.min(st.queue.len());
                            return Ok(Received::Bytes(st.queue.drain(..n).collect()));
                        }
                        if st.closed {
                            return Err(TransportError::EndpointClosed);
                        }
                        if self.clock.now() >= deadline {
                            return Ok(Received::Timeout);
                        }
                        if self.clock.is_realtime() {
                            let remaining = deadline.since(self.clock.now());
                            let slice = remaining.min(Duration::from_millis(5));
                            let _ = rx.arrived.wait_timeout(st, slice).unwrap();
                            continue;
                        }
                    }
                    self.clock.advance_step(deadline);
                }
            }
            Backend::Device(dev) => dev.read_available(max, timeout),
        }
    }

    /// Deliver bytes written by the peer to `hook` instead of the read queue.
    /// Used to wire reactive consumers (relay-chain emulator, simulated
    /// nodes) without a polling thread.
    pub fn set_input_hook(&self, hook: impl Fn(&[u8]) + Send + Sync + 'static) {
        match &*self.backend {
            Backend::Pair { rx, .. } => {
                rx.state.lock().unwrap().hook = Some(Arc::new(hook));
            }
            Backend::Device(_) => panic!("input hooks are only supported on linked pairs"),
        }
    }

    /// Close both directions; the peer drains buffered bytes then sees
    /// `EndpointClosed`.
    pub fn close(&self) {
        match &*self.backend {
            Backend::Pair { rx, tx } => {
                rx.close();
                tx.close();
            }
            Backend::Device(dev) => dev.close(),
        }
    }
}

/// A simulated null-modem cable: each end reads exactly what the other
/// wrote, in order.
pub fn create_linked_pair(clock: &Arc<Clock>) -> (PortEndpoint, PortEndpoint) {
    let a_to_b = Pipe::new();
    let b_to_a = Pipe::new();
    let a = PortEndpoint {
        backend: Arc::new(Backend::Pair {
            rx: Arc::clone(&b_to_a),
            tx: Arc::clone(&a_to_b),
        }),
        clock: Arc::clone(clock),
    };
    let b = PortEndpoint {
        backend: Arc::new(Backend::Pair {
            rx: a_to_b,
            tx: b_to_a,
        }),
        clock: Arc::clone(clock),
    };
    (a, b)
}

fn open_paths() -> &'static Mutex<HashSet<PathBuf>> {
    static PATHS: OnceLock<Mutex<HashSet<PathBuf>>> = OnceLock::new();
    PATHS.get_or_init(|| Mutex::new(HashSet::new()))
}

struct DeviceEndpoint {
    fd: i32,
    path: PathBuf,
    closed: Mutex<bool>,
}

impl DeviceEndpoint {
    fn write(&self, mut bytes: &[u8]) -> Result<(), TransportError> {
        if *self.closed.lock().unwrap() {
            return Err(TransportError::EndpointClosed);
        }
        while !bytes.is_empty() {
            let n = unsafe { libc::write(self.fd, bytes.as_ptr() as *const _, bytes.len()) };
            if n > 0 {
                bytes = &bytes[n as usize..];
            } else {
                let err = std::io::Error::last_os_error();
                match err.kind() {
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::Interrupted => {
                        std::thread::sleep(Duration::from_micros(200));
                    }
                    _ => return Err(TransportError::EndpointClosed),
                }
            }
        }
        Ok(())
    }

    fn try_read(&self, max: usize) -> Result<Vec<u8>, TransportError> {
        if *self.closed.lock().unwrap() {
            return Err(TransportError::EndpointClosed);
        }
        let mut buf = vec![0u8; max];
        let n = unsafe { libc::read(self.fd, buf.as_mut_ptr() as *mut _, max) };
        if n > 0 {
            buf.truncate(n as usize);
            return Ok(buf);
        }
        if n == 0 {
            // EOF: writer side of the device is gone.
            return Err(TransportError::EndpointClosed);
        }
        let err = std::io::Error::last_os_error();
        match err.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::Interrupted => Ok(Vec::new()),
            _ => Err(TransportError::EndpointClosed),
        }
    }

    fn read_available(&self, max: usize, timeout: Duration) -> Result<Received, TransportError> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let got = self.try_read(max)?;
            if !got.is_empty() {
                return Ok(Received::Bytes(got));
            }
            if std::time::Instant::now() >= deadline {
                return Ok(Received::Timeout);
            }
            std::thread::sleep(Duration::from_micros(500));
        }
    }

    fn close(&self) {
        let mut closed = self.closed.lock().unwrap();
        if !*closed {
            *closed = true;
            unsafe { libc::close(self.fd) };
            open_paths().lock().unwrap().remove(&self.path);
        }
    }
}

impl Drop for DeviceEndpoint {
    fn drop(&mut self) {
        self.close();
    }
}

/// Open a character device or FIFO as an endpoint. At most one endpoint per
/// path may be open at a time.
pub fn open_device(path: &str, clock: &Arc<Clock>) -> Result<PortEndpoint, TransportError> {
    let pathbuf = PathBuf::from(path);
    {
        let mut held = open_paths().lock().unwrap();
        if held.contains(&pathbuf) {
            return Err(TransportError::DeviceUnavailable(format!(
                "{path}: already open"
            )));
        }
        held.insert(pathbuf.clone());
    }
    let cpath = match std::ffi::CString::new(path) {
        Ok(c) => c,
        Err(_) => {
            open_paths().lock().unwrap().remove(&pathbuf);
            return Err(TransportError::DeviceUnavailable(format!(
                "{path}: invalid path"
            )));
        }
    };
    let fd = unsafe { libc::open(cpath.as_ptr(), libc::O_RDWR | libc::O_NONBLOCK) };
    if fd < 0 {
        let err = std::io::Error::last_os_error();
        open_paths().lock().unwrap().remove(&pathbuf);
        return Err(TransportError::DeviceUnavailable(format!("{path}: {err}")));
    }
    Ok(PortEndpoint {
        backend: Arc::new(Backend::Device(DeviceEndpoint {
            fd,
            path: pathbuf,
            closed: Mutex::new(false),
        })),
        clock: Arc::clone(clock),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linked_pair_loopback() {
        let clock = Clock::manual();
        let (a, b) = create_linked_pair(&clock);
        a.write(b"abc").unwrap();
        assert_eq!(b.try_read(16).unwrap(), b"abc");
    }

    #[test]
    fn quiet_read_times_out_as_a_signal() {
        let clock = Clock::manual();
        let (_a, b) = create_linked_pair(&clock);
        let before = clock.now();
        let got = b.read_available(8, Duration::from_millis(10)).unwrap();
        assert_eq!(got, Received::Timeout);
        assert_eq!(clock.now().since(before), Duration::from_millis(10));
    }

    #[test]
    fn both_directions_preserve_their_own_order() {
        let clock = Clock::manual();
        let (a, b) = create_linked_pair(&clock);
        a.write(b"one").unwrap();
        b.write(b"ichi").unwrap();
        a.write(b"two").unwrap();
        b.write(b"ni").unwrap();
        assert_eq!(b.try_read(64).unwrap(), b"onetwo");
        assert_eq!(a.try_read(64).unwrap(), b"ichini");
    }

    #[test]
    fn bounded_reads_split_on_max() {
        let clock = Clock::manual();
        let (a, b) = create_linked_pair(&clock);
        a.write(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(
            b.read_available(3, Duration::from_millis(1)).unwrap(),
            Received::Bytes(vec![1, 2, 3])
        );
        assert_eq!(
            b.read_available(3, Duration::from_millis(1)).unwrap(),
            Received::Bytes(vec![4, 5])
        );
    }

    #[test]
    fn closed_peer_surfaces_after_drain() {
        let clock = Clock::manual();
        let (a, b) = create_linked_pair(&clock);
        a.write(b"x").unwrap();
        a.close();
        assert_eq!(b.try_read(4).unwrap(), b"x");
        assert!(matches!(
            b.try_read(4),
            Err(TransportError::EndpointClosed)
        ));
        assert!(matches!(
            b.write(b"y"),
            Err(TransportError::EndpointClosed)
        ));
    }

    #[test]
    fn no_cross_talk_between_pairs() {
        let clock = Clock::manual();
        let (a1, b1) = create_linked_pair(&clock);
        let (a2, b2) = create_linked_pair(&clock);
        a1.write(b"first pair").unwrap();
        a2.write(b"second pair").unwrap();
        assert_eq!(b1.try_read(64).unwrap(), b"first pair");
        assert_eq!(b2.try_read(64).unwrap(), b"second pair");
        assert!(a1.try_read(64).unwrap().is_empty());
        assert!(a2.try_read(64).unwrap().is_empty());
    }

    #[test]
    fn open_device_missing_path() {
        let clock = Clock::manual();
        assert!(matches!(
            open_device("/nonexistent", &clock),
            Err(TransportError::DeviceUnavailable(_))
        ));
    }

    #[test]
    fn open_device_passes_bytes_through_and_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("port0");
        let cpath = std::ffi::CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(unsafe { libc::mkfifo(cpath.as_ptr(), 0o600) }, 0);

        let clock = Clock::manual();
        let ep = open_device(path.to_str().unwrap(), &clock).unwrap();

        // Second open of the same path is refused while the first is held.
        assert!(matches!(
            open_device(path.to_str().unwrap(), &clock),
            Err(TransportError::DeviceUnavailable(_))
        ));

        // A FIFO opened read-write loops writes back to the same path; the
        // peer here is a plain O_RDWR handle on the same FIFO.
        let peer_fd = unsafe { libc::open(cpath.as_ptr(), libc::O_RDWR | libc::O_NONBLOCK) };
        assert!(peer_fd >= 0);
        let wrote = unsafe { libc::write(peer_fd, [0x05u8].as_ptr() as *const _, 1) };
        assert_eq!(wrote, 1);
        match ep.read_available(1, Duration::from_millis(200)).unwrap() {
            Received::Bytes(b) => assert_eq!(b, vec![0x05]),
            Received::Timeout => panic!("expected the probe byte"),
        }
        unsafe { libc::close(peer_fd) };

        // Releasing the endpoint frees the path.
        ep.close();
        let again = open_device(path.to_str().unwrap(), &clock).unwrap();
        again.close();
    }

    #[test]
    fn port_id_label() {
        assert_eq!(PortId::new("consrv01", 5).label(), "ttyS5");
    }
}
