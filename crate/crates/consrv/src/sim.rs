//! Deterministic simulated farm.
//!
//! [`spawn_farm`] builds worker nodes from a topology, wires each node's
//! console to a linked port pair (server side handed to the daemon under
//! test) and each node's reset line to a relay-chain emulator sink. Nodes
//! run scripted boot transcripts on the shared clock, answer ENQ with
//! `\x06ID:<hostname>\r\n` when up, echo input, optionally emit heartbeats,
//! and can be hung or paniced by the harness. With a manual clock the whole
//! farm's output is a pure function of (topology, seed, injected events).
//!
//! Topology file grammar, one node per line:
//!
//! ```text
//! node <hostname> console <port-index> [reset <box> <relay>] [heartbeat <seconds>] [transcript <file>]
//! ```
//!
//! Transcript files hold `<delay-ms> <text>` lines; each line is emitted
//! `delay-ms` after the previous one, terminated with CRLF.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::relay::{ChainEmulator, RelayAddress};
use crate::transport::{create_linked_pair, PortEndpoint};

/// Silent gap between a reset/power-on and the first boot-loader line;
/// models firmware that cannot talk to the serial line yet.
pub const PRE_CONSOLE_DELAY: Duration = Duration::from_secs(2);

pub const ENQ: u8 = 0x05;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("topology line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate console port {0}")]
    DuplicatePort(u16),
    #[error("duplicate relay address {0}")]
    DuplicateRelay(RelayAddress),
    #[error("duplicate hostname {0}")]
    DuplicateHost(String),
    #[error("transcript {path}: {source}")]
    TranscriptIo {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptLine {
    /// Gap after the previous line (or after the pre-console delay).
    pub delay: Duration,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub hostname: String,
    pub console_port: u16,
    pub reset: Option<RelayAddress>,
    pub heartbeat: Option<Duration>,
    pub transcript: Vec<TranscriptLine>,
}

#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
}

/// A boot transcript in the spirit of a small Linux box: boot loader first.
pub fn default_transcript() -> Vec<TranscriptLine> {
    let line = |ms: u64, text: &str| TranscriptLine {
        delay: Duration::from_millis(ms),
        text: text.to_string(),
    };
    vec![
        line(0, "GRUB loading stage2"),
        line(300, "Booting 'linux-sim'"),
        line(500, "Linux version 2.4.21-sim (gcc 2.96)"),
        line(700, "Calibrating delay loop... ok"),
        line(600, "INIT: version 2.84 booting"),
        line(900, "Starting network: eth0 up"),
        line(1000, "login:"),
    ]
}

impl Topology {
    /// Parse the topology grammar. Transcript paths resolve relative to
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Topology, TopologyError> {
        let mut nodes = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("");
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |reason: String| TopologyError::Parse { line, reason };
            if fields[0] != "node" {
                return Err(err(format!("unknown record `{}`", fields[0])));
            }
            if fields.len() < 4 || fields[2] != "console" {
                return Err(err(
                    "expected: node <hostname> console <port-index> [reset <box> <relay>] \
                     [heartbeat <seconds>] [transcript <file>]"
                        .into(),
                ));
            }
            let hostname = fields[1].to_string();
            let console_port: u16 = fields[3]
                .parse()
                .map_err(|_| err(format!("bad port index `{}`", fields[3])))?;
            let mut spec = NodeSpec {
                hostname,
                console_port,
                reset: None,
                heartbeat: None,
                transcript: default_transcript(),
            };
            let mut rest = fields[4..].iter();
            while let Some(key) = rest.next() {
                match *key {
                    "reset" => {
                        let b: u8 = rest
                            .next()
                            .ok_or_else(|| err("reset needs <box> <relay>".into()))?
                            .parse()
                            .map_err(|_| err("bad box".into()))?;
                        let r: u8 = rest
                            .next()
                            .ok_or_else(|| err("reset needs <box> <relay>".into()))?
                            .parse()
                            .map_err(|_| err("bad relay".into()))?;
                        spec.reset = Some(
                            RelayAddress::new(b, r)
                                .ok_or_else(|| err(format!("relay address {b}/{r} out of range")))?,
                        );
                    }
                    "heartbeat" => {
                        let secs: u64 = rest
                            .next()
                            .ok_or_else(|| err("heartbeat needs <seconds>".into()))?
                            .parse()
                            .map_err(|_| err("bad heartbeat seconds".into()))?;
                        if secs == 0 {
                            return Err(err("heartbeat must be positive".into()));
                        }
                        spec.heartbeat = Some(Duration::from_secs(secs));
                    }
                    "transcript" => {
                        let file = rest
                            .next()
                            .ok_or_else(|| err("transcript needs <file>".into()))?;
                        let path = match base_dir {
                            Some(d) => d.join(file),
                            None => Path::new(file).to_path_buf(),
                        };
                        let body = std::fs::read_to_string(&path).map_err(|source| {
                            TopologyError::TranscriptIo {
                                path: path.display().to_string(),
                                source,
                            }
                        })?;
                        spec.transcript = parse_transcript(&body, line)?;
                    }
                    other => return Err(err(format!("unknown option `{other}`"))),
                }
            }
            nodes.push(spec);
        }
        let topo = Topology { nodes };
        topo.validate()?;
        Ok(topo)
    }

    /// A uniform farm: `n` nodes named `<prefix><i>`, console port `i`, a
    /// reset contact for the first 64, heartbeat every 30 s.
    pub fn farm(prefix: &str, n: usize) -> Topology {
        let nodes = (0..n)
            .map(|i| NodeSpec {
                hostname: format!("{prefix}{i:02}"),
                console_port: i as u16,
                reset: if i < 64 {
                    RelayAddress::from_flat(i as u8)
                } else {
                    None
                },
                heartbeat: Some(Duration::from_secs(30)),
                transcript: default_transcript(),
            })
            .collect();
        Topology { nodes }
    }

    pub fn render(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for n in &self.nodes {
            write!(out, "node {} console {}", n.hostname, n.console_port).unwrap();
            if let Some(addr) = &n.reset {
                write!(out, " reset {} {}", addr.box_index(), addr.relay()).unwrap();
            }
            if let Some(hb) = &n.heartbeat {
                write!(out, " heartbeat {}", hb.as_secs()).unwrap();
            }
            out.push('\n');
        }
        out
    }

    fn validate(&self) -> Result<(), TopologyError> {
        let mut ports = std::collections::BTreeSet::new();
        let mut relays = std::collections::BTreeSet::new();
        let mut hosts = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if !hosts.insert(n.hostname.clone()) {
                return Err(TopologyError::DuplicateHost(n.hostname.clone()));
            }
            if !ports.insert(n.console_port) {
                return Err(TopologyError::DuplicatePort(n.console_port));
            }
            if let Some(addr) = n.reset {
                if !relays.insert(addr.flat()) {
                    return Err(TopologyError::DuplicateRelay(addr));
                }
            }
        }
        Ok(())
    }

    /// Interconnection file body matching this topology, for registry
    /// fixtures.
    pub fn registry_interconnections(
        &self,
        console_server: &str,
        reset_server: &str,
        device: &str,
    ) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for n in &self.nodes {
            writeln!(
                out,
                "console {} {console_server} {}",
                n.hostname, n.console_port
            )
            .unwrap();
        }
        for n in &self.nodes {
            if let Some(addr) = &n.reset {
                writeln!(
                    out,
                    "reset {} {reset_server} {device} {} {}",
                    n.hostname,
                    addr.box_index(),
                    addr.relay()
                )
                .unwrap();
            }
        }
        out
    }
}

fn parse_transcript(body: &str, topo_line: usize) -> Result<Vec<TranscriptLine>, TopologyError> {
    let mut out = Vec::new();
    for raw in body.lines() {
        let raw = raw.trim_end();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let (delay, text) = raw.split_once(' ').unwrap_or((raw, ""));
        let ms: u64 = delay.parse().map_err(|_| TopologyError::Parse {
            line: topo_line,
            reason: format!("transcript line needs `<delay-ms> <text>`, got `{raw}`"),
        })?;
        out.push(TranscriptLine {
            delay: Duration::from_millis(ms),
            text: text.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Off,
    Booting,
    Up,
    Hung,
    Paniced,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("node {0} is not up (state {1:?})")]
    NotUp(String, NodeState),
    #[error("unknown node {0}")]
    UnknownNode(String),
}

struct NodeInner {
    state: NodeState,
    /// Bumped on every state change that invalidates scheduled emissions.
    epoch: u64,
    heartbeat_count: u64,
    rng: ChaCha8Rng,
    capture: bool,
}

struct EmitRecord {
    count: u64,
    digest: Sha256,
    captured: Vec<u8>,
}

/// One simulated worker node.
pub struct SimNode {
    hostname: String,
    clock: Arc<Clock>,
    endpoint: PortEndpoint,
    spec: NodeSpec,
    inner: Mutex<NodeInner>,
    emitted: Mutex<EmitRecord>,
}

impl SimNode {
    fn new(clock: Arc<Clock>, endpoint: PortEndpoint, spec: NodeSpec, seed: u64) -> Arc<SimNode> {
        let node = Arc::new(SimNode {
            hostname: spec.hostname.clone(),
            clock,
            endpoint,
            spec,
            inner: Mutex::new(NodeInner {
                state: NodeState::Off,
                epoch: 0,
                heartbeat_count: 0,
                rng: ChaCha8Rng::seed_from_u64(seed),
                capture: false,
            }),
            emitted: Mutex::new(EmitRecord {
                count: 0,
                digest: Sha256::new(),
                captured: Vec::new(),
            }),
        });
        let hook_node = Arc::clone(&node);
        node.endpoint
            .set_input_hook(move |bytes| hook_node.handle_input(bytes));
        node
    }

    pub fn hostname(&self) -> &str {
        &self.hostname
    }

    pub fn state(&self) -> NodeState {
        self.inner.lock().unwrap().state
    }

    /// Bytes the node has written to its console so far, as a running
    /// SHA-256 plus count.
    pub fn emitted(&self) -> (u64, String) {
        let rec = self.emitted.lock().unwrap();
        let digest = rec.digest.clone().finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        (rec.count, hex)
    }

    /// Keep a byte-exact copy of everything emitted from now on.
    pub fn record_traffic(&self) {
        self.inner.lock().unwrap().capture = true;
    }

    pub fn captured(&self) -> Vec<u8> {
        self.emitted.lock().unwrap().captured.clone()
    }

    /// The exact console bytes one full boot emits (transcript lines with
    /// CRLF endings).
    pub fn transcript_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for line in &self.spec.transcript {
            out.extend_from_slice(line.text.as_bytes());
            out.extend_from_slice(b"\r\n");
        }
        out
    }

    fn emit(&self, bytes: &[u8]) {
        let capture = self.inner.lock().unwrap().capture;
        {
            let mut rec = self.emitted.lock().unwrap();
            rec.count += bytes.len() as u64;
            rec.digest.update(bytes);
            if capture {
                rec.captured.extend_from_slice(bytes);
            }
        }
        let _ = self.endpoint.write(bytes);
    }

    fn emit_line(&self, text: &str) {
        let mut bytes = text.as_bytes().to_vec();
        bytes.extend_from_slice(b"\r\n");
        self.emit(&bytes);
    }

    /// Power-on from `Off`; no-op in any other state.
    pub fn power_on(self: &Arc<Self>) {
        let mut inner = self.inner.lock().unwrap();
        if inner.state == NodeState::Off {
            self.begin_boot(&mut inner);
        }
    }

    /// Reset-line pulse: reboot from any state.
    pub fn reset_pulse(self: &Arc<Self>) {
        let mut inner = self.inner.lock().unwrap();
        self.begin_boot(&mut inner);
    }

    fn begin_boot(self: &Arc<Self>, inner: &mut NodeInner) {
        inner.epoch += 1;
        inner.state = NodeState::Booting;
        let epoch = inner.epoch;
        let mut at = PRE_CONSOLE_DELAY;
        for line in &self.spec.transcript {
            at += line.delay;
            let node = Arc::clone(self);
            let text = line.text.clone();
            self.clock.schedule_in(at, move || {
                if node.inner.lock().unwrap().epoch == epoch {
                    node.emit_line(&text);
                }
            });
        }
        let node = Arc::clone(self);
        self.clock.schedule_in(at, move || {
            let mut inner = node.inner.lock().unwrap();
            if inner.epoch == epoch && inner.state == NodeState::Booting {
                inner.state = NodeState::Up;
                drop(inner);
                node.schedule_heartbeat(epoch);
            }
        });
    }

    fn schedule_heartbeat(self: &Arc<Self>, epoch: u64) {
        let Some(period) = self.spec.heartbeat else {
            return;
        };
        let node = Arc::clone(self);
        self.clock.schedule_in(period, move || {
            let mut inner = node.inner.lock().unwrap();
            if inner.epoch != epoch || inner.state != NodeState::Up {
                return;
            }
            inner.heartbeat_count += 1;
            let n = inner.heartbeat_count;
            drop(inner);
            node.emit_line(&format!("heartbeat {n}"));
            node.schedule_heartbeat(epoch);
        });
    }

    /// Start emitting pseudo-random printable chatter at roughly
    /// `bytes_per_sec`, driven by the node's seeded generator. Stops when
    /// the node leaves `Up`.
    pub fn start_chatter(self: &Arc<Self>, bytes_per_sec: u64) {
        let epoch = {
            let inner = self.inner.lock().unwrap();
            if inner.state != NodeState::Up {
                return;
            }
            inner.epoch
        };
        self.schedule_chatter(epoch, bytes_per_sec);
    }

    fn schedule_chatter(self: &Arc<Self>, epoch: u64, bytes_per_sec: u64) {
        // ~120-byte lines at whatever cadence meets the requested rate.
        let line_len = 118usize;
        let interval =
            Duration::from_nanos(1_000_000_000u64 * (line_len as u64 + 2) / bytes_per_sec.max(1));
        let node = Arc::clone(self);
        self.clock.schedule_in(interval, move || {
            let mut inner = node.inner.lock().unwrap();
            if inner.epoch != epoch || inner.state != NodeState::Up {
                return;
            }
            let line: String = (0..line_len)
                .map(|_| {
                    let c = inner.rng.gen_range(0x20u8..0x7f);
                    c as char
                })
                .collect();
            drop(inner);
            node.emit_line(&line);
            node.schedule_chatter(epoch, bytes_per_sec);
        });
    }

    /// Up → Hung: total silence, no answerback, until reset.
    pub fn inject_hang(&self) -> Result<(), SimError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.state != NodeState::Up {
            return Err(SimError::NotUp(self.hostname.clone(), inner.state));
        }
        inner.state = NodeState::Hung;
        inner.epoch += 1;
        Ok(())
    }

    /// Up → Paniced: one panic line, then silence.
    pub fn inject_panic(&self) -> Result<(), SimError> {
        {
            let mut inner = self.inner.lock().unwrap();
            if inner.state != NodeState::Up {
                return Err(SimError::NotUp(self.hostname.clone(), inner.state));
            }
            inner.state = NodeState::Paniced;
            inner.epoch += 1;
        }
        self.emit_line("Kernel panic - not syncing: attempted to kill init!");
        Ok(())
    }

    fn handle_input(&self, bytes: &[u8]) {
        let up = {
            let inner = self.inner.lock().unwrap();
            inner.state == NodeState::Up
        };
        if !up {
            return;
        }
        let mut echo = Vec::new();
        for &b in bytes {
            if b == ENQ {
                if !echo.is_empty() {
                    self.emit(&std::mem::take(&mut echo));
                }
                let mut answer = vec![0x06];
                answer.extend_from_slice(b"ID:");
                answer.extend_from_slice(self.hostname.as_bytes());
                answer.extend_from_slice(b"\r\n");
                self.emit(&answer);
            } else {
                echo.push(b);
            }
        }
        if !echo.is_empty() {
            self.emit(&echo);
        }
    }
}

/// The assembled farm.
pub struct Harness {
    clock: Arc<Clock>,
    nodes: BTreeMap<String, Arc<SimNode>>,
    console_ports: BTreeMap<u16, PortEndpoint>,
    emulator: Arc<ChainEmulator>,
    chain_endpoint: PortEndpoint,
    topology: Topology,
}

/// Build the farm: one linked console pair per node, a relay chain wired to
/// the nodes' reset lines, everything on the shared clock.
pub fn spawn_farm(
    clock: &Arc<Clock>,
    topology: &Topology,
    seed: u64,
) -> Result<Harness, TopologyError> {
    topology.validate()?;
    let boxes = topology
        .nodes
        .iter()
        .filter_map(|n| n.reset.map(|a| a.box_index() + 1))
        .max()
        .unwrap_or(1);
    let emulator = Arc::new(ChainEmulator::new(Arc::clone(clock), boxes.max(1)));
    let (chain_endpoint, chain_far) = create_linked_pair(clock);
    emulator.attach(chain_far);

    let mut nodes = BTreeMap::new();
    let mut console_ports = BTreeMap::new();
    for (i, spec) in topology.nodes.iter().enumerate() {
        let (server_side, node_side) = create_linked_pair(clock);
        let node = SimNode::new(
            Arc::clone(clock),
            node_side,
            spec.clone(),
            seed.wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(i as u64),
        );
        if let Some(addr) = spec.reset {
            let sink_node = Arc::clone(&node);
            emulator.set_sink(addr, move |_, _| sink_node.reset_pulse());
        }
        console_ports.insert(spec.console_port, server_side);
        nodes.insert(spec.hostname.clone(), node);
    }
    Ok(Harness {
        clock: Arc::clone(clock),
        nodes,
        console_ports,
        emulator,
        chain_endpoint,
        topology: topology.clone(),
    })
}

impl Harness {
    pub fn clock(&self) -> &Arc<Clock> {
        &self.clock
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn node(&self, host: &str) -> Result<&Arc<SimNode>, SimError> {
        self.nodes
            .get(host)
            .ok_or_else(|| SimError::UnknownNode(host.to_string()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&String, &Arc<SimNode>)> {
        self.nodes.iter()
    }

    /// The daemon-side endpoint of one console port.
    pub fn console_endpoint(&self, port: u16) -> Option<PortEndpoint> {
        self.console_ports.get(&port).cloned()
    }

    pub fn console_endpoints(&self) -> impl Iterator<Item = (&u16, &PortEndpoint)> {
        self.console_ports.iter()
    }

    /// The reset server's end of the relay chain serial line.
    pub fn chain_endpoint(&self) -> PortEndpoint {
        self.chain_endpoint.clone()
    }

    pub fn emulator(&self) -> &Arc<ChainEmulator> {
        &self.emulator
    }

    pub fn power_all(&self) {
        for node in self.nodes.values() {
            node.power_on();
        }
    }

    /// Advance the manual clock far enough for every powered node to reach
    /// `Up` (pre-console delay plus the longest transcript, padded).
    pub fn boot_duration(&self) -> Duration {
        let longest = self
            .topology
            .nodes
            .iter()
            .map(|n| n.transcript.iter().map(|l| l.delay).sum::<Duration>())
            .max()
            .unwrap_or_default();
        PRE_CONSOLE_DELAY + longest + Duration::from_millis(100)
    }

    /// Ground truth for detection: port index → hostname.
    pub fn truth(&self) -> BTreeMap<u16, String> {
        self.topology
            .nodes
            .iter()
            .map(|n| (n.console_port, n.hostname.clone()))
            .collect()
    }
}
