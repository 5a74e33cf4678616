//! The console server daemon.
//!
//! One [`ConsoleServer`] owns every port endpoint of one server. A clock
//! timer pumps each port's pipeline: bytes flow into the replay ring, the
//! continuous log (host-attributed, flushed on newline, 512 bytes, or 1 s
//! idle), pattern subscriptions, and attached sessions. The broker enforces
//! one ReadWrite session per port, runs answerback detection over all
//! ports on request, drives relay chains for reset execution, and feeds the
//! liveness watchdog. Control-plane calls are safe from any thread; port
//! pumping never blocks on a slow consumer.

pub mod logfmt;
mod pipeline;
mod session;

pub use session::{ConsoleSession, SessionError, SessionMode, WriteOutcome};

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::time::Duration;

use thiserror::Error;

use crate::auth::{AuthError, Challenge, ChallengeStore, Credential, KeyedHashScheme, SignatureScheme};
use crate::clock::{Clock, SimTime};
use crate::registry::{Action, DetectionReport, Registry, RegistryError};
use crate::relay::{PulseError, RelayDriver};
use crate::reset::{
    AuditEvent, AuditFilter, AuditLog, ExecuteOutcome, ResetExecutor, ResetRequest,
    ResetRequestError, ResetService, MIN_RESET_INTERVAL,
};
use crate::transport::PortEndpoint;
use crate::watchdog::{
    AlarmCause, WatchdogAction, WatchdogEngine, WatchdogPolicy, WatchdogStatus,
    WATCHDOG_PRINCIPAL, WATCHDOG_REASON,
};
use logfmt::{LogLine, LogSink};
use pipeline::{PortPipeline, ProbeWaiter};

pub const DEFAULT_PUMP_PERIOD: Duration = Duration::from_millis(50);
pub const DEFAULT_PULSE_WIDTH: Duration = Duration::from_secs(1);
pub const DETECT_ATTEMPTS: u32 = 3;
pub const DETECT_TIMEOUT: Duration = Duration::from_secs(2);
const RECENT_LOG_CAP: usize = 65_536;
const SUB_QUEUE_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum AttachError {
    #[error("denied")]
    Denied,
    #[error("port busy: write session held by {holder}")]
    WriterBusy { holder: String },
    #[error("unknown host: {0}")]
    UnknownHost(String),
}

#[derive(Debug, Error)]
pub enum SubscribeError {
    #[error("denied")]
    Denied,
    #[error("bad pattern: {0}")]
    BadPattern(String),
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("denied")]
    Denied,
    #[error("detection already running")]
    Busy,
    #[error("detection timed out")]
    Timeout,
}

#[derive(Debug, Error)]
#[error("denied")]
pub struct Denied;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("watchdog policy: {0}")]
    Policy(String),
    #[error("duplicate port index {0}")]
    DuplicatePort(u16),
    #[error("audit file: {0}")]
    Audit(std::io::Error),
}

/// Pattern syntax for subscriptions: `/…/` is a regex, anything else a
/// substring.
enum PatternMatcher {
    Substring(String),
    Regex(regex::Regex),
}

impl PatternMatcher {
    fn parse(pattern: &str) -> Result<PatternMatcher, SubscribeError> {
        if pattern.len() >= 2 && pattern.starts_with('/') && pattern.ends_with('/') {
            let inner = &pattern[1..pattern.len() - 1];
            regex::Regex::new(inner)
                .map(PatternMatcher::Regex)
                .map_err(|e| SubscribeError::BadPattern(e.to_string()))
        } else {
            Ok(PatternMatcher::Substring(pattern.to_string()))
        }
    }

    fn matches(&self, text: &str) -> bool {
        match self {
            PatternMatcher::Substring(s) => text.contains(s.as_str()),
            PatternMatcher::Regex(re) => re.is_match(text),
        }
    }
}

/// Live handle on a pattern subscription; dropping it unsubscribes.
pub struct Subscription {
    pub id: u64,
    host: String,
    queue: Arc<Mutex<VecDeque<(String, String)>>>,
}

impl Subscription {
    pub fn host(&self) -> &str {
        &self.host
    }

    /// Drain pending (timestamp, matched line) events.
    pub fn poll(&self) -> Vec<(String, String)> {
        let mut q = self.queue.lock().unwrap();
        q.drain(..).collect()
    }
}

struct SubEntry {
    host: String,
    matcher: PatternMatcher,
    queue: Weak<Mutex<VecDeque<(String, String)>>>,
}

#[derive(Debug, Clone)]
pub struct SessionInfo {
    pub id: u64,
    pub principal: String,
    pub host: String,
    pub mode: SessionMode,
    pub attached_at: String,
}

/// Instrumentation record: every attach attempt and its authorization
/// decision, linked to the session it produced (if any).
#[derive(Debug, Clone)]
pub struct AttachDecision {
    pub principal: String,
    pub host: String,
    pub mode: SessionMode,
    pub granted: bool,
    pub session_id: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PortInfo {
    pub index: u16,
    pub label: String,
    pub host: String,
    pub writer: Option<String>,
    pub sessions: usize,
}

struct SessionTable {
    next_id: u64,
    active: BTreeMap<u64, SessionInfo>,
    decisions: Vec<AttachDecision>,
}

struct DetectionRun {
    pending: std::collections::BTreeSet<u16>,
    entries: BTreeMap<u16, Option<String>>,
}

struct DetectionState {
    run: Option<DetectionRun>,
    last: Option<DetectionReport>,
}

struct Config {
    pump_period: Duration,
    probe_attempts: u32,
    probe_timeout: Duration,
    pulse_width: Duration,
}

pub(crate) struct ServerInner {
    server_id: String,
    clock: Arc<Clock>,
    registry: Arc<RwLock<Arc<Registry>>>,
    store_dir: Option<PathBuf>,
    auth: ChallengeStore,
    scheme: Box<dyn SignatureScheme>,
    ports: BTreeMap<u16, Mutex<PortPipeline>>,
    port_by_host: HashMap<String, u16>,
    drivers: BTreeMap<String, RelayDriver>,
    sinks: Mutex<Vec<Box<dyn LogSink>>>,
    recent: Mutex<VecDeque<LogLine>>,
    subs: Mutex<Vec<SubEntry>>,
    sub_ids: AtomicU64,
    sessions: Mutex<SessionTable>,
    detection: Mutex<DetectionState>,
    watchdog: Option<Mutex<WatchdogEngine>>,
    reset: std::sync::OnceLock<Arc<ResetService>>,
    events: Mutex<Vec<String>>,
    cfg: Config,
    started: AtomicBool,
    stopped: AtomicBool,
}

pub struct ConsoleServerBuilder {
    server_id: String,
    clock: Arc<Clock>,
    registry: Registry,
    store_dir: Option<PathBuf>,
    ports: Vec<(u16, PortEndpoint)>,
    chains: Vec<(String, PortEndpoint)>,
    sinks: Vec<Box<dyn LogSink>>,
    audit_path: Option<PathBuf>,
    watchdog: Option<WatchdogPolicy>,
    cfg: Config,
    min_reset_interval: Duration,
}

impl ConsoleServerBuilder {
    pub fn port(mut self, index: u16, endpoint: PortEndpoint) -> Self {
        self.ports.push((index, endpoint));
        self
    }

    pub fn ports(mut self, ports: impl IntoIterator<Item = (u16, PortEndpoint)>) -> Self {
        self.ports.extend(ports);
        self
    }

    pub fn chain(mut self, device: &str, endpoint: PortEndpoint) -> Self {
        self.chains.push((device.to_string(), endpoint));
        self
    }

    pub fn log_sink(mut self, sink: Box<dyn LogSink>) -> Self {
        self.sinks.push(sink);
        self
    }

    pub fn audit_file(mut self, path: PathBuf) -> Self {
        self.audit_path = Some(path);
        self
    }

    pub fn store_dir(mut self, dir: PathBuf) -> Self {
        self.store_dir = Some(dir);
        self
    }

    pub fn watchdog(mut self, policy: WatchdogPolicy) -> Self {
        self.watchdog = Some(policy);
        self
    }

    pub fn pump_period(mut self, period: Duration) -> Self {
        self.cfg.pump_period = period;
        self
    }

    pub fn pulse_width(mut self, width: Duration) -> Self {
        self.cfg.pulse_width = width;
        self
    }

    pub fn reset_interval(mut self, interval: Duration) -> Self {
        self.min_reset_interval = interval;
        self
    }

    pub fn build(self) -> Result<ConsoleServer, BuildError> {
        if let Some(policy) = &self.watchdog {
            policy.validate().map_err(BuildError::Policy)?;
        }
        let console_map = self.registry.console_map(&self.server_id);
        let mut ports = BTreeMap::new();
        let mut port_by_host = HashMap::new();
        for (index, endpoint) in self.ports {
            let host = console_map
                .get(&index)
                .cloned()
                .unwrap_or_else(|| format!("unmapped-{}-{}", self.server_id, index));
            port_by_host.insert(host.clone(), index);
            let pl = PortPipeline::new(
                index,
                host,
                endpoint,
                pipeline::RING_CAPACITY,
                pipeline::FLUSH_BYTES,
                pipeline::FLUSH_IDLE,
            );
            if ports.insert(index, Mutex::new(pl)).is_some() {
                return Err(BuildError::DuplicatePort(index));
            }
        }
        let drivers = self
            .chains
            .into_iter()
            .map(|(device, ep)| (device, RelayDriver::new(ep, Arc::clone(&self.clock))))
            .collect();
        let audit = match &self.audit_path {
            Some(path) => Arc::new(AuditLog::with_file(path).map_err(BuildError::Audit)?),
            None => Arc::new(AuditLog::in_memory()),
        };
        let watchdog = self.watchdog.map(|policy| {
            let mut engine = WatchdogEngine::new(policy);
            let now = self.clock.now();
            for (index, host) in &console_map {
                if ports.contains_key(index) {
                    engine.watch(host, now);
                }
            }
            Mutex::new(engine)
        });
        let registry = Arc::new(RwLock::new(Arc::new(self.registry)));
        let inner = Arc::new(ServerInner {
            server_id: self.server_id,
            clock: Arc::clone(&self.clock),
            registry: Arc::clone(&registry),
            store_dir: self.store_dir,
            auth: ChallengeStore::new(Arc::clone(&self.clock)),
            scheme: Box::new(KeyedHashScheme),
            ports,
            port_by_host,
            drivers,
            sinks: Mutex::new(self.sinks),
            recent: Mutex::new(VecDeque::new()),
            subs: Mutex::new(Vec::new()),
            sub_ids: AtomicU64::new(1),
            sessions: Mutex::new(SessionTable {
                next_id: 1,
                active: BTreeMap::new(),
                decisions: Vec::new(),
            }),
            detection: Mutex::new(DetectionState {
                run: None,
                last: None,
            }),
            watchdog,
            reset: std::sync::OnceLock::new(),
            events: Mutex::new(Vec::new()),
            cfg: self.cfg,
            started: AtomicBool::new(false),
            stopped: AtomicBool::new(false),
        });
        let executor = Arc::new(DaemonExecutor {
            inner: Arc::downgrade(&inner),
        });
        let service = Arc::new(ResetService::new(
            Arc::clone(&self.clock),
            registry,
            audit,
            executor,
            self.min_reset_interval,
        ));
        inner.reset.set(service).ok();
        Ok(ConsoleServer { inner })
    }
}

struct DaemonExecutor {
    inner: Weak<ServerInner>,
}

impl ResetExecutor for DaemonExecutor {
    fn execute(&self, host: &str) -> ExecuteOutcome {
        match self.inner.upgrade() {
            Some(inner) => inner.execute_reset(host),
            None => ExecuteOutcome::NoWiring,
        }
    }
}

/// The daemon handle. Clones share the same server.
#[derive(Clone)]
pub struct ConsoleServer {
    inner: Arc<ServerInner>,
}

impl ConsoleServer {
    pub fn builder(server_id: &str, clock: Arc<Clock>, registry: Registry) -> ConsoleServerBuilder {
        ConsoleServerBuilder {
            server_id: server_id.to_string(),
            clock,
            registry,
            store_dir: None,
            ports: Vec::new(),
            chains: Vec::new(),
            sinks: Vec::new(),
            audit_path: None,
            watchdog: None,
            cfg: Config {
                pump_period: DEFAULT_PUMP_PERIOD,
                probe_attempts: DETECT_ATTEMPTS,
                probe_timeout: DETECT_TIMEOUT,
                pulse_width: DEFAULT_PULSE_WIDTH,
            },
            min_reset_interval: MIN_RESET_INTERVAL,
        }
    }

    pub fn server_id(&self) -> &str {
        &self.inner.server_id
    }

    pub fn clock(&self) -> &Arc<Clock> {
        &self.inner.clock
    }

    /// Current registry snapshot.
    pub fn registry(&self) -> Arc<Registry> {
        self.inner.registry.read().unwrap().clone()
    }

    /// Swap in an updated registry snapshot and persist it when a store
    /// directory is configured.
    pub fn update_registry(
        &self,
        update: impl FnOnce(&Registry) -> Registry,
    ) -> Result<(), RegistryError> {
        let mut guard = self.inner.registry.write().unwrap();
        let updated = Arc::new(update(&guard));
        if let Some(dir) = &self.inner.store_dir {
            updated.save(dir)?;
        }
        *guard = updated;
        Ok(())
    }

    /// Schedule the port pump and watchdog ticks on the clock.
    pub fn start(&self) {
        if self.inner.started.swap(true, Ordering::SeqCst) {
            return;
        }
        ServerInner::schedule_pump(&self.inner);
        if self.inner.watchdog.is_some() {
            ServerInner::schedule_watchdog(&self.inner);
        }
    }

    /// Stop pumping and flush pending partial lines to the log.
    pub fn stop(&self) {
        if self.inner.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        let now = self.inner.clock.now();
        let stamp = self.inner.clock.wall(now);
        let mut lines = Vec::new();
        for pl in self.inner.ports.values() {
            let mut pl = pl.lock().unwrap();
            // Drain anything already in flight, then force the remainder.
            let out = pl.pump(now);
            for chunk in out.chunks {
                lines.push(LogLine {
                    timestamp: stamp,
                    host: pl.host.clone(),
                    port_label: pl.label.clone(),
                    chunk,
                });
            }
            if let Some(chunk) = pl.final_flush() {
                lines.push(LogLine {
                    timestamp: stamp,
                    host: pl.host.clone(),
                    port_label: pl.label.clone(),
                    chunk,
                });
            }
        }
        self.inner.sink_lines(&lines);
        let mut sinks = self.inner.sinks.lock().unwrap();
        for sink in sinks.iter_mut() {
            let _ = sink.flush();
        }
    }

    /// One manual pump pass (tests drive the clock instead where possible).
    pub fn pump_once(&self) {
        ServerInner::pump_cycle(&self.inner);
    }

    pub fn issue_challenge(&self) -> Challenge {
        self.inner.auth.issue(&self.inner.server_id)
    }

    pub fn authenticate(
        &self,
        nonce: &[u8],
        credential: &Credential,
    ) -> Result<String, AuthError> {
        let registry = self.registry();
        self.inner
            .auth
            .authenticate(nonce, credential, &registry, self.inner.scheme.as_ref())
    }

    /// Broker a session onto a host's port.
    pub fn attach(
        &self,
        principal: &str,
        host: &str,
        mode: SessionMode,
    ) -> Result<ConsoleSession, AttachError> {
        let registry = self.registry();
        let required = match mode {
            SessionMode::ReadWrite => Action::Console,
            SessionMode::ReadOnly => Action::ConsoleReadOnly,
        };
        let granted = registry.authorize(principal, required, host);
        if !granted {
            self.inner.record_decision(principal, host, mode, false, None);
            return Err(AttachError::Denied);
        }
        let Some(port) = self.inner.port_by_host.get(host).copied() else {
            self.inner.record_decision(principal, host, mode, true, None);
            return Err(AttachError::UnknownHost(host.to_string()));
        };
        let mut table = self.inner.sessions.lock().unwrap();
        let pl_mutex = self.inner.ports.get(&port).expect("port exists");
        let mut pl = pl_mutex.lock().unwrap();
        if mode == SessionMode::ReadWrite {
            if let Some((_, holder)) = pl.writer() {
                let holder = holder.clone();
                drop(pl);
                drop(table);
                self.inner.record_decision(principal, host, mode, true, None);
                return Err(AttachError::WriterBusy { holder });
            }
        }
        let id = table.next_id;
        table.next_id += 1;
        let shared = session::SessionShared::new(id, principal, host, mode, port);
        pl.attach_session(&shared);
        if mode == SessionMode::ReadWrite {
            pl.set_writer(id, principal);
        }
        let endpoint = pl.endpoint().clone();
        drop(pl);
        table.active.insert(
            id,
            SessionInfo {
                id,
                principal: principal.to_string(),
                host: host.to_string(),
                mode,
                attached_at: self.inner.clock.timestamp(),
            },
        );
        table.decisions.push(AttachDecision {
            principal: principal.to_string(),
            host: host.to_string(),
            mode,
            granted: true,
            session_id: Some(id),
        });
        drop(table);
        Ok(ConsoleSession::new(
            shared,
            endpoint,
            Arc::clone(&self.inner.clock),
            Arc::downgrade(&self.inner),
        ))
    }

    /// Subscribe to log lines of one host matching a pattern.
    pub fn subscribe(
        &self,
        principal: &str,
        host: &str,
        pattern: &str,
    ) -> Result<Subscription, SubscribeError> {
        let registry = self.registry();
        if !registry.authorize(principal, Action::ConsoleReadOnly, host) {
            return Err(SubscribeError::Denied);
        }
        let matcher = PatternMatcher::parse(pattern)?;
        let queue = Arc::new(Mutex::new(VecDeque::new()));
        let id = self.inner.sub_ids.fetch_add(1, Ordering::SeqCst);
        self.inner.subs.lock().unwrap().push(SubEntry {
            host: host.to_string(),
            matcher,
            queue: Arc::downgrade(&queue),
        });
        Ok(Subscription {
            id,
            host: host.to_string(),
            queue,
        })
    }

    /// Kick off detection over every owned port. Requires an Admin grant;
    /// detection is server-wide, so any admin pattern qualifies.
    pub fn start_detection(&self, principal: &str) -> Result<(), DetectError> {
        let registry = self.registry();
        let is_admin = registry
            .grants()
            .iter()
            .any(|g| g.principal == principal && g.action == Action::Admin);
        if !is_admin {
            return Err(DetectError::Denied);
        }
        let mut det = self.inner.detection.lock().unwrap();
        if det.run.is_some() {
            return Err(DetectError::Busy);
        }
        let now = self.inner.clock.now();
        let run = DetectionRun {
            pending: self.inner.ports.keys().copied().collect(),
            entries: BTreeMap::new(),
        };
        if run.pending.is_empty() {
            det.last = Some(DetectionReport {
                server_id: self.inner.server_id.clone(),
                generated_at: self.inner.clock.wall(now),
                entries: Vec::new(),
            });
        } else {
            for pl in self.inner.ports.values() {
                pl.lock().unwrap().arm_probe(
                    now,
                    self.inner.cfg.probe_attempts,
                    self.inner.cfg.probe_timeout,
                    ProbeWaiter::Detection,
                );
            }
            det.run = Some(run);
        }
        Ok(())
    }

    pub fn detection_done(&self) -> bool {
        self.inner.detection.lock().unwrap().run.is_none()
    }

    pub fn last_detection_report(&self) -> Option<DetectionReport> {
        self.inner.detection.lock().unwrap().last.clone()
    }

    /// Run detection to completion. On a manual clock this drives the pump
    /// itself; on a realtime clock it waits.
    pub fn run_detection(&self, principal: &str) -> Result<DetectionReport, DetectError> {
        self.start_detection(principal)?;
        let budget = self.inner.cfg.probe_timeout * (self.inner.cfg.probe_attempts + 2)
            + Duration::from_secs(2);
        let deadline = self.inner.clock.now() + budget;
        let wall_deadline = std::time::Instant::now() + Duration::from_secs(60);
        while !self.detection_done() {
            if self.inner.clock.is_realtime() {
                if std::time::Instant::now() >= wall_deadline {
                    return Err(DetectError::Timeout);
                }
                std::thread::sleep(Duration::from_millis(5));
            } else {
                if self.inner.clock.now() >= deadline {
                    return Err(DetectError::Timeout);
                }
                self.inner.clock.advance(self.inner.cfg.pump_period);
            }
        }
        let report = self
            .last_detection_report()
            .expect("finished detection leaves a report");
        if let Some(dir) = &self.inner.store_dir {
            let path = dir.join(format!("detected-{}.report", self.inner.server_id));
            let _ = std::fs::write(path, report.render());
        }
        Ok(report)
    }

    /// Resolve wiring and pulse the host's reset contact.
    pub fn execute_reset(&self, host: &str) -> ExecuteOutcome {
        self.inner.execute_reset(host)
    }

    /// Authorization + rate limit + pulse + audit, under `principal`.
    pub fn submit_reset(
        &self,
        principal: &str,
        host: &str,
        reason: &str,
    ) -> Result<AuditEvent, ResetRequestError> {
        let request = ResetRequest::new(principal, host, reason, self.inner.clock.now())?;
        Ok(self.inner.reset_service().submit(&request))
    }

    pub fn audit_query(&self, filter: &AuditFilter) -> Vec<AuditEvent> {
        self.inner.reset_service().audit_log().query(filter)
    }

    pub fn audit_log(&self) -> Arc<AuditLog> {
        Arc::clone(self.inner.reset_service().audit_log())
    }

    pub fn watchdog_status(&self) -> Vec<WatchdogStatus> {
        match &self.inner.watchdog {
            Some(wd) => wd.lock().unwrap().status(self.inner.clock.now()),
            None => Vec::new(),
        }
    }

    pub fn alarms(&self) -> Vec<(String, AlarmCause)> {
        match &self.inner.watchdog {
            Some(wd) => wd.lock().unwrap().alarmed(),
            None => Vec::new(),
        }
    }

    /// Admin-only: return an alarmed host to service. Always audited.
    pub fn clear_alarm(&self, principal: &str, host: &str) -> Result<AuditEvent, Denied> {
        let registry = self.registry();
        let granted = registry.authorize(principal, Action::Admin, host);
        let event = self
            .inner
            .reset_service()
            .audit_clear(principal, host, granted);
        if !granted {
            return Err(Denied);
        }
        if let Some(wd) = &self.inner.watchdog {
            wd.lock().unwrap().clear(host, self.inner.clock.now());
        }
        Ok(event)
    }

    pub fn list_hosts(&self) -> Vec<String> {
        self.registry()
            .console_map(&self.inner.server_id)
            .into_values()
            .collect()
    }

    pub fn list_ports(&self) -> Vec<PortInfo> {
        self.inner
            .ports
            .iter()
            .map(|(index, pl)| {
                let pl = pl.lock().unwrap();
                PortInfo {
                    index: *index,
                    label: pl.label.clone(),
                    host: pl.host.clone(),
                    writer: pl.writer().map(|(_, p)| p.clone()),
                    sessions: pl.session_count(),
                }
            })
            .collect()
    }

    pub fn list_sessions(&self) -> Vec<SessionInfo> {
        self.inner
            .sessions
            .lock()
            .unwrap()
            .active
            .values()
            .cloned()
            .collect()
    }

    pub fn attach_decisions(&self) -> Vec<AttachDecision> {
        self.inner.sessions.lock().unwrap().decisions.clone()
    }

    /// Recent log lines, optionally filtered by host and start time.
    pub fn recent_log(
        &self,
        host: Option<&str>,
        since: Option<chrono::DateTime<chrono::Utc>>,
    ) -> Vec<LogLine> {
        self.inner
            .recent
            .lock()
            .unwrap()
            .iter()
            .filter(|l| host.is_none_or(|h| l.host == h))
            .filter(|l| since.is_none_or(|s| l.timestamp >= s))
            .cloned()
            .collect()
    }

    /// Operational alarms and notices (sink failures, watchdog alarms).
    pub fn operational_events(&self) -> Vec<String> {
        self.inner.events.lock().unwrap().clone()
    }

    /// Digest over the daemon's control-plane state; read-only commands
    /// must leave it unchanged.
    pub fn state_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let registry = self.registry();
        let rendered = registry.render();
        h.update(&rendered.interconnections);
        h.update(&rendered.grants);
        h.update(&rendered.keys);
        {
            let table = self.inner.sessions.lock().unwrap();
            for (id, info) in &table.active {
                h.update(id.to_le_bytes());
                h.update(info.principal.as_bytes());
            }
        }
        for row in self.watchdog_status() {
            h.update(row.host.as_bytes());
            h.update(row.phase.name().as_bytes());
            h.update((row.restarts_in_window as u64).to_le_bytes());
        }
        h.update(
            (self.inner.reset_service().audit_log().len() as u64).to_le_bytes(),
        );
        if let Some(report) = self.last_detection_report() {
            h.update(report.render().as_bytes());
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn host_for_port(&self, port: u16) -> Option<String> {
        self.inner
            .ports
            .get(&port)
            .map(|pl| pl.lock().unwrap().host.clone())
    }

    pub fn port_for_host(&self, host: &str) -> Option<u16> {
        self.inner.port_by_host.get(host).copied()
    }
}

impl ServerInner {
    fn reset_service(&self) -> &Arc<ResetService> {
        self.reset.get().expect("reset service wired at build")
    }

    fn schedule_pump(inner: &Arc<ServerInner>) {
        let weak = Arc::downgrade(inner);
        let period = inner.cfg.pump_period;
        inner.clock.schedule_in(period, move || {
            if let Some(inner) = weak.upgrade() {
                if inner.stopped.load(Ordering::SeqCst) {
                    return;
                }
                ServerInner::pump_cycle(&inner);
                ServerInner::schedule_pump(&inner);
            }
        });
    }

    fn schedule_watchdog(inner: &Arc<ServerInner>) {
        let Some(policy) = inner
            .watchdog
            .as_ref()
            .map(|wd| *wd.lock().unwrap().policy())
        else {
            return;
        };
        let weak = Arc::downgrade(inner);
        inner.clock.schedule_in(policy.tick_period, move || {
            if let Some(inner) = weak.upgrade() {
                if inner.stopped.load(Ordering::SeqCst) {
                    return;
                }
                ServerInner::watchdog_tick(&inner);
                ServerInner::schedule_watchdog(&inner);
            }
        });
    }

    fn pump_cycle(inner: &Arc<ServerInner>) {
        let now = inner.clock.now();
        let stamp = inner.clock.wall(now);
        let mut lines = Vec::new();
        let mut probe_events = Vec::new();
        let mut output_hosts = Vec::new();
        for (index, pl_mutex) in &inner.ports {
            let mut pl = pl_mutex.lock().unwrap();
            let out = pl.pump(now);
            if out.bytes > 0 {
                output_hosts.push(pl.host.clone());
            }
            for chunk in out.chunks {
                lines.push(LogLine {
                    timestamp: stamp,
                    host: pl.host.clone(),
                    port_label: pl.label.clone(),
                    chunk,
                });
            }
            if let Some((result, waiters)) = out.probe_done {
                probe_events.push((*index, pl.host.clone(), result, waiters));
            }
        }
        inner.sink_lines(&lines);
        if let Some(wd) = &inner.watchdog {
            let mut engine = wd.lock().unwrap();
            for host in &output_hosts {
                engine.note_output(host, now);
            }
        }
        for (index, host, result, waiters) in probe_events {
            for waiter in waiters {
                match waiter {
                    ProbeWaiter::Detection => inner.detection_resolve(index, result.clone()),
                    ProbeWaiter::Watchdog => {
                        ServerInner::watchdog_probe_concluded(inner, &host, result.is_some(), now)
                    }
                }
            }
        }
    }

    fn sink_lines(&self, lines: &[LogLine]) {
        if lines.is_empty() {
            return;
        }
        {
            let mut recent = self.recent.lock().unwrap();
            for line in lines {
                if recent.len() == RECENT_LOG_CAP {
                    recent.pop_front();
                }
                recent.push_back(line.clone());
            }
        }
        {
            let mut sinks = self.sinks.lock().unwrap();
            for sink in sinks.iter_mut() {
                for line in lines {
                    if let Err(e) = sink.append(line) {
                        self.op_event(format!("log sink failure: {e}"));
                        break;
                    }
                }
            }
        }
        let mut subs = self.subs.lock().unwrap();
        subs.retain(|entry| entry.queue.strong_count() > 0);
        for entry in subs.iter() {
            let Some(queue) = entry.queue.upgrade() else {
                continue;
            };
            for line in lines {
                if line.host != entry.host {
                    continue;
                }
                let text = line.display_text();
                if entry.matcher.matches(&text) {
                    let mut q = queue.lock().unwrap();
                    if q.len() == SUB_QUEUE_CAP {
                        q.pop_front();
                    }
                    q.push_back((
                        line.timestamp
                            .to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                        text.clone(),
                    ));
                }
            }
        }
    }

    fn detection_resolve(&self, port: u16, result: Option<String>) {
        let mut det = self.detection.lock().unwrap();
        let Some(run) = &mut det.run else {
            return;
        };
        if !run.pending.remove(&port) {
            return;
        }
        run.entries.insert(port, result);
        if run.pending.is_empty() {
            let entries = run.entries.iter().map(|(p, h)| (*p, h.clone())).collect();
            det.last = Some(DetectionReport {
                server_id: self.server_id.clone(),
                generated_at: self.clock.wall(self.clock.now()),
                entries,
            });
            det.run = None;
        }
    }

    fn watchdog_tick(inner: &Arc<ServerInner>) {
        let Some(wd) = &inner.watchdog else {
            return;
        };
        let now = inner.clock.now();
        let hosts: Vec<String> = wd.lock().unwrap().hosts().cloned().collect();
        for host in hosts {
            let action = wd.lock().unwrap().evaluate(&host, now);
            ServerInner::watchdog_act(inner, &host, action, now);
        }
    }

    fn watchdog_probe_concluded(inner: &Arc<ServerInner>, host: &str, answered: bool, now: SimTime) {
        let Some(wd) = &inner.watchdog else {
            return;
        };
        let has_wiring = inner.host_has_local_wiring(host);
        let action = wd
            .lock()
            .unwrap()
            .probe_concluded(host, answered, now, has_wiring);
        ServerInner::watchdog_act(inner, host, action, now);
    }

    fn watchdog_act(inner: &Arc<ServerInner>, host: &str, action: WatchdogAction, now: SimTime) {
        match action {
            WatchdogAction::None => {}
            WatchdogAction::Probe => {
                let Some(policy) = inner
                    .watchdog
                    .as_ref()
                    .map(|wd| *wd.lock().unwrap().policy())
                else {
                    return;
                };
                match inner.port_by_host.get(host).and_then(|p| inner.ports.get(p)) {
                    Some(pl) => pl.lock().unwrap().arm_probe(
                        now,
                        policy.probe_retries,
                        policy.probe_timeout,
                        ProbeWaiter::Watchdog,
                    ),
                    None => inner.op_event(format!(
                        "watchdog: no port endpoint for {host}, cannot probe"
                    )),
                }
            }
            WatchdogAction::Reset => {
                match ResetRequest::new(WATCHDOG_PRINCIPAL, host, WATCHDOG_REASON, now) {
                    Ok(request) => {
                        let event = inner.reset_service().submit(&request);
                        if event.outcome != crate::reset::ResetOutcome::Ok {
                            inner.op_event(format!(
                                "watchdog reset of {host} did not pulse: {}",
                                event.outcome.code()
                            ));
                        }
                    }
                    Err(e) => inner.op_event(format!("watchdog reset of {host}: {e}")),
                }
            }
            WatchdogAction::Alarm(cause) => {
                inner.op_event(format!(
                    "watchdog alarm host={host} cause=\"{}\"",
                    cause.describe()
                ));
            }
        }
    }

    fn host_has_local_wiring(&self, host: &str) -> bool {
        let registry = self.registry.read().unwrap().clone();
        match registry.lookup_reset(host) {
            Ok(wiring) => {
                wiring.server_id == self.server_id && self.drivers.contains_key(&wiring.device)
            }
            Err(_) => false,
        }
    }

    fn execute_reset(&self, host: &str) -> ExecuteOutcome {
        let registry = self.registry.read().unwrap().clone();
        let Ok(wiring) = registry.lookup_reset(host) else {
            return ExecuteOutcome::NoWiring;
        };
        if wiring.server_id != self.server_id {
            return ExecuteOutcome::NoWiring;
        }
        let Some(driver) = self.drivers.get(&wiring.device) else {
            return ExecuteOutcome::NoWiring;
        };
        match driver.pulse(wiring.address, self.cfg.pulse_width) {
            Ok(()) => ExecuteOutcome::Pulsed(wiring.address),
            Err(PulseError::Nak) => ExecuteOutcome::Nak(wiring.address),
            Err(_) => ExecuteOutcome::Timeout(wiring.address),
        }
    }

    pub(crate) fn detach_session(&self, port: u16, id: u64) {
        let mut table = self.sessions.lock().unwrap();
        table.active.remove(&id);
        if let Some(pl) = self.ports.get(&port) {
            pl.lock().unwrap().remove_session(id);
        }
    }

    fn record_decision(
        &self,
        principal: &str,
        host: &str,
        mode: SessionMode,
        granted: bool,
        session_id: Option<u64>,
    ) {
        self.sessions.lock().unwrap().decisions.push(AttachDecision {
            principal: principal.to_string(),
            host: host.to_string(),
            mode,
            granted,
            session_id,
        });
    }

    fn op_event(&self, text: String) {
        let stamped = format!("{} {text}", self.clock.timestamp());
        self.events.lock().unwrap().push(stamped);
    }
}
