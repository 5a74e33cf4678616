//! The reset-request workflow.
//!
//! Every reset goes through [`ResetService::submit`]: authorization against
//! the registry, a per-host minimum interval between successful pulses, the
//! pulse itself, and exactly one [`AuditEvent`] appended to the trail no
//! matter the outcome. Machine-initiated resets (the watchdog) use the same
//! entry point under their own principal, so the audit trail covers them
//! identically.
//!
//! Audit line format, append-only, one event per line:
//!
//! ```text
//! <rfc3339> RESET principal=<p> host=<h> addr=<box>/<relay> outcome=<code> reason="<escaped>"
//! ```
//!
//! (`addr=-/-` when no contact was resolved; watchdog alarm clears use the
//! `WDCLEAR` tag with the same shape.)

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

use crate::clock::{Clock, SimTime};
use crate::console::logfmt;
use crate::registry::{Action, Registry};
use crate::relay::RelayAddress;

/// Default minimum interval between successful pulses of one host.
pub const MIN_RESET_INTERVAL: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ResetRequestError {
    #[error("reset reason must not be empty")]
    EmptyReason,
}

/// A validated reset request; construction enforces the non-empty reason.
#[derive(Debug, Clone)]
pub struct ResetRequest {
    principal: String,
    host: String,
    reason: String,
    requested_at: SimTime,
}

impl ResetRequest {
    pub fn new(
        principal: impl Into<String>,
        host: impl Into<String>,
        reason: impl Into<String>,
        requested_at: SimTime,
    ) -> Result<ResetRequest, ResetRequestError> {
        let reason = reason.into();
        if reason.trim().is_empty() {
            return Err(ResetRequestError::EmptyReason);
        }
        Ok(ResetRequest {
            principal: principal.into(),
            host: host.into(),
            reason,
            requested_at,
        })
    }

    pub fn principal(&self) -> &str {
        &self.principal
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn reason(&self) -> &str {
        &self.reason
    }

    pub fn requested_at(&self) -> SimTime {
        self.requested_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetOutcome {
    Ok,
    Denied,
    NoWiring,
    Nak,
    Timeout,
    RateLimited,
}

impl ResetOutcome {
    pub fn code(&self) -> &'static str {
        match self {
            ResetOutcome::Ok => "ok",
            ResetOutcome::Denied => "denied",
            ResetOutcome::NoWiring => "no-wiring",
            ResetOutcome::Nak => "nak",
            ResetOutcome::Timeout => "timeout",
            ResetOutcome::RateLimited => "rate-limited",
        }
    }

    pub fn parse(code: &str) -> Option<ResetOutcome> {
        match code {
            "ok" => Some(ResetOutcome::Ok),
            "denied" => Some(ResetOutcome::Denied),
            "no-wiring" => Some(ResetOutcome::NoWiring),
            "nak" => Some(ResetOutcome::Nak),
            "timeout" => Some(ResetOutcome::Timeout),
            "rate-limited" => Some(ResetOutcome::RateLimited),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditKind {
    Reset,
    WatchdogClear,
}

impl AuditKind {
    fn tag(&self) -> &'static str {
        match self {
            AuditKind::Reset => "RESET",
            AuditKind::WatchdogClear => "WDCLEAR",
        }
    }
}

/// One audited decision, successful or not.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEvent {
    pub timestamp: DateTime<Utc>,
    pub kind: AuditKind,
    pub principal: String,
    pub host: String,
    pub address: Option<RelayAddress>,
    pub outcome: ResetOutcome,
    pub reason: String,
}

impl AuditEvent {
    pub fn render(&self) -> String {
        let addr = match &self.address {
            Some(a) => format!("{}/{}", a.box_index(), a.relay()),
            None => "-/-".to_string(),
        };
        format!(
            "{} {} principal={} host={} addr={} outcome={} reason=\"{}\"",
            self.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true),
            self.kind.tag(),
            self.principal,
            self.host,
            addr,
            self.outcome.code(),
            escape_reason(&self.reason),
        )
    }

    pub fn parse(line: &str) -> Option<AuditEvent> {
        let mut fields = line.splitn(7, ' ');
        let ts = fields.next()?;
        let tag = fields.next()?;
        let kind = match tag {
            "RESET" => AuditKind::Reset,
            "WDCLEAR" => AuditKind::WatchdogClear,
            _ => return None,
        };
        let principal = fields.next()?.strip_prefix("principal=")?.to_string();
        let host = fields.next()?.strip_prefix("host=")?.to_string();
        let addr = fields.next()?.strip_prefix("addr=")?;
        let address = if addr == "-/-" {
            None
        } else {
            let (b, r) = addr.split_once('/')?;
            Some(RelayAddress::new(b.parse().ok()?, r.parse().ok()?)?)
        };
        let outcome = ResetOutcome::parse(fields.next()?.strip_prefix("outcome=")?)?;
        let reason_field = fields.next()?.strip_prefix("reason=\"")?;
        let reason_escaped = reason_field.strip_suffix('"')?;
        let reason = String::from_utf8(logfmt::unescape(reason_escaped).ok()?).ok()?;
        Some(AuditEvent {
            timestamp: DateTime::parse_from_rfc3339(ts).ok()?.with_timezone(&Utc),
            kind,
            principal,
            host,
            address,
            outcome,
            reason,
        })
    }
}

fn escape_reason(reason: &str) -> String {
    // Same escaping as console payloads, with the quote folded into \xNN so
    // the quoted field never contains a raw `"`.
    logfmt::escape(reason.as_bytes()).replace('"', "\\x22")
}

/// Query filter for the audit trail.
#[derive(Debug, Clone, Default)]
pub struct AuditFilter {
    pub host: Option<String>,
    pub principal: Option<String>,
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

impl AuditFilter {
    fn matches(&self, event: &AuditEvent) -> bool {
        self.host.as_ref().is_none_or(|h| *h == event.host)
            && self
                .principal
                .as_ref()
                .is_none_or(|p| *p == event.principal)
            && self.from.is_none_or(|t| event.timestamp >= t)
            && self.to.is_none_or(|t| event.timestamp <= t)
    }
}

/// Append-only audit log: in-memory trail plus an optional line file.
pub struct AuditLog {
    events: Mutex<Vec<AuditEvent>>,
    file: Option<Mutex<std::fs::File>>,
}

impl AuditLog {
    pub fn in_memory() -> AuditLog {
        AuditLog {
            events: Mutex::new(Vec::new()),
            file: None,
        }
    }

    pub fn with_file(path: &Path) -> std::io::Result<AuditLog> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(AuditLog {
            events: Mutex::new(Vec::new()),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn append(&self, event: AuditEvent) -> std::io::Result<()> {
        let line = event.render();
        self.events.lock().unwrap().push(event);
        if let Some(file) = &self.file {
            let mut f = file.lock().unwrap();
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(())
    }

    /// Matching events in timestamp (append) order.
    pub fn query(&self, filter: &AuditFilter) -> Vec<AuditEvent> {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What actually happened at the relay chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecuteOutcome {
    Pulsed(RelayAddress),
    /// No usable wiring: unknown host, console-only host, or wiring on a
    /// different reset server.
    NoWiring,
    Nak(RelayAddress),
    Timeout(RelayAddress),
}

/// Resolves a host's wiring and drives the pulse. Implemented by the
/// console server daemon.
pub trait ResetExecutor: Send + Sync {
    fn execute(&self, host: &str) -> ExecuteOutcome;
}

#[derive(Default)]
struct HostGate {
    last_ok: Option<SimTime>,
    in_flight: bool,
}

/// Authorization + rate limiting + pulse + audit, in that order.
pub struct ResetService {
    clock: Arc<Clock>,
    registry: Arc<RwLock<Arc<Registry>>>,
    audit: Arc<AuditLog>,
    executor: Arc<dyn ResetExecutor>,
    min_interval: Duration,
    gates: Mutex<HashMap<String, HostGate>>,
}

impl ResetService {
    pub fn new(
        clock: Arc<Clock>,
        registry: Arc<RwLock<Arc<Registry>>>,
        audit: Arc<AuditLog>,
        executor: Arc<dyn ResetExecutor>,
        min_interval: Duration,
    ) -> ResetService {
        ResetService {
            clock,
            registry,
            audit,
            executor,
            min_interval,
            gates: Mutex::new(HashMap::new()),
        }
    }

    pub fn audit_log(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    /// Process one request end to end and return its audit event. Every
    /// call appends exactly one event.
    pub fn submit(&self, request: &ResetRequest) -> AuditEvent {
        let registry = self.registry.read().unwrap().clone();
        let authorized =
            registry.authorize(request.principal(), Action::Reset, request.host());
        if !authorized {
            return self.finish(request, None, ResetOutcome::Denied);
        }

        // Atomic check-and-reserve: serializes same-host submissions without
        // holding a lock across the pulse. A submission that races an
        // in-flight pulse for the same host is rate-limited.
        {
            let mut gates = self.gates.lock().unwrap();
            let gate = gates.entry(request.host().to_string()).or_default();
            let now = self.clock.now();
            let recent = gate
                .last_ok
                .is_some_and(|last| now.since(last) < self.min_interval);
            if recent || gate.in_flight {
                drop(gates);
                return self.finish(request, None, ResetOutcome::RateLimited);
            }
            gate.in_flight = true;
        }

        let exec = self.executor.execute(request.host());

        let mut gates = self.gates.lock().unwrap();
        let gate = gates.entry(request.host().to_string()).or_default();
        gate.in_flight = false;
        let (address, outcome) = match exec {
            ExecuteOutcome::Pulsed(addr) => {
                gate.last_ok = Some(self.clock.now());
                (Some(addr), ResetOutcome::Ok)
            }
            ExecuteOutcome::NoWiring => (None, ResetOutcome::NoWiring),
            ExecuteOutcome::Nak(addr) => (Some(addr), ResetOutcome::Nak),
            ExecuteOutcome::Timeout(addr) => (Some(addr), ResetOutcome::Timeout),
        };
        drop(gates);
        self.finish(request, address, outcome)
    }

    fn finish(
        &self,
        request: &ResetRequest,
        address: Option<RelayAddress>,
        outcome: ResetOutcome,
    ) -> AuditEvent {
        let event = AuditEvent {
            timestamp: self.clock.wall(self.clock.now()),
            kind: AuditKind::Reset,
            principal: request.principal().to_string(),
            host: request.host().to_string(),
            address,
            outcome,
            reason: request.reason().to_string(),
        };
        // An unwritable audit file must not lose the in-memory event; the
        // daemon surfaces the failure as an operational alarm.
        let _ = self.audit.append(event.clone());
        event
    }

    /// Record a watchdog alarm clear in the same trail.
    pub fn audit_clear(&self, principal: &str, host: &str, granted: bool) -> AuditEvent {
        let event = AuditEvent {
            timestamp: self.clock.wall(self.clock.now()),
            kind: AuditKind::WatchdogClear,
            principal: principal.to_string(),
            host: host.to_string(),
            address: None,
            outcome: if granted {
                ResetOutcome::Ok
            } else {
                ResetOutcome::Denied
            },
            reason: "watchdog alarm clear".to_string(),
        };
        let _ = self.audit.append(event.clone());
        event
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct FakeExecutor {
        wired: Vec<(String, RelayAddress)>,
        pulses: AtomicUsize,
    }

    impl ResetExecutor for FakeExecutor {
        fn execute(&self, host: &str) -> ExecuteOutcome {
            match self.wired.iter().find(|(h, _)| h == host) {
                Some((_, addr)) => {
                    self.pulses.fetch_add(1, Ordering::SeqCst);
                    ExecuteOutcome::Pulsed(*addr)
                }
                None => ExecuteOutcome::NoWiring,
            }
        }
    }

    fn service(clock: &Arc<Clock>) -> (ResetService, Arc<AuditLog>) {
        let registry = Registry::from_sources(
            "console lxb0042 consrv01 5\nreset lxb0042 consrv01 chain0 3 5\n",
            "grant ahorvath reset lxb00*\ngrant watchdog reset *\n",
            "",
        )
        .unwrap();
        let audit = Arc::new(AuditLog::in_memory());
        let executor = Arc::new(FakeExecutor {
            wired: vec![(
                "lxb0042".to_string(),
                RelayAddress::new(3, 5).unwrap(),
            )],
            pulses: AtomicUsize::new(0),
        });
        let svc = ResetService::new(
            Arc::clone(clock),
            Arc::new(RwLock::new(Arc::new(registry))),
            Arc::clone(&audit),
            executor,
            MIN_RESET_INTERVAL,
        );
        (svc, audit)
    }

    fn request(clock: &Clock, principal: &str, host: &str) -> ResetRequest {
        ResetRequest::new(principal, host, "kernel test hang", clock.now()).unwrap()
    }

    #[test]
    fn happy_path_pulses_and_audits_ok() {
        let clock = Clock::manual();
        let (svc, audit) = service(&clock);
        let event = svc.submit(&request(&clock, "ahorvath", "lxb0042"));
        assert_eq!(event.outcome, ResetOutcome::Ok);
        assert_eq!(event.address, RelayAddress::new(3, 5));
        assert_eq!(audit.len(), 1);
    }

    #[test]
    fn unauthorized_is_denied_before_any_action() {
        let clock = Clock::manual();
        let (svc, audit) = service(&clock);
        let event = svc.submit(&request(&clock, "mallory", "lxb0042"));
        assert_eq!(event.outcome, ResetOutcome::Denied);
        assert_eq!(event.address, None);
        assert_eq!(audit.len(), 1);
    }

    #[test]
    fn second_request_within_interval_is_rate_limited() {
        let clock = Clock::manual();
        let (svc, _audit) = service(&clock);
        assert_eq!(
            svc.submit(&request(&clock, "ahorvath", "lxb0042")).outcome,
            ResetOutcome::Ok
        );
        clock.advance(Duration::from_secs(5));
        let again = svc.submit(&request(&clock, "ahorvath", "lxb0042"));
        assert_eq!(again.outcome, ResetOutcome::RateLimited);
        // After the interval the host can be pulsed again.
        clock.advance(Duration::from_secs(26));
        assert_eq!(
            svc.submit(&request(&clock, "ahorvath", "lxb0042")).outcome,
            ResetOutcome::Ok
        );
    }

    #[test]
    fn rate_limiter_is_per_host_not_global() {
        let clock = Clock::manual();
        let registry = Registry::from_sources(
            "reset hostA consrv01 chain0 0 0\nreset hostB consrv01 chain0 0 1\n",
            "grant op reset *\n",
            "",
        )
        .unwrap();
        let audit = Arc::new(AuditLog::in_memory());
        let executor = Arc::new(FakeExecutor {
            wired: vec![
                ("hostA".into(), RelayAddress::new(0, 0).unwrap()),
                ("hostB".into(), RelayAddress::new(0, 1).unwrap()),
            ],
            pulses: AtomicUsize::new(0),
        });
        let svc = ResetService::new(
            Arc::clone(&clock),
            Arc::new(RwLock::new(Arc::new(registry))),
            audit,
            executor,
            MIN_RESET_INTERVAL,
        );
        assert_eq!(
            svc.submit(&request(&clock, "op", "hostA")).outcome,
            ResetOutcome::Ok
        );
        // hostB is unaffected by hostA's fresh pulse.
        assert_eq!(
            svc.submit(&request(&clock, "op", "hostB")).outcome,
            ResetOutcome::Ok
        );
    }

    #[test]
    fn empty_reason_is_rejected_at_construction() {
        let clock = Clock::manual();
        assert!(matches!(
            ResetRequest::new("a", "h", "   ", clock.now()),
            Err(ResetRequestError::EmptyReason)
        ));
    }

    #[test]
    fn console_only_host_reports_no_wiring() {
        let clock = Clock::manual();
        let (svc, _) = service(&clock);
        let registryless = svc.submit(
            &ResetRequest::new("watchdog", "lxb0099", "test", clock.now()).unwrap(),
        );
        assert_eq!(registryless.outcome, ResetOutcome::NoWiring);
    }

    #[test]
    fn audit_query_filters_and_preserves_order() {
        let clock = Clock::manual();
        let (svc, audit) = service(&clock);
        svc.submit(&request(&clock, "ahorvath", "lxb0042"));
        clock.advance(Duration::from_secs(1));
        svc.submit(&request(&clock, "mallory", "lxb0042"));
        clock.advance(Duration::from_secs(1));
        svc.submit(&request(&clock, "ahorvath", "lxb0042"));

        let by_host = audit.query(&AuditFilter {
            host: Some("lxb0042".into()),
            ..Default::default()
        });
        assert_eq!(by_host.len(), 3);
        assert!(by_host.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));

        let by_principal = audit.query(&AuditFilter {
            principal: Some("mallory".into()),
            ..Default::default()
        });
        assert_eq!(by_principal.len(), 1);

        // An empty time range matches nothing.
        let none = audit.query(&AuditFilter {
            from: Some(DateTime::<Utc>::from_timestamp(9_000, 0).unwrap()),
            to: Some(DateTime::<Utc>::from_timestamp(1, 0).unwrap()),
            ..Default::default()
        });
        assert!(none.is_empty());
    }

    #[test]
    fn audit_completeness_under_concurrent_submissions() {
        let clock = Clock::manual();
        let registry = {
            let mut inter = String::new();
            for i in 0..8 {
                inter.push_str(&format!("reset host{i} consrv01 chain0 0 {i}\n"));
            }
            Registry::from_sources(&inter, "grant op reset *\n", "").unwrap()
        };
        let executor = Arc::new(FakeExecutor {
            wired: (0..8)
                .map(|i| {
                    (
                        format!("host{i}"),
                        RelayAddress::new(0, i as u8).unwrap(),
                    )
                })
                .collect(),
            pulses: AtomicUsize::new(0),
        });
        let audit = Arc::new(AuditLog::in_memory());
        let svc = Arc::new(ResetService::new(
            Arc::clone(&clock),
            Arc::new(RwLock::new(Arc::new(registry))),
            Arc::clone(&audit),
            Arc::clone(&executor) as Arc<dyn ResetExecutor>,
            MIN_RESET_INTERVAL,
        ));
        let mut handles = Vec::new();
        for t in 0..4 {
            let svc = Arc::clone(&svc);
            let clock = Arc::clone(&clock);
            handles.push(std::thread::spawn(move || {
                for i in 0..8 {
                    let req = ResetRequest::new(
                        "op",
                        format!("host{i}"),
                        format!("round {t}"),
                        clock.now(),
                    )
                    .unwrap();
                    svc.submit(&req);
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        let ok_events = audit
            .query(&AuditFilter::default())
            .into_iter()
            .filter(|e| e.outcome == ResetOutcome::Ok)
            .count();
        assert_eq!(executor.pulses.load(Ordering::SeqCst), ok_events);
        // Every submission produced exactly one event.
        assert_eq!(audit.len(), 32);
    }

    #[test]
    fn audit_line_round_trips() {
        let event = AuditEvent {
            timestamp: DateTime::<Utc>::from_timestamp(120, 500_000_000).unwrap(),
            kind: AuditKind::Reset,
            principal: "ahorvath".into(),
            host: "lxb0042".into(),
            address: RelayAddress::new(3, 5),
            outcome: ResetOutcome::Ok,
            reason: "hung after \"kernel test\"\n".into(),
        };
        let line = event.render();
        assert!(line.starts_with("1970-01-01T00:02:00.500Z RESET principal=ahorvath"));
        assert!(line.contains("addr=3/5"));
        assert!(line.contains("outcome=ok"));
        assert!(!line[line.find("reason=").unwrap() + 8..line.len() - 1].contains('"'));
        let parsed = AuditEvent::parse(&line).unwrap();
        assert_eq!(parsed, event);
    }
}
