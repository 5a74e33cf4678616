//! The central information store.
//!
//! Three line-oriented text files describe the whole farm; `#` starts a
//! comment and fields are whitespace-separated:
//!
//! ```text
//! interconnections.conf   console <host> <server_id> <port-index>
//!                         reset <host> <server_id> <device> <box> <relay>
//! grants.conf             grant <principal> <console|console-ro|reset|admin> <host-glob>
//! keys.conf               key <principal> <key-id> <base64-public-key>
//! ```
//!
//! A loaded [`Registry`] is an immutable snapshot: lookups are cheap and
//! concurrent, mutations build a new snapshot, and [`Registry::save`]
//! rewrites the store atomically (write-temp-then-rename per file).
//! Detection results come back as a [`DetectionReport`] file
//! (`detected <server_id> <rfc3339>` header, then `port <index>
//! <host|unknown>` lines) and are merged conservatively: a mismatch with an
//! existing record is reported as a conflict, never silently rewritten, and
//! reset wiring is never modified because it cannot be auto-detected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use base64::Engine as _;
use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

use crate::relay::RelayAddress;

pub const INTERCONNECTIONS_FILE: &str = "interconnections.conf";
pub const GRANTS_FILE: &str = "grants.conf";
pub const KEYS_FILE: &str = "keys.conf";

/// Hostname reserved by the detection-report grammar.
pub const UNKNOWN_TOKEN: &str = "unknown";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{file}:{line}: {reason}")]
    Parse {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{file}:{line}: {detail}")]
    Conflict {
        file: String,
        line: usize,
        detail: String,
    },
    #[error("unknown host: {0}")]
    UnknownHost(String),
    #[error("host {0} has no reset wiring")]
    NoResetWiring(String),
    #[error("unknown server: {0}")]
    UnknownServer(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Actions a grant can confer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    ConsoleReadOnly,
    Console,
    Reset,
    Admin,
}

impl Action {
    pub fn token(&self) -> &'static str {
        match self {
            Action::Console => "console",
            Action::ConsoleReadOnly => "console-ro",
            Action::Reset => "reset",
            Action::Admin => "admin",
        }
    }

    pub fn parse(token: &str) -> Option<Action> {
        match token {
            "console" => Some(Action::Console),
            "console-ro" => Some(Action::ConsoleReadOnly),
            "reset" => Some(Action::Reset),
            "admin" => Some(Action::Admin),
            _ => None,
        }
    }

    /// Whether a grant of `self` satisfies a request for `requested`.
    /// Admin covers everything; Console and Reset each cover read-only
    /// console access but not one another.
    pub fn allows(&self, requested: Action) -> bool {
        match self {
            Action::Admin => true,
            Action::Console => matches!(requested, Action::Console | Action::ConsoleReadOnly),
            Action::Reset => matches!(requested, Action::Reset | Action::ConsoleReadOnly),
            Action::ConsoleReadOnly => requested == Action::ConsoleReadOnly,
        }
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

/// One authorization rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    pub principal: String,
    pub action: Action,
    pub host_pattern: String,
}

/// The single active public key of a principal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrincipalKey {
    pub principal: String,
    pub key_id: String,
    pub public_key: Vec<u8>,
}

/// Where a host's reset contact hangs: the reset server, the serial device
/// driving the chain, and the contact address on it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResetWiring {
    pub server_id: String,
    pub device: String,
    pub address: RelayAddress,
}

/// Everything the store knows about one host.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HostRecord {
    pub console: Option<(String, u16)>,
    pub reset: Option<ResetWiring>,
}

/// Immutable snapshot of the store.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    hosts: BTreeMap<String, HostRecord>,
    grants: Vec<Grant>,
    keys: BTreeMap<String, PrincipalKey>,
}

fn glob_to_regex(pattern: &str) -> regex::Regex {
    let mut re = String::from("^");
    for ch in pattern.chars() {
        match ch {
            '*' => re.push_str(".*"),
            '?' => re.push('.'),
            c => re.push_str(&regex::escape(&c.to_string())),
        }
    }
    re.push('$');
    regex::Regex::new(&re).expect("escaped glob is always a valid regex")
}

pub fn glob_matches(pattern: &str, host: &str) -> bool {
    glob_to_regex(pattern).is_match(host)
}

fn check_name(file: &str, line: usize, what: &str, token: &str) -> Result<(), RegistryError> {
    if token == UNKNOWN_TOKEN && what == "host" {
        return Err(RegistryError::Parse {
            file: file.into(),
            line,
            reason: format!("host name `{UNKNOWN_TOKEN}` is reserved"),
        });
    }
    Ok(())
}

/// Iterates meaningful lines of a config file as (line_no, fields).
struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        LineReader {
            lines: text.lines().enumerate(),
        }
    }
}

impl<'a> Iterator for LineReader<'a> {
    type Item = (usize, Vec<&'a str>);
    fn next(&mut self) -> Option<Self::Item> {
        for (idx, raw) in self.lines.by_ref() {
            let body = raw.split('#').next().unwrap_or("");
            let fields: Vec<&str> = body.split_whitespace().collect();
            if !fields.is_empty() {
                return Some((idx + 1, fields));
            }
        }
        None
    }
}

impl Registry {
    /// Load the store from a directory holding the three files (any may be
    /// empty; a missing file is treated as empty).
    pub fn load(dir: &Path) -> Result<Registry, RegistryError> {
        let read = |name: &str| -> Result<String, RegistryError> {
            match std::fs::read_to_string(dir.join(name)) {
                Ok(s) => Ok(s),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
                Err(e) => Err(e.into()),
            }
        };
        Registry::from_sources(
            &read(INTERCONNECTIONS_FILE)?,
            &read(GRANTS_FILE)?,
            &read(KEYS_FILE)?,
        )
    }

    /// Parse the three file bodies directly.
    pub fn from_sources(
        interconnections: &str,
        grants: &str,
        keys: &str,
    ) -> Result<Registry, RegistryError> {
        let mut reg = Registry::default();
        reg.parse_interconnections(INTERCONNECTIONS_FILE, interconnections)?;
        reg.parse_grants(GRANTS_FILE, grants)?;
        reg.parse_keys(KEYS_FILE, keys)?;
        Ok(reg)
    }

    fn parse_interconnections(&mut self, file: &str, text: &str) -> Result<(), RegistryError> {
        // Claim maps let uniqueness errors name both offenders.
        let mut console_claims: BTreeMap<(String, u16), String> = BTreeMap::new();
        let mut reset_claims: BTreeMap<(String, String, u8), String> = BTreeMap::new();
        for (line, fields) in LineReader::new(text) {
            let parse_err = |reason: String| RegistryError::Parse {
                file: file.into(),
                line,
                reason,
            };
            match fields[0] {
                "console" => {
                    if fields.len() != 4 {
                        return Err(parse_err(
                            "expected: console <host> <server_id> <port-index>".into(),
                        ));
                    }
                    let (host, server) = (fields[1], fields[2]);
                    check_name(file, line, "host", host)?;
                    let port: u16 = fields[3]
                        .parse()
                        .map_err(|_| parse_err(format!("bad port index `{}`", fields[3])))?;
                    let record = self.hosts.entry(host.to_string()).or_default();
                    if record.console.is_some() {
                        return Err(RegistryError::Conflict {
                            file: file.into(),
                            line,
                            detail: format!("host {host} already has a console record"),
                        });
                    }
                    if let Some(other) = console_claims.get(&(server.to_string(), port)) {
                        return Err(RegistryError::Conflict {
                            file: file.into(),
                            line,
                            detail: format!(
                                "console port {server}:{port} claimed by both {other} and {host}"
                            ),
                        });
                    }
                    record.console = Some((server.to_string(), port));
                    console_claims.insert((server.to_string(), port), host.to_string());
                }
                "reset" => {
                    if fields.len() != 6 {
                        return Err(parse_err(
                            "expected: reset <host> <server_id> <device> <box> <relay>".into(),
                        ));
                    }
                    let (host, server, device) = (fields[1], fields[2], fields[3]);
                    check_name(file, line, "host", host)?;
                    let box_index: u8 = fields[4]
                        .parse()
                        .map_err(|_| parse_err(format!("bad box `{}`", fields[4])))?;
                    let relay: u8 = fields[5]
                        .parse()
                        .map_err(|_| parse_err(format!("bad relay `{}`", fields[5])))?;
                    let address = RelayAddress::new(box_index, relay).ok_or_else(|| {
                        parse_err(format!(
                            "relay address {box_index}/{relay} out of range (box and relay are 0..=7)"
                        ))
                    })?;
                    let record = self.hosts.entry(host.to_string()).or_default();
                    if record.reset.is_some() {
                        return Err(RegistryError::Conflict {
                            file: file.into(),
                            line,
                            detail: format!("host {host} already has a reset record"),
                        });
                    }
                    let claim = (server.to_string(), device.to_string(), address.flat());
                    if let Some(other) = reset_claims.get(&claim) {
                        return Err(RegistryError::Conflict {
                            file: file.into(),
                            line,
                            detail: format!(
                                "reset contact {server}:{device}:{address} claimed by both {other} and {host}"
                            ),
                        });
                    }
                    record.reset = Some(ResetWiring {
                        server_id: server.to_string(),
                        device: device.to_string(),
                        address,
                    });
                    reset_claims.insert(claim, host.to_string());
                }
                other => {
                    return Err(parse_err(format!("unknown record kind `{other}`")));
                }
            }
        }
        Ok(())
    }

    fn parse_grants(&mut self, file: &str, text: &str) -> Result<(), RegistryError> {
        for (line, fields) in LineReader::new(text) {
            let parse_err = |reason: String| RegistryError::Parse {
                file: file.into(),
                line,
                reason,
            };
            if fields[0] != "grant" {
                return Err(parse_err(format!("unknown record kind `{}`", fields[0])));
            }
            if fields.len() != 4 {
                return Err(parse_err(
                    "expected: grant <principal> <action> <host-glob>".into(),
                ));
            }
            let action = Action::parse(fields[2]).ok_or_else(|| {
                parse_err(format!(
                    "unknown action `{}` (console|console-ro|reset|admin)",
                    fields[2]
                ))
            })?;
            self.grants.push(Grant {
                principal: fields[1].to_string(),
                action,
                host_pattern: fields[3].to_string(),
            });
        }
        Ok(())
    }

    fn parse_keys(&mut self, file: &str, text: &str) -> Result<(), RegistryError> {
        for (line, fields) in LineReader::new(text) {
            let parse_err = |reason: String| RegistryError::Parse {
                file: file.into(),
                line,
                reason,
            };
            if fields[0] != "key" {
                return Err(parse_err(format!("unknown record kind `{}`", fields[0])));
            }
            if fields.len() != 4 {
                return Err(parse_err(
                    "expected: key <principal> <key-id> <base64-public-key>".into(),
                ));
            }
            let principal = fields[1].to_string();
            let public_key = base64::engine::general_purpose::STANDARD
                .decode(fields[3])
                .map_err(|e| parse_err(format!("bad base64 key: {e}")))?;
            if self.keys.contains_key(&principal) {
                return Err(RegistryError::Conflict {
                    file: file.into(),
                    line,
                    detail: format!(
                        "principal {principal} already has an active key (exactly one allowed)"
                    ),
                });
            }
            self.keys.insert(
                principal.clone(),
                PrincipalKey {
                    principal,
                    key_id: fields[2].to_string(),
                    public_key,
                },
            );
        }
        Ok(())
    }

    pub fn lookup_console(&self, host: &str) -> Result<(String, u16), RegistryError> {
        self.hosts
            .get(host)
            .and_then(|r| r.console.clone())
            .ok_or_else(|| RegistryError::UnknownHost(host.to_string()))
    }

    pub fn lookup_reset(&self, host: &str) -> Result<ResetWiring, RegistryError> {
        let record = self
            .hosts
            .get(host)
            .ok_or_else(|| RegistryError::UnknownHost(host.to_string()))?;
        record
            .reset
            .clone()
            .ok_or_else(|| RegistryError::NoResetWiring(host.to_string()))
    }

    /// True iff some grant lets `principal` perform `action` on `host`.
    pub fn authorize(&self, principal: &str, action: Action, host: &str) -> bool {
        self.grants.iter().any(|g| {
            g.principal == principal
                && g.action.allows(action)
                && glob_matches(&g.host_pattern, host)
        })
    }

    pub fn key_for(&self, principal: &str) -> Option<&PrincipalKey> {
        self.keys.get(principal)
    }

    pub fn hosts(&self) -> impl Iterator<Item = (&String, &HostRecord)> {
        self.hosts.iter()
    }

    pub fn host_record(&self, host: &str) -> Option<&HostRecord> {
        self.hosts.get(host)
    }

    pub fn grants(&self) -> &[Grant] {
        &self.grants
    }

    pub fn keys(&self) -> impl Iterator<Item = &PrincipalKey> {
        self.keys.values()
    }

    /// Every server id referenced by a console or reset record.
    pub fn servers(&self) -> std::collections::BTreeSet<String> {
        let mut out = std::collections::BTreeSet::new();
        for record in self.hosts.values() {
            if let Some((server, _)) = &record.console {
                out.insert(server.clone());
            }
            if let Some(reset) = &record.reset {
                out.insert(reset.server_id.clone());
            }
        }
        out
    }

    /// Port-index → host map for one console server.
    pub fn console_map(&self, server_id: &str) -> BTreeMap<u16, String> {
        let mut out = BTreeMap::new();
        for (host, record) in &self.hosts {
            if let Some((server, port)) = &record.console {
                if server == server_id {
                    out.insert(*port, host.clone());
                }
            }
        }
        out
    }

    fn hosts_on_server(&self, server_id: &str) -> Vec<&str> {
        self.hosts
            .iter()
            .filter(|(_, r)| {
                r.console.as_ref().is_some_and(|(s, _)| s == server_id)
                    || r.reset.as_ref().is_some_and(|w| w.server_id == server_id)
            })
            .map(|(h, _)| h.as_str())
            .collect()
    }

    /// Render the three file bodies, sorted and byte-deterministic.
    pub fn render(&self) -> RenderedStore {
        let mut inter = String::new();
        for (host, record) in &self.hosts {
            if let Some((server, port)) = &record.console {
                writeln!(inter, "console {host} {server} {port}").unwrap();
            }
        }
        for (host, record) in &self.hosts {
            if let Some(w) = &record.reset {
                writeln!(
                    inter,
                    "reset {host} {} {} {} {}",
                    w.server_id,
                    w.device,
                    w.address.box_index(),
                    w.address.relay()
                )
                .unwrap();
            }
        }
        let mut grants_sorted = self.grants.clone();
        grants_sorted.sort_by(|a, b| {
            (&a.principal, a.action, &a.host_pattern)
                .cmp(&(&b.principal, b.action, &b.host_pattern))
        });
        let mut grants = String::new();
        for g in &grants_sorted {
            writeln!(grants, "grant {} {} {}", g.principal, g.action, g.host_pattern).unwrap();
        }
        let mut keys = String::new();
        for k in self.keys.values() {
            writeln!(
                keys,
                "key {} {} {}",
                k.principal,
                k.key_id,
                base64::engine::general_purpose::STANDARD.encode(&k.public_key)
            )
            .unwrap();
        }
        RenderedStore {
            interconnections: inter,
            grants,
            keys,
        }
    }

    /// Atomically rewrite the store directory (temp files then rename).
    pub fn save(&self, dir: &Path) -> Result<(), RegistryError> {
        std::fs::create_dir_all(dir)?;
        let rendered = self.render();
        write_store_files(
            dir,
            &rendered.interconnections,
            &rendered.grants,
            &rendered.keys,
        )?;
        Ok(())
    }

    /// The per-server config bundle: interconnections on that server, the
    /// grants that can match its hosts, and the keys of the granted
    /// principals. The bundle is itself loadable and byte-deterministic.
    pub fn bundle_for_server(&self, server_id: &str) -> Result<ConfigBundle, RegistryError> {
        let hosts = self.hosts_on_server(server_id);
        if hosts.is_empty() {
            return Err(RegistryError::UnknownServer(server_id.to_string()));
        }
        let mut sub = Registry::default();
        for host in &hosts {
            let full = &self.hosts[*host];
            let mut record = HostRecord::default();
            if let Some((server, port)) = &full.console {
                if server == server_id {
                    record.console = Some((server.clone(), *port));
                }
            }
            if let Some(w) = &full.reset {
                if w.server_id == server_id {
                    record.reset = Some(w.clone());
                }
            }
            sub.hosts.insert((*host).to_string(), record);
        }
        for grant in &self.grants {
            if hosts.iter().any(|h| glob_matches(&grant.host_pattern, h)) {
                sub.grants.push(grant.clone());
            }
        }
        for grant in &sub.grants {
            if let Some(key) = self.keys.get(&grant.principal) {
                sub.keys.insert(grant.principal.clone(), key.clone());
            }
        }
        let rendered = sub.render();
        Ok(ConfigBundle {
            server_id: server_id.to_string(),
            interconnections: rendered.interconnections,
            grants: rendered.grants,
            keys: rendered.keys,
        })
    }

    /// Merge a detection report. Agreeing entries change nothing, new ports
    /// gain console records, mismatches become conflicts (the record is
    /// kept), `unknown` never deletes, and reset wiring is never touched.
    /// Merging the same report twice yields the same registry and the same
    /// conflicts.
    pub fn merge_detection(
        &self,
        report: &DetectionReport,
    ) -> Result<(Registry, Vec<DetectionConflict>), RegistryError> {
        if !self.servers().contains(&report.server_id) {
            return Err(RegistryError::UnknownServer(report.server_id.clone()));
        }
        let mut updated = self.clone();
        let mut conflicts = Vec::new();
        let port_map = self.console_map(&report.server_id);
        for (port, detected) in &report.entries {
            let Some(detected) = detected else {
                continue;
            };
            match port_map.get(port) {
                Some(existing) if existing == detected => {}
                Some(existing) => conflicts.push(DetectionConflict::MappingMismatch {
                    port: *port,
                    recorded: existing.clone(),
                    detected: detected.clone(),
                }),
                None => {
                    // New port. Only adoptable if the detected host is not
                    // already wired to some other console.
                    match self.hosts.get(detected).and_then(|r| r.console.clone()) {
                        Some(elsewhere) => conflicts.push(DetectionConflict::HostElsewhere {
                            port: *port,
                            detected: detected.clone(),
                            recorded_console: elsewhere,
                        }),
                        None => {
                            updated.hosts.entry(detected.clone()).or_default().console =
                                Some((report.server_id.clone(), *port));
                        }
                    }
                }
            }
        }
        Ok((updated, conflicts))
    }

    /// Explicit operator acknowledgment of one detection conflict: rewrite
    /// the console mapping of `port` to the detected host. The displaced
    /// host keeps its reset wiring but loses the console record.
    pub fn acknowledge_detected(
        &self,
        server_id: &str,
        port: u16,
        detected: &str,
    ) -> Result<Registry, RegistryError> {
        if !self.servers().contains(server_id) {
            return Err(RegistryError::UnknownServer(server_id.to_string()));
        }
        let mut updated = self.clone();
        if let Some(old) = self.console_map(server_id).get(&port) {
            if let Some(rec) = updated.hosts.get_mut(old) {
                rec.console = None;
            }
        }
        // Detach the detected host's previous console, if any.
        if let Some(rec) = updated.hosts.get_mut(detected) {
            rec.console = None;
        }
        updated.hosts.entry(detected.to_string()).or_default().console =
            Some((server_id.to_string(), port));
        Ok(updated)
    }

    /// Snapshot with one more grant.
    pub fn with_grant(&self, grant: Grant) -> Registry {
        let mut updated = self.clone();
        if !updated.grants.contains(&grant) {
            updated.grants.push(grant);
        }
        updated
    }

    /// Snapshot with every matching grant removed.
    pub fn without_grant(&self, principal: &str, action: Action, pattern: &str) -> Registry {
        let mut updated = self.clone();
        updated.grants.retain(|g| {
            !(g.principal == principal && g.action == action && g.host_pattern == pattern)
        });
        updated
    }

    /// Snapshot with `key` as the principal's single active key.
    pub fn with_key(&self, key: PrincipalKey) -> Registry {
        let mut updated = self.clone();
        updated.keys.insert(key.principal.clone(), key);
        updated
    }
}

fn write_store_files(
    dir: &Path,
    interconnections: &str,
    grants: &str,
    keys: &str,
) -> std::io::Result<()> {
    for (name, body) in [
        (INTERCONNECTIONS_FILE, interconnections),
        (GRANTS_FILE, grants),
        (KEYS_FILE, keys),
    ] {
        let tmp = dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, dir.join(name))?;
    }
    Ok(())
}

/// Rendered store file bodies.
pub struct RenderedStore {
    pub interconnections: String,
    pub grants: String,
    pub keys: String,
}

/// A per-server bundle, loadable by [`Registry::load`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigBundle {
    pub server_id: String,
    pub interconnections: String,
    pub grants: String,
    pub keys: String,
}

impl ConfigBundle {
    pub fn write_to(&self, dir: &Path) -> Result<(), RegistryError> {
        std::fs::create_dir_all(dir)?;
        write_store_files(dir, &self.interconnections, &self.grants, &self.keys)?;
        Ok(())
    }

    pub fn load(&self) -> Result<Registry, RegistryError> {
        Registry::from_sources(&self.interconnections, &self.grants, &self.keys)
    }
}

/// Outcome of probing one console server's ports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionReport {
    pub server_id: String,
    pub generated_at: DateTime<Utc>,
    /// Port index → detected host, `None` for no answer.
    pub entries: Vec<(u16, Option<String>)>,
}

impl DetectionReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "detected {} {}\n",
            self.server_id,
            self.generated_at.to_rfc3339_opts(SecondsFormat::Millis, true)
        );
        for (port, host) in &self.entries {
            writeln!(out, "port {port} {}", host.as_deref().unwrap_or(UNKNOWN_TOKEN)).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<DetectionReport, RegistryError> {
        let file = "<detection-report>";
        let mut lines = LineReader::new(text);
        let (line, header) = lines.next().ok_or_else(|| RegistryError::Parse {
            file: file.into(),
            line: 0,
            reason: "empty report".into(),
        })?;
        if header.len() != 3 || header[0] != "detected" {
            return Err(RegistryError::Parse {
                file: file.into(),
                line,
                reason: "expected: detected <server_id> <rfc3339>".into(),
            });
        }
        let generated_at = DateTime::parse_from_rfc3339(header[2])
            .map_err(|e| RegistryError::Parse {
                file: file.into(),
                line,
                reason: format!("bad timestamp: {e}"),
            })?
            .with_timezone(&Utc);
        let mut entries = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (line, fields) in lines {
            if fields.len() != 3 || fields[0] != "port" {
                return Err(RegistryError::Parse {
                    file: file.into(),
                    line,
                    reason: "expected: port <index> <host|unknown>".into(),
                });
            }
            let port: u16 = fields[1].parse().map_err(|_| RegistryError::Parse {
                file: file.into(),
                line,
                reason: format!("bad port index `{}`", fields[1]),
            })?;
            if !seen.insert(port) {
                return Err(RegistryError::Parse {
                    file: file.into(),
                    line,
                    reason: format!("duplicate port {port} in report"),
                });
            }
            let host = if fields[2] == UNKNOWN_TOKEN {
                None
            } else {
                Some(fields[2].to_string())
            };
            entries.push((port, host));
        }
        Ok(DetectionReport {
            server_id: header[1].to_string(),
            generated_at,
            entries,
        })
    }
}

/// A detection result that contradicts the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectionConflict {
    /// The port is recorded for one host but answered as another.
    MappingMismatch {
        port: u16,
        recorded: String,
        detected: String,
    },
    /// An unmapped port answered as a host already recorded on a different
    /// console.
    HostElsewhere {
        port: u16,
        detected: String,
        recorded_console: (String, u16),
    },
}

impl DetectionConflict {
    pub fn port(&self) -> u16 {
        match self {
            DetectionConflict::MappingMismatch { port, .. } => *port,
            DetectionConflict::HostElsewhere { port, .. } => *port,
        }
    }
}

impl std::fmt::Display for DetectionConflict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DetectionConflict::MappingMismatch {
                port,
                recorded,
                detected,
            } => write!(f, "conflict {port} was {recorded} saw {detected}"),
            DetectionConflict::HostElsewhere {
                port,
                detected,
                recorded_console,
            } => write!(
                f,
                "conflict {port} saw {detected} already-on {}:{}",
                recorded_console.0, recorded_console.1
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> Registry {
        Registry::from_sources(
            "# farm wiring\n\
             console lxb0042 consrv01 5\n\
             console lxb0043 consrv01 6\n\
             console lxb0090 consrv02 0\n\
             reset lxb0042 consrv01 chain0 3 5\n\
             reset lxb0090 consrv02 chain0 0 1\n",
            "grant ahorvath reset lxb00*\n\
             grant ahorvath console lxb00*\n\
             grant eleo admin *\n\
             grant watcher console-ro *\n",
            "key ahorvath 11aa22bb AAECAw==\n",
        )
        .unwrap()
    }

    #[test]
    fn console_line_parses_into_a_record() {
        let reg = fixture();
        assert_eq!(
            reg.lookup_console("lxb0042").unwrap(),
            ("consrv01".to_string(), 5)
        );
    }

    #[test]
    fn duplicate_console_claim_names_both_hosts() {
        let err = Registry::from_sources(
            "console lxb0042 consrv01 5\nconsole lxb0099 consrv01 5\n",
            "",
            "",
        )
        .unwrap_err();
        let text = err.to_string();
        assert!(text.contains("lxb0042") && text.contains("lxb0099"), "{text}");
        assert!(text.contains(":2:"), "names the offending line: {text}");
    }

    #[test]
    fn grant_line_parses() {
        let reg = fixture();
        assert!(reg.grants().contains(&Grant {
            principal: "ahorvath".into(),
            action: Action::Reset,
            host_pattern: "lxb00*".into(),
        }));
    }

    #[test]
    fn unknown_host_and_missing_wiring() {
        let reg = fixture();
        assert!(matches!(
            reg.lookup_console("nosuch"),
            Err(RegistryError::UnknownHost(_))
        ));
        // Console-only host: console lookup works, reset lookup reports
        // missing wiring.
        assert!(reg.lookup_console("lxb0043").is_ok());
        assert!(matches!(
            reg.lookup_reset("lxb0043"),
            Err(RegistryError::NoResetWiring(_))
        ));
    }

    #[test]
    fn reset_line_parses_with_relay_address() {
        let reg = fixture();
        let w = reg.lookup_reset("lxb0042").unwrap();
        assert_eq!(w.server_id, "consrv01");
        assert_eq!(w.device, "chain0");
        assert_eq!(w.address, RelayAddress::new(3, 5).unwrap());
    }

    #[test]
    fn out_of_range_box_is_a_parse_error() {
        let err =
            Registry::from_sources("reset lxb0001 consrv01 chain0 8 0\n", "", "").unwrap_err();
        assert!(matches!(err, RegistryError::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn authorize_follows_the_action_order() {
        let reg = fixture();
        // Console implies read-only console.
        assert!(reg.authorize("ahorvath", Action::ConsoleReadOnly, "lxb0042"));
        // Read-only grant does not imply read-write.
        assert!(!reg.authorize("watcher", Action::Console, "lxb0042"));
        // Console does not imply reset and vice versa.
        let console_only = Registry::from_sources("", "grant a console lxb00*\n", "").unwrap();
        assert!(!console_only.authorize("a", Action::Reset, "lxb0042"));
        let reset_only = Registry::from_sources("", "grant b reset lxb00*\n", "").unwrap();
        assert!(!reset_only.authorize("b", Action::Console, "lxb0042"));
        // Admin covers every action on every host.
        assert!(reg.authorize("eleo", Action::Reset, "anything-at-all"));
        assert!(reg.authorize("eleo", Action::Console, "lxb0090"));
        // Glob boundaries.
        assert!(!reg.authorize("ahorvath", Action::Reset, "lxc0042"));
    }

    #[test]
    fn bundle_is_restricted_and_loadable() {
        let reg = fixture();
        let bundle = reg.bundle_for_server("consrv01").unwrap();
        assert!(bundle.interconnections.contains("lxb0042"));
        assert!(!bundle.interconnections.contains("lxb0090"));
        let sub = bundle.load().unwrap();
        assert_eq!(sub.console_map("consrv01").len(), 2);
        // Bundles regenerate byte-identically from an unchanged registry.
        let again = reg.bundle_for_server("consrv01").unwrap();
        assert_eq!(bundle, again);
    }

    #[test]
    fn bundle_round_trips_for_every_server() {
        let reg = fixture();
        for server in reg.servers() {
            let bundle = reg.bundle_for_server(&server).unwrap();
            bundle.load().expect("bundle must be loadable");
        }
    }

    #[test]
    fn unknown_server_has_no_bundle() {
        let reg = fixture();
        assert!(matches!(
            reg.bundle_for_server("consrv09"),
            Err(RegistryError::UnknownServer(_))
        ));
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let reg = fixture();
        reg.save(dir.path()).unwrap();
        let loaded = Registry::load(dir.path()).unwrap();
        assert_eq!(
            loaded.render().interconnections,
            reg.render().interconnections
        );
        assert_eq!(loaded.render().grants, reg.render().grants);
        assert_eq!(loaded.render().keys, reg.render().keys);
        // No temp droppings left behind.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .contains("tmp")
            })
            .collect();
        assert!(leftovers.is_empty());
    }

    fn report(server: &str, entries: &[(u16, Option<&str>)]) -> DetectionReport {
        DetectionReport {
            server_id: server.into(),
            generated_at: DateTime::<Utc>::from_timestamp(0, 0).unwrap(),
            entries: entries
                .iter()
                .map(|(p, h)| (*p, h.map(|s| s.to_string())))
                .collect(),
        }
    }

    #[test]
    fn agreeing_report_changes_nothing() {
        let reg = fixture();
        let (updated, conflicts) = reg
            .merge_detection(&report("consrv01", &[(5, Some("lxb0042"))]))
            .unwrap();
        assert!(conflicts.is_empty());
        assert_eq!(
            updated.render().interconnections,
            reg.render().interconnections
        );
    }

    #[test]
    fn mismatch_becomes_a_conflict_and_record_stays() {
        let reg = fixture();
        let (updated, conflicts) = reg
            .merge_detection(&report("consrv01", &[(5, Some("lxb0099"))]))
            .unwrap();
        assert_eq!(
            conflicts,
            vec![DetectionConflict::MappingMismatch {
                port: 5,
                recorded: "lxb0042".into(),
                detected: "lxb0099".into(),
            }]
        );
        assert_eq!(
            updated.lookup_console("lxb0042").unwrap(),
            ("consrv01".into(), 5)
        );
    }

    #[test]
    fn unknown_entries_never_delete_and_new_ports_are_added() {
        let reg = fixture();
        let (updated, conflicts) = reg
            .merge_detection(&report("consrv01", &[(5, None), (9, Some("lxb0777"))]))
            .unwrap();
        assert!(conflicts.is_empty());
        assert!(updated.lookup_console("lxb0042").is_ok());
        assert_eq!(
            updated.lookup_console("lxb0777").unwrap(),
            ("consrv01".into(), 9)
        );
    }

    #[test]
    fn permuted_ports_yield_exactly_the_diff_conflicts() {
        // 50-port ground truth on one server.
        let mut inter = String::new();
        for port in 0..50u16 {
            inter.push_str(&format!("console node{port:02} consrv01 {port}\n"));
        }
        let reg = Registry::from_sources(&inter, "", "").unwrap();

        // Report fixture: truth with a 3-cycle applied to ports 7, 21, 40.
        let truth = reg.console_map("consrv01");
        let mut entries: Vec<(u16, Option<String>)> =
            truth.iter().map(|(p, h)| (*p, Some(h.clone()))).collect();
        let cycle = [7u16, 21, 40];
        let moved: Vec<String> = cycle.iter().map(|p| truth[p].clone()).collect();
        for (i, p) in cycle.iter().enumerate() {
            entries[*p as usize] = (*p, Some(moved[(i + 1) % 3].clone()));
        }
        let rep = DetectionReport {
            server_id: "consrv01".into(),
            generated_at: DateTime::<Utc>::from_timestamp(0, 0).unwrap(),
            entries,
        };

        // Independent oracle: brute-force set diff between report and truth.
        let expected: Vec<u16> = rep
            .entries
            .iter()
            .filter(|(p, h)| truth.get(p) != h.as_ref())
            .map(|(p, _)| *p)
            .collect();
        assert_eq!(expected, vec![7, 21, 40]);

        let (updated, conflicts) = reg.merge_detection(&rep).unwrap();
        let got: Vec<u16> = conflicts.iter().map(|c| c.port()).collect();
        assert_eq!(got, expected);
        // Zero silent rewrites.
        assert_eq!(
            updated.render().interconnections,
            reg.render().interconnections
        );

        // Idempotence: merging the same report twice is identical.
        let (updated2, conflicts2) = updated.merge_detection(&rep).unwrap();
        assert_eq!(conflicts2, conflicts);
        assert_eq!(
            updated2.render().interconnections,
            updated.render().interconnections
        );
    }

    #[test]
    fn merge_never_touches_reset_records() {
        let reg = fixture();
        let (updated, _) = reg
            .merge_detection(&report(
                "consrv01",
                &[(5, Some("lxb0099")), (12, Some("lxb0042"))],
            ))
            .unwrap();
        for (host, record) in reg.hosts() {
            assert_eq!(updated.host_record(host).unwrap().reset, record.reset);
        }
    }

    #[test]
    fn acknowledge_rewrites_one_mapping_explicitly() {
        let reg = fixture();
        let updated = reg.acknowledge_detected("consrv01", 5, "lxb0099").unwrap();
        assert_eq!(
            updated.lookup_console("lxb0099").unwrap(),
            ("consrv01".into(), 5)
        );
        assert!(matches!(
            updated.lookup_console("lxb0042"),
            Err(RegistryError::UnknownHost(_))
        ));
        // Reset wiring of the displaced host survives.
        assert!(updated.lookup_reset("lxb0042").is_ok());
    }

    #[test]
    fn detection_report_render_parse_round_trip() {
        let rep = report("consrv01", &[(0, Some("lxb0001")), (1, None)]);
        let parsed = DetectionReport::parse(&rep.render()).unwrap();
        assert_eq!(parsed, rep);
    }

    #[test]
    fn reserved_host_name_is_rejected() {
        let err = Registry::from_sources("console unknown consrv01 0\n", "", "").unwrap_err();
        assert!(matches!(err, RegistryError::Parse { .. }));
    }

    proptest! {
        // Adding a grant never revokes anything.
        #[test]
        fn authorize_is_monotone(
            principal in "[a-z]{3,8}",
            pattern in "[a-z*?]{1,6}",
            action_idx in 0usize..4,
            host in "[a-z]{3,8}",
        ) {
            let reg = fixture();
            let actions = [Action::ConsoleReadOnly, Action::Console, Action::Reset, Action::Admin];
            let new_grant = Grant {
                principal: principal.clone(),
                action: actions[action_idx],
                host_pattern: pattern,
            };
            let grown = reg.with_grant(new_grant);
            for p in ["ahorvath", "eleo", "watcher", principal.as_str()] {
                for a in actions {
                    for h in ["lxb0042", "lxb0090", host.as_str()] {
                        if reg.authorize(p, a, h) {
                            prop_assert!(grown.authorize(p, a, h));
                        }
                    }
                }
            }
        }

        #[test]
        fn merge_is_idempotent_for_random_reports(
            seeds in proptest::collection::vec((0u16..12, proptest::option::of(0u8..6)), 0..12)
        ) {
            let mut inter = String::new();
            for port in 0..6u16 {
                inter.push_str(&format!("console node{port} consrv01 {port}\n"));
            }
            let reg = Registry::from_sources(&inter, "", "").unwrap();
            let mut seen = std::collections::BTreeSet::new();
            let entries: Vec<(u16, Option<String>)> = seeds
                .into_iter()
                .filter(|(p, _)| seen.insert(*p))
                .map(|(p, h)| (p, h.map(|i| format!("node{i}"))))
                .collect();
            let rep = DetectionReport {
                server_id: "consrv01".into(),
                generated_at: DateTime::<Utc>::from_timestamp(0, 0).unwrap(),
                entries,
            };
            let (once, c1) = reg.merge_detection(&rep).unwrap();
            let (twice, c2) = once.merge_detection(&rep).unwrap();
            prop_assert_eq!(c1, c2);
            prop_assert_eq!(once.render().interconnections, twice.render().interconnections);
        }
    }
}
