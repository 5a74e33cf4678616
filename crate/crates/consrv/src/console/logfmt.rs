//! Console log line format.
//!
//! One line per console line or flush event:
//!
//! ```text
//! <rfc3339-ms> <host> <port-label> <payload>
//! ```
//!
//! The payload escapes `\` as `\\` and every byte outside printable ASCII
//! as `\xNN`. A chunk that ended with CRLF is written without the
//! terminator and reconstruction re-appends it; any other chunk (size or
//! idle flush, bare LF) is written fully escaped with a single trailing
//! `\` marker, which escaped text can never otherwise end in. Unescaping
//! and concatenating a host's payloads therefore reproduces the port's
//! byte stream exactly.

use chrono::{DateTime, SecondsFormat, Utc};
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// Escape bytes for one payload field.
pub fn escape(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            0x20..=0x7E => out.push(b as char),
            _ => out.push_str(&format!("\\x{b:02x}")),
        }
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bad escape at byte {0}")]
pub struct EscapeError(pub usize);

/// Inverse of [`escape`].
pub fn unescape(s: &str) -> Result<Vec<u8>, EscapeError> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b != b'\\' {
            out.push(b);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'\\') => {
                out.push(b'\\');
                i += 2;
            }
            Some(b'x') => {
                let hi = bytes.get(i + 2).ok_or(EscapeError(i))?;
                let lo = bytes.get(i + 3).ok_or(EscapeError(i))?;
                let hex = |c: u8| (c as char).to_digit(16).ok_or(EscapeError(i));
                out.push((hex(*hi)? * 16 + hex(*lo)?) as u8);
                i += 4;
            }
            _ => return Err(EscapeError(i)),
        }
    }
    Ok(out)
}

/// One flushed chunk of a port's stream, attributed to a host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogLine {
    pub timestamp: DateTime<Utc>,
    pub host: String,
    pub port_label: String,
    /// The exact raw bytes this line accounts for, terminator included.
    pub chunk: Vec<u8>,
}

impl LogLine {
    /// Escaped payload without the line-format framing: a CRLF-terminated
    /// chunk loses its terminator, anything else gains the trailing `\`
    /// marker.
    pub fn payload(&self) -> String {
        match self.chunk.strip_suffix(b"\r\n") {
            Some(body) => escape(body),
            None => {
                let mut p = escape(&self.chunk);
                p.push('\\');
                p
            }
        }
    }

    /// The payload as shown to pattern subscribers: escaped, marker-free.
    pub fn display_text(&self) -> String {
        let body = self.chunk.strip_suffix(b"\r\n").unwrap_or(&self.chunk);
        escape(body)
    }

    pub fn render(&self) -> String {
        format!(
            "{} {} {} {}",
            self.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true),
            self.host,
            self.port_label,
            self.payload()
        )
    }

    pub fn parse(line: &str) -> Result<LogLine, EscapeError> {
        let mut parts = line.splitn(4, ' ');
        let ts = parts.next().ok_or(EscapeError(0))?;
        let host = parts.next().ok_or(EscapeError(0))?.to_string();
        let port_label = parts.next().ok_or(EscapeError(0))?.to_string();
        let payload = parts.next().unwrap_or("");
        let timestamp = DateTime::parse_from_rfc3339(ts)
            .map_err(|_| EscapeError(0))?
            .with_timezone(&Utc);
        let trailing = payload.len() - payload.trim_end_matches('\\').len();
        let chunk = if trailing % 2 == 1 {
            unescape(&payload[..payload.len() - 1])?
        } else {
            let mut c = unescape(payload)?;
            c.extend_from_slice(b"\r\n");
            c
        };
        Ok(LogLine {
            timestamp,
            host,
            port_label,
            chunk,
        })
    }
}

/// Where finished log lines go. Sink failures must not stop console I/O;
/// the daemon reports them as operational alarms and carries on.
pub trait LogSink: Send {
    fn append(&mut self, line: &LogLine) -> std::io::Result<()>;
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Append-only line file.
pub struct FileLogSink {
    writer: std::io::BufWriter<std::fs::File>,
}

impl FileLogSink {
    pub fn create(path: &std::path::Path) -> std::io::Result<FileLogSink> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(FileLogSink {
            writer: std::io::BufWriter::new(file),
        })
    }
}

impl LogSink for FileLogSink {
    fn append(&mut self, line: &LogLine) -> std::io::Result<()> {
        use std::io::Write as _;
        writeln!(self.writer, "{}", line.render())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        use std::io::Write as _;
        self.writer.flush()
    }
}

/// Bounded in-memory sink; clones share the same buffer, so the daemon can
/// own one handle while tests and the `LOG` verb read another.
#[derive(Clone)]
pub struct MemoryLogSink {
    lines: Arc<Mutex<std::collections::VecDeque<LogLine>>>,
    cap: usize,
}

impl MemoryLogSink {
    pub fn new(cap: usize) -> MemoryLogSink {
        MemoryLogSink {
            lines: Arc::new(Mutex::new(std::collections::VecDeque::new())),
            cap,
        }
    }

    pub fn lines(&self) -> Vec<LogLine> {
        self.lines.lock().unwrap().iter().cloned().collect()
    }

    pub fn lines_for_host(&self, host: &str) -> Vec<LogLine> {
        self.lines
            .lock()
            .unwrap()
            .iter()
            .filter(|l| l.host == host)
            .cloned()
            .collect()
    }
}

impl LogSink for MemoryLogSink {
    fn append(&mut self, line: &LogLine) -> std::io::Result<()> {
        let mut lines = self.lines.lock().unwrap();
        if lines.len() == self.cap {
            lines.pop_front();
        }
        lines.push_back(line.clone());
        Ok(())
    }
}
