//! Structured, line-delimited event log shared by routes, agents and services.
//!
//! Each record renders as `ts route_id event exchange_id detail`, with `-`
//! standing in for an empty field. `ts` is milliseconds since the log was
//! created.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

pub const RECEIVE: &str = "receive";
pub const SEND: &str = "send";
pub const ERROR: &str = "error";
pub const FILTERED: &str = "filtered";
pub const STARTED: &str = "started";
pub const SUSPENDED: &str = "suspended";
pub const RESUMED: &str = "resumed";
pub const STOPPED: &str = "stopped";
pub const DEAD_LETTER: &str = "dead_letter";
pub const FORWARD: &str = "forward";
pub const PERCEPT: &str = "percept";
pub const DELIVER: &str = "deliver";
pub const ACTION: &str = "action";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub ts_ms: u64,
    pub route_id: String,
    pub event: String,
    pub exchange_id: String,
    pub detail: String,
}

impl Event {
    /// Parses one rendered line back into a record.
    pub fn parse_line(line: &str) -> Option<Event> {
        let mut parts = line.splitn(5, ' ');
        let ts_ms = parts.next()?.parse().ok()?;
        let field = |s: &str| {
            if s == "-" {
                String::new()
            } else {
                s.to_owned()
            }
        };
        let route_id = field(parts.next()?);
        let event = field(parts.next()?);
        let exchange_id = field(parts.next()?);
        let detail = parts.next().map(field).unwrap_or_default();
        Some(Event {
            ts_ms,
            route_id,
            event,
            exchange_id,
            detail,
        })
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dash = |s: &str| {
            if s.is_empty() {
                "-".to_owned()
            } else {
                s.replace('\n', "\\n")
            }
        };
        write!(
            f,
            "{} {} {} {} {}",
            self.ts_ms,
            dash(&self.route_id),
            dash(&self.event),
            dash(&self.exchange_id),
            dash(&self.detail)
        )
    }
}

struct Inner {
    start: Instant,
    records: Mutex<Records>,
    changed: Condvar,
}

struct Records {
    events: Vec<Event>,
    last: Instant,
    sink: Option<BufWriter<File>>,
}

#[derive(Clone)]
pub struct EventLog {
    inner: Arc<Inner>,
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventLog")
            .field("len", &self.len())
            .finish()
    }
}

impl EventLog {
    pub fn new() -> Self {
        let now = Instant::now();
        EventLog {
            inner: Arc::new(Inner {
                start: now,
                records: Mutex::new(Records {
                    events: Vec::new(),
                    last: now,
                    sink: None,
                }),
                changed: Condvar::new(),
            }),
        }
    }

    /// Also appends every record to `path` as it is written.
    pub fn with_file(path: &Path) -> io::Result<Self> {
        let log = Self::new();
        log.inner.records.lock().sink = Some(BufWriter::new(File::create(path)?));
        Ok(log)
    }

    pub fn record(
        &self,
        route_id: &str,
        event: &str,
        exchange_id: &str,
        detail: impl Into<String>,
    ) {
        let now = Instant::now();
        let ev = Event {
            ts_ms: now.duration_since(self.inner.start).as_millis() as u64,
            route_id: route_id.to_owned(),
            event: event.to_owned(),
            exchange_id: exchange_id.to_owned(),
            detail: detail.into(),
        };
        tracing::debug!(target: "eip_agents::events", "{ev}");
        let mut rec = self.inner.records.lock();
        if let Some(sink) = rec.sink.as_mut() {
            if let Err(e) = writeln!(sink, "{ev}") {
                tracing::warn!("event log write failed: {e}");
            }
        }
        rec.events.push(ev);
        rec.last = now;
        drop(rec);
        self.inner.changed.notify_all();
    }

    pub fn flush(&self) -> io::Result<()> {
        match self.inner.records.lock().sink.as_mut() {
            Some(sink) => sink.flush(),
            None => Ok(()),
        }
    }

    pub fn events(&self) -> Vec<Event> {
        self.inner.records.lock().events.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.records.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of_kind(&self, event: &str) -> Vec<Event> {
        self.inner
            .records
            .lock()
            .events
            .iter()
            .filter(|e| e.event == event)
            .cloned()
            .collect()
    }

    /// Time since the last record (or since creation).
    pub fn idle_for(&self) -> Duration {
        self.inner.records.lock().last.elapsed()
    }

    pub fn elapsed(&self) -> Duration {
        self.inner.start.elapsed()
    }

    /// Blocks until `pred` holds over the records or `timeout` passes.
    pub fn wait_until(&self, timeout: Duration, mut pred: impl FnMut(&[Event]) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        let mut rec = self.inner.records.lock();
        loop {
            if pred(&rec.events) {
                return true;
            }
            if self
                .inner
                .changed
                .wait_until(&mut rec, deadline)
                .timed_out()
            {
                return pred(&rec.events);
            }
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for ev in self.inner.records.lock().events.iter() {
            writeln!(w, "{ev}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let log = EventLog::new();
        log.record("mail-poll", RECEIVE, "ID-a-1", "from mail:to.share");
        log.record("", SUSPENDED, "", "");
        let lines: Vec<String> = log.events().iter().map(ToString::to_string).collect();
        assert!(lines[0].ends_with(" mail-poll receive ID-a-1 from mail:to.share"));
        assert!(lines[1].ends_with(" - suspended - -"));
        for (line, ev) in lines.iter().zip(log.events()) {
            assert_eq!(Event::parse_line(line).unwrap(), ev);
        }
    }

    #[test]
    fn wait_until_sees_later_records() {
        let log = EventLog::new();
        let writer = log.clone();
        let t = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            writer.record("r", FORWARD, "x", "to=a");
        });
        assert!(log.wait_until(Duration::from_secs(2), |evs| evs
            .iter()
            .any(|e| e.event == FORWARD)));
        t.join().unwrap();
        assert!(!log.wait_until(Duration::from_millis(10), |evs| evs.len() > 5));
    }

    #[test]
    fn file_sink() {
        let dir = std::env::temp_dir().join(format!("eip-events-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("events.log");
        let log = EventLog::with_file(&path).unwrap();
        log.record("r1", SEND, "ID-1", "to direct:b");
        log.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            Event::parse_line(text.trim()).unwrap().detail,
            "to direct:b"
        );
        std::fs::remove_dir_all(&dir).ok();
    }
}
