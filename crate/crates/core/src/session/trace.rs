//! Session event records. The same records form the JSON-lines trace file and
//! the service's live event stream.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionStarted,
    RoundStarted,
    PlannerCall,
    HostOutput,
    HostTransition,
    AppLaunched,
    AgentCreated,
    AgentsReleased,
    StepStarted,
    AppOutput,
    Safeguard,
    ValidationFailed,
    ActionExecuted,
    ActionFailed,
    BatchReport,
    Pending,
    Clarification,
    Confirmation,
    ActionAborted,
    AppTransition,
    BlackboardAppend,
    DesktopMutation,
    RoundFinished,
    Evaluation,
    SessionClosed,
}

/// `{"seq","ts","kind","session","round","payload"}`; `ts` is the simulated
/// desktop tick at emission, so traces are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub ts: u64,
    pub kind: EventKind,
    pub session: String,
    pub round: u32,
    pub payload: Value,
}

#[derive(Debug, Default)]
struct LogInner {
    events: Vec<TraceEvent>,
    closed: bool,
}

/// Totally ordered, gap-free event log with blocking reads for long-polling.
#[derive(Debug, Default)]
pub struct EventLog {
    inner: Mutex<LogInner>,
    appended: Condvar,
}

impl EventLog {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn push(&self, session: &str, round: u32, ts: u64, kind: EventKind, payload: Value) -> u64 {
        let mut inner = self.inner.lock();
        let seq = inner.events.len() as u64 + 1;
        inner.events.push(TraceEvent {
            seq,
            ts,
            kind,
            session: session.into(),
            round,
            payload,
        });
        drop(inner);
        self.appended.notify_all();
        seq
    }

    /// Events with `seq > since`.
    pub fn since(&self, since: u64) -> Vec<TraceEvent> {
        let inner = self.inner.lock();
        inner.events.iter().skip(since as usize).cloned().collect()
    }

    /// Like [`since`](Self::since) but waits up to `timeout` for new events.
    pub fn wait_since(&self, since: u64, timeout: Duration) -> Vec<TraceEvent> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock();
        while inner.events.len() as u64 <= since && !inner.closed {
            if self.appended.wait_until(&mut inner, deadline).timed_out() {
                break;
            }
        }
        inner.events.iter().skip(since as usize).cloned().collect()
    }

    pub fn snapshot(&self) -> Vec<TraceEvent> {
        self.since(0)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Wake any waiting readers; later pushes are still accepted.
    pub fn close(&self) {
        self.inner.lock().closed = true;
        self.appended.notify_all();
    }
}

/// Session- and round-scoped handle for emitting into an [`EventLog`].
#[derive(Debug, Clone)]
pub struct Recorder {
    log: Arc<EventLog>,
    session: String,
    round: u32,
}

impl Recorder {
    pub fn new(log: Arc<EventLog>, session: impl Into<String>, round: u32) -> Self {
        Self {
            log,
            session: session.into(),
            round,
        }
    }

    pub fn emit(&self, ts: u64, kind: EventKind, payload: Value) -> u64 {
        tracing::debug!(session = %self.session, round = self.round, ?kind, "event");
        self.log.push(&self.session, self.round, ts, kind, payload)
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn log(&self) -> &Arc<EventLog> {
        &self.log
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path} line {line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

pub fn write_trace(path: impl AsRef<Path>, events: &[TraceEvent]) -> Result<(), TraceError> {
    let path = path.as_ref();
    let err = |e: std::io::Error| TraceError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut f = fs::File::create(path).map_err(err)?;
    f.write_all(to_jsonl(events).as_bytes()).map_err(err)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceEvent>, TraceError> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| TraceError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(events)
}
