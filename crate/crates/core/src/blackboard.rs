//! Append-only shared memory for agents within one session.

use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{BlackboardEntry, EntryKind};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("session is closed; blackboard no longer accepts entries")]
pub struct SessionClosed;

/// Payload carried by `Result` entries to move data between subtasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handoff {
    pub produced_by_subtask: usize,
    pub payload: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntryFilter {
    pub kind: Option<EntryKind>,
    pub author: Option<String>,
    pub round: Option<u32>,
}

impl EntryFilter {
    pub fn kind(kind: EntryKind) -> Self {
        Self {
            kind: Some(kind),
            ..Self::default()
        }
    }

    fn accepts(&self, e: &BlackboardEntry) -> bool {
        self.kind.is_none_or(|k| k == e.kind)
            && self.author.as_ref().is_none_or(|a| a == &e.author)
            && self.round.is_none_or(|r| r == e.round)
    }
}

#[derive(Debug, Default)]
struct Inner {
    entries: Vec<Arc<BlackboardEntry>>,
    closed: bool,
}

/// Cheap to clone; clones share the same board.
#[derive(Debug, Clone, Default)]
pub struct Blackboard {
    inner: Arc<RwLock<Inner>>,
}

impl Blackboard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append an entry; `seq` is assigned under the write lock so sequence
    /// numbers stay dense under concurrent appenders.
    pub fn append(&self, body: Value, author: &str, kind: EntryKind, round: u32) -> Result<BlackboardEntry, SessionClosed> {
        let mut inner = self.inner.write();
        if inner.closed {
            return Err(SessionClosed);
        }
        let entry = BlackboardEntry {
            seq: inner.entries.len() as u64 + 1,
            author: author.into(),
            kind,
            body,
            round,
        };
        inner.entries.push(Arc::new(entry.clone()));
        Ok(entry)
    }

    pub fn read(&self, filter: &EntryFilter) -> Vec<BlackboardEntry> {
        self.inner
            .read()
            .entries
            .iter()
            .filter(|e| filter.accepts(e))
            .map(|e| (**e).clone())
            .collect()
    }

    pub fn all(&self) -> Vec<BlackboardEntry> {
        self.read(&EntryFilter::default())
    }

    pub fn len(&self) -> usize {
        self.inner.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn close(&self) {
        self.inner.write().closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.inner.read().closed
    }

    /// Latest `Result` handoff payloads, newest first.
    pub fn handoffs(&self) -> Vec<Handoff> {
        self.read(&EntryFilter::kind(EntryKind::Result))
            .into_iter()
            .rev()
            .filter_map(|e| serde_json::from_value(e.body).ok())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn seq_starts_at_one_in_arrival_order() {
        let bb = Blackboard::new();
        let a = bb.append(json!({"x": 1}), "host", EntryKind::Metadata, 1).unwrap();
        let b = bb.append(json!({"x": 2}), "app:sheetapp", EntryKind::Result, 1).unwrap();
        assert_eq!((a.seq, b.seq), (1, 2));
        assert_eq!(bb.all(), vec![a, b]);
    }

    #[test]
    fn closed_board_rejects() {
        let bb = Blackboard::new();
        bb.close();
        assert_eq!(bb.append(json!(null), "x", EntryKind::Insight, 1), Err(SessionClosed));
    }

    #[test]
    fn filters() {
        let bb = Blackboard::new();
        bb.append(json!(1), "a", EntryKind::Result, 1).unwrap();
        bb.append(json!(2), "b", EntryKind::Insight, 2).unwrap();
        assert!(bb.read(&EntryFilter::kind(EntryKind::Error)).is_empty());
        assert_eq!(bb.read(&EntryFilter { round: Some(2), ..Default::default() }).len(), 1);
        assert_eq!(bb.read(&EntryFilter { author: Some("a".into()), ..Default::default() })[0].body, json!(1));
        assert_eq!(bb.all(), bb.all());
    }

    #[test]
    fn handoffs_newest_first() {
        let bb = Blackboard::new();
        bb.append(json!({"produced_by_subtask": 0, "payload": "old"}), "a", EntryKind::Result, 1).unwrap();
        bb.append(json!("not a handoff"), "a", EntryKind::Result, 1).unwrap();
        bb.append(json!({"produced_by_subtask": 1, "payload": "new"}), "a", EntryKind::Result, 1).unwrap();
        let h = bb.handoffs();
        assert_eq!(h.len(), 2);
        assert_eq!(h[0].payload, json!("new"));
    }
}
