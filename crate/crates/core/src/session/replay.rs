//! Re-apply a trace's recorded desktop mutations to a fresh desktop,
//! bypassing planning entirely.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::trace::{EventKind, TraceEvent};
use crate::simenv::{Catalog, Desktop, Mutation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub seq: u64,
    pub recorded: String,
    pub replayed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub final_hash: String,
    pub recorded_hash: Option<String>,
    pub matched: bool,
    pub mutations: usize,
    pub first_divergence: Option<Divergence>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplayError {
    #[error("trace was recorded against catalog {recorded}, local catalog is {local}")]
    CatalogMismatch { recorded: String, local: String },
    #[error("trace has no session_started event")]
    MissingHeader,
    #[error("event {seq}: {reason}")]
    BadEvent { seq: u64, reason: String },
}

pub fn recorded_fingerprint(events: &[TraceEvent]) -> Option<String> {
    events
        .iter()
        .find(|e| e.kind == EventKind::SessionStarted)
        .and_then(|e| e.payload.get("catalog_fingerprint"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

/// The last recorded desktop hash: the latest mutation or round summary.
pub fn recorded_final_hash(events: &[TraceEvent]) -> Option<String> {
    events.iter().rev().find_map(|e| match e.kind {
        EventKind::DesktopMutation => e.payload.get("state_hash")?.as_str().map(str::to_string),
        EventKind::RoundFinished => e.payload.pointer("/outcome/final_state_hash")?.as_str().map(str::to_string),
        _ => None,
    })
}

pub fn replay(events: &[TraceEvent], catalog: Arc<Catalog>) -> Result<ReplayReport, ReplayError> {
    let recorded = recorded_fingerprint(events).ok_or(ReplayError::MissingHeader)?;
    let local = catalog.fingerprint();
    if recorded != local {
        return Err(ReplayError::CatalogMismatch { recorded, local });
    }
    let mut desktop = Desktop::new(catalog);
    let mut count = 0;
    let mut first_divergence = None;
    for e in events.iter().filter(|e| e.kind == EventKind::DesktopMutation) {
        let bad = |reason: String| ReplayError::BadEvent { seq: e.seq, reason };
        let mutations: Vec<Mutation> = serde_json::from_value(e.payload.get("mutations").cloned().unwrap_or(Value::Null))
            .map_err(|err| bad(err.to_string()))?;
        for m in &mutations {
            // Failed calls are journaled too; replaying them reproduces
            // whatever partial effect they had.
            let _ = match m {
                Mutation::Launch { app_id } => desktop.launch_app(app_id).map(|_| ()),
                Mutation::Action { app_id, action } => desktop.apply_action(app_id, action).map(|_| ()),
            };
            count += 1;
        }
        let replayed = desktop.state_hash();
        if let Some(want) = e.payload.get("state_hash").and_then(Value::as_str) {
            if first_divergence.is_none() && want != replayed {
                first_divergence = Some(Divergence {
                    seq: e.seq,
                    recorded: want.to_string(),
                    replayed: replayed.clone(),
                });
            }
        }
    }
    let final_hash = desktop.state_hash();
    let recorded_hash = recorded_final_hash(events);
    Ok(ReplayReport {
        matched: recorded_hash.as_deref() == Some(final_hash.as_str()) && first_divergence.is_none(),
        final_hash,
        recorded_hash,
        mutations: count,
        first_divergence,
    })
}
