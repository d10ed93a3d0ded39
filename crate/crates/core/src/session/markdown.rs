//! Markdown execution log rendered from trace events. Output depends only on
//! the events, so the same trace always renders to the same bytes.

use std::fmt::Write;

use serde_json::Value;

use super::trace::{EventKind, TraceEvent};

fn s(v: &Value, key: &str) -> String {
    match v.get(key) {
        Some(Value::String(x)) => x.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

pub fn export_markdown(session_id: &str, events: &[TraceEvent]) -> String {
    let mut out = format!("# Session {session_id}\n");
    for e in events {
        let p = &e.payload;
        match e.kind {
            EventKind::SessionStarted | EventKind::PlannerCall | EventKind::DesktopMutation => {}
            EventKind::RoundStarted => {
                let _ = write!(out, "\n## Round {}\n\nRequest: {}\n", e.round, s(p, "request"));
            }
            EventKind::HostOutput => {
                let o = &p["output"];
                let _ = writeln!(out, "\nHost decision: {}", s(o, "host_state"));
                if let Some(subtasks) = o.pointer("/subtask_plan/subtasks").and_then(Value::as_array) {
                    for (i, t) in subtasks.iter().enumerate() {
                        let _ = writeln!(out, "{}. [{}] {}", i, s(t, "target_app"), s(t, "description"));
                    }
                }
                if let Some(q) = o.get("user_prompt").and_then(Value::as_str) {
                    let _ = writeln!(out, "Question for the user: {q}");
                }
            }
            EventKind::HostTransition => {
                let _ = writeln!(out, "- host: {} -> {} ({})", s(p, "from"), s(p, "to"), s(p, "event"));
            }
            EventKind::AppLaunched => {
                let _ = writeln!(out, "- launched {} (handle {})", s(p, "app_id"), s(p, "handle"));
            }
            EventKind::AgentCreated => {
                let _ = writeln!(out, "- agent for {} ({})", s(p, "app_id"), s(p, "kind"));
            }
            EventKind::AgentsReleased => {
                let _ = writeln!(out, "- released agents: {}", s(p, "apps"));
            }
            EventKind::StepStarted => {
                let _ = write!(
                    out,
                    "\n### Step {} ({})\n\nObservation `{}` at {}\n\nControls:\n",
                    s(p, "step"),
                    s(p, "app_id"),
                    &s(p, "observation_hash")[..12.min(s(p, "observation_hash").len())],
                    s(p, "screenshot_ref")
                );
                for c in p["controls"].as_array().into_iter().flatten() {
                    let _ = writeln!(
                        out,
                        "- [{}] {} {} \"{}\"{}",
                        s(c, "mark"),
                        s(c, "id"),
                        s(c, "type"),
                        s(c, "label"),
                        if c["source"] == "Vision" { " (visual)" } else { "" }
                    );
                }
            }
            EventKind::AppOutput => {
                let o = &p["output"];
                let _ = write!(out, "\nRationale: {}\n\nPlanned ({}):\n", s(o, "rationale"), s(o, "status"));
                for (i, a) in o["batch"].as_array().into_iter().flatten().enumerate() {
                    let _ = writeln!(out, "{}. {}", i + 1, describe(a));
                }
                for n in p["notes"].as_array().into_iter().flatten() {
                    let _ = writeln!(out, "- note: {}", n.as_str().unwrap_or_default());
                }
                out.push('\n');
            }
            EventKind::Safeguard => {
                if p["risky"] == Value::Bool(true) {
                    let _ = writeln!(out, "- safeguard flagged #{} {} (rule {})", s(p, "index"), s(p, "action"), s(p, "matched_rule"));
                }
            }
            EventKind::ValidationFailed => {
                let _ = writeln!(out, "- invalid #{} {}: {}", s(p, "index"), s(p, "description"), s(p, "failure"));
            }
            EventKind::ActionExecuted => {
                let o = &p["outcome"];
                let fb = if o["fell_back"] == Value::Bool(true) { ", via GUI fallback" } else { "" };
                let _ = writeln!(
                    out,
                    "- executed {}: {} ({} executor actions{fb})",
                    s(p, "description"),
                    s(o, "status"),
                    s(o, "executor_actions")
                );
            }
            EventKind::ActionFailed => {
                let _ = writeln!(out, "- failed {}: {}", s(p, "description"), s(p, "error"));
            }
            EventKind::BatchReport => {
                let _ = writeln!(
                    out,
                    "- outcome: {}/{} executed{}",
                    s(p, "executed"),
                    s(p, "batch_size"),
                    if p["halted_early"] == Value::Bool(true) {
                        format!(", halted ({}: {})", s(p, "halt_reason"), s(p, "halt_detail"))
                    } else {
                        String::new()
                    }
                );
            }
            EventKind::Pending => {
                let _ = writeln!(out, "- awaiting confirmation for {}", s(p, "description"));
            }
            EventKind::Confirmation => {
                let auto = if p["auto"] == Value::Bool(true) { " (automatic)" } else { "" };
                let _ = writeln!(out, "- confirmation: {}{auto}", s(p, "decision"));
            }
            EventKind::ActionAborted => {
                let _ = writeln!(out, "- aborted {}", s(p, "description"));
            }
            EventKind::Clarification => {
                if let Some(q) = p.get("prompt").and_then(Value::as_str) {
                    let _ = writeln!(out, "- asked user: {q}");
                }
                if let Some(r) = p.get("reply").and_then(Value::as_str) {
                    let _ = writeln!(out, "- user replied: {r}");
                }
            }
            EventKind::AppTransition => {
                let _ = writeln!(out, "- {}: {} -> {} ({})", s(p, "app_id"), s(p, "from"), s(p, "to"), s(p, "reason"));
            }
            EventKind::BlackboardAppend => {
                let entry = &p["entry"];
                let _ = writeln!(
                    out,
                    "- blackboard #{} {} by {}: {}",
                    s(entry, "seq"),
                    s(entry, "kind"),
                    s(entry, "author"),
                    entry["body"]
                );
            }
            EventKind::RoundFinished => {
                let o = &p["outcome"];
                let _ = write!(
                    out,
                    "\n### Outcome\n\n{}{} after {} steps, {} planner calls, {} executor actions\n\nFinal state `{}`\n",
                    s(o, "status"),
                    o.get("reason").and_then(Value::as_str).map(|r| format!(" ({r})")).unwrap_or_default(),
                    s(o, "steps"),
                    s(o, "planner_calls"),
                    s(o, "executor_actions"),
                    s(o, "final_state_hash")
                );
            }
            EventKind::Evaluation => {
                let r = &p["result"];
                let _ = write!(out, "\n### Evaluation\n\nVerdict: {}\n\n", s(r, "verdict"));
                for c in r["criteria"].as_array().into_iter().flatten() {
                    let _ = writeln!(out, "- {} = {}", s(c, "description"), s(c, "score"));
                }
                let _ = writeln!(out, "\n{}", s(r, "rationale"));
            }
            EventKind::SessionClosed => {
                let _ = write!(out, "\n---\nSession closed: {}\n", s(p, "status"));
            }
        }
    }
    out
}

fn describe(action: &Value) -> String {
    let target = action.get("target").and_then(Value::as_str).unwrap_or("");
    let payload = &action["payload"];
    match action.get("operation").and_then(Value::as_str).unwrap_or("?") {
        "ApiCall" => format!(
            "ApiCall {}({})",
            s(payload, "api"),
            payload.get("args").map(Value::to_string).unwrap_or_else(|| "{}".into())
        ),
        "TypeText" => format!("TypeText {:?} into {target}", s(payload, "text")),
        "Hotkey" => format!("Hotkey {} on {target}", s(payload, "keys")),
        op => format!("{op} {target}"),
    }
}
