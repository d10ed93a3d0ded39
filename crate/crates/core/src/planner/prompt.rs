//! Prompt templates. Rendering is a pure function of the planning input.

use std::fmt::Write;

use super::{AppPlanInput, HostPlanInput, JudgeInput};
use crate::domain::EntryKind;

pub const HOST_CONTRACT: &str = r#"Reply with exactly one JSON object and nothing else:
{
  "subtask_plan": {"subtasks": [{"description": str, "target_app": str, "depends_on": [int]}], "origin_request": str},
  "shell_commands": [{"launch": str}],
  "assigned_app": {"app_id": str, "instance": int} | null,
  "agent_message": str,
  "user_prompt": str | null,
  "host_state": "CONTINUE" | "ASSIGN" | "PENDING" | "FINISH" | "FAIL"
}
depends_on may only reference earlier subtasks. ASSIGN requires assigned_app.
PENDING requires user_prompt and means you need the user to clarify."#;

pub const APP_CONTRACT: &str = r#"Reply with exactly one JSON object and nothing else:
{
  "batch": [{"target": str | null, "operation": "Click" | "TypeText" | "Hotkey" | "ApiCall",
             "payload": {"text"?: str, "keys"?: str, "api"?: str, "args"?: object, "gui_fallback"?: [action]},
             "rationale": str}],
  "rationale": str,
  "status": "CONTINUE" | "PENDING" | "FINISH" | "FAIL",
  "local_state": "CONTINUE" | "PENDING" | "FINISH" | "FAIL",
  "blackboard_updates": [{"kind": "Result" | "Error" | "Insight" | "Metadata", "body": any}]
}
The batch holds up to max_k actions you expect to run in order without new observations.
Targets must be control ids from the list above. Use FINISH once the subtask is done."#;

pub const JUDGE_CONTRACT: &str = r#"Reply with exactly one JSON object and nothing else:
{"criteria": [{"description": str, "score": number in [0,1]}], "rationale": str}"#;

pub fn host_prompt(input: &HostPlanInput) -> String {
    let mut p = String::new();
    p.push_str("You are the host agent of a desktop automation runtime. Decompose the request into subtasks, one per application, and pick the application to work on first.\n\n");
    let _ = writeln!(p, "## Request\n{}\n", input.request);
    p.push_str("## Running applications\n");
    if input.running_apps.is_empty() {
        p.push_str("(none)\n");
    }
    for app in &input.running_apps {
        let _ = writeln!(p, "- {} (handle {})", app.app_id, app.handle);
    }
    let _ = writeln!(p, "\n## Installed applications\n{}\n", input.available_apps.join(", "));
    if !input.prior_rounds.is_empty() {
        p.push_str("## Earlier rounds in this session\n");
        for r in &input.prior_rounds {
            let _ = writeln!(p, "- {r}");
        }
        p.push('\n');
    }
    if let Some(reply) = &input.clarification {
        let _ = writeln!(p, "## User clarification\n{reply}\n");
    }
    for doc in &input.knowledge {
        let _ = writeln!(p, "### Help document: {}\n{}\n", doc.request, doc.guidance);
    }
    let _ = writeln!(p, "## Output\n{HOST_CONTRACT}");
    p
}

pub fn app_prompt(input: &AppPlanInput) -> String {
    let mut p = String::new();
    let _ = writeln!(
        p,
        "You operate the application `{}`. Complete the subtask using its controls or its APIs.\n",
        input.app_id
    );
    let _ = writeln!(p, "## User request\n{}\n", input.round_request);
    let _ = writeln!(p, "## Subtask {}\n{}", input.subtask.subtask_index, input.subtask.description);
    if !input.subtask.agent_message.is_empty() {
        let _ = writeln!(p, "Note from the host: {}", input.subtask.agent_message);
    }
    for line in &input.subtask.prior_round_summary {
        let _ = writeln!(p, "Earlier round: {line}");
    }
    let _ = writeln!(p, "\n## Controls ({} on screen, {})", input.observation.controls.len(), input.observation.screenshot_ref);
    for c in &input.observation.controls {
        let mark = c.som_mark.map_or("-".to_string(), |m| m.to_string());
        let _ = writeln!(
            p,
            "[{mark}] {} {:?} \"{}\"{}{}",
            c.id,
            c.control_type,
            c.label,
            if c.enabled { "" } else { " disabled" },
            if c.confidence.is_some() { " (visual)" } else { "" }
        );
    }
    p.push_str("\n## APIs\n");
    if input.action_space.is_empty() {
        p.push_str("(none)\n");
    }
    for api in &input.action_space {
        let args: Vec<String> = api
            .argument_schema
            .iter()
            .map(|a| format!("{}: {:?}{}", a.name, a.semantic_type, if a.required { "" } else { "?" }))
            .collect();
        let _ = writeln!(p, "- {}({}) {}", api.name, args.join(", "), api.description);
    }
    for doc in &input.knowledge.docs {
        let _ = writeln!(p, "\n### Help document: {}\n{}", doc.request, doc.guidance);
    }
    for ex in &input.knowledge.examples {
        let _ = writeln!(p, "\n### Past execution: {}", ex.task_signature);
        for (i, step) in ex.plan.iter().enumerate() {
            let _ = writeln!(p, "{}. {step}", i + 1);
        }
    }
    let results: Vec<_> = input.blackboard.iter().filter(|e| e.kind == EntryKind::Result).collect();
    if !input.blackboard.is_empty() {
        let _ = writeln!(p, "\n## Blackboard ({} entries, {} results)", input.blackboard.len(), results.len());
        for e in &input.blackboard {
            let _ = writeln!(p, "#{} {:?} by {}: {}", e.seq, e.kind, e.author, e.body);
        }
    }
    if !input.action_log.is_empty() {
        p.push_str("\n## Actions so far\n");
        for entry in &input.action_log {
            let _ = writeln!(p, "- step {} {:?}: {}", entry.step, entry.status, entry.action.describe());
        }
    }
    if !input.history.is_empty() {
        p.push_str("\n## Your recent outputs\n");
        for h in &input.history {
            let _ = writeln!(p, "- {} ({} actions): {}", h.status, h.batch.len(), h.rationale);
        }
    }
    let _ = writeln!(p, "\nmax_k = {}\n\n## Output\n{APP_CONTRACT}", input.max_k);
    p
}

pub fn judge_prompt(input: &JudgeInput) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "Grade whether the request was accomplished.\n\n## Request\n{}\n", input.request);
    p.push_str("## Criteria\n");
    for c in &input.criteria {
        let _ = writeln!(p, "- {c}");
    }
    let _ = writeln!(p, "\n## Transcript\n{}\n\n## Output\n{JUDGE_CONTRACT}", input.transcript);
    p
}

pub fn repair_prompt(original: &str, error: &str) -> String {
    format!("{original}\n\nYour previous reply could not be parsed: {error}\nReply again with only the JSON object.")
}
