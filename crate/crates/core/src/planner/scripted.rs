//! Fixture-driven backend. Responses are a pure function of the request's
//! role, trigger, attempt number, and structured input.
//!
//! App entries either list canned `responses` (indexed by the subtask's step
//! count) or a `plan` the backend follows: progress is the number of executed
//! or aborted actions in the agent's log; each reply carries the remaining
//! steps up to and including the next barrier, picking for each step the
//! first option whose target is on screen.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AppPlanInput, BackendError, HostPlanInput, PlannerBackend, PlannerRequest, PlannerRole};
use crate::appagent::{ActionStatus, BlackboardUpdate};
use crate::blackboard::Handoff;
use crate::domain::{AppState, EntryKind, PlannedAction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostScript {
    pub trigger: String,
    /// Matches only when the user's clarification equals this text.
    #[serde(default)]
    pub reply: Option<String>,
    pub response: Value,
    #[serde(default)]
    pub malformed_attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FullStep {
    #[serde(default)]
    action: Option<PlannedAction>,
    #[serde(default)]
    options: Vec<PlannedAction>,
    #[serde(default)]
    barrier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum StepWire {
    Full(FullStep),
    Bare(PlannedAction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "StepWire")]
pub struct PlanStep {
    pub options: Vec<PlannedAction>,
    /// The backend stops a reply after this step and waits for a new observation.
    pub barrier: bool,
}

impl From<StepWire> for PlanStep {
    fn from(w: StepWire) -> Self {
        match w {
            StepWire::Full(f) => PlanStep {
                options: f.action.into_iter().chain(f.options).collect(),
                barrier: f.barrier,
            },
            StepWire::Bare(a) => PlanStep {
                options: vec![a],
                barrier: false,
            },
        }
    }
}

impl PlanStep {
    pub fn single(action: PlannedAction) -> Self {
        Self {
            options: vec![action],
            barrier: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    #[serde(default = "finish")]
    pub status: AppState,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub blackboard_updates: Vec<BlackboardUpdate>,
}

fn finish() -> AppState {
    AppState::Finish
}

impl Default for Completion {
    fn default() -> Self {
        Self {
            status: AppState::Finish,
            rationale: String::new(),
            blackboard_updates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppScript {
    pub trigger: String,
    #[serde(default)]
    pub app_id: Option<String>,
    #[serde(default)]
    pub plan: Vec<PlanStep>,
    #[serde(default)]
    pub responses: Vec<Value>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub on_complete: Completion,
    #[serde(default)]
    pub malformed_attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScript {
    pub trigger: String,
    pub response: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub host: Vec<HostScript>,
    #[serde(default)]
    pub app: Vec<AppScript>,
    #[serde(default)]
    pub judge: Vec<JudgeScript>,
}

impl Script {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    script: Script,
}

const MALFORMED: &str = "I think the next step is to click the button.";

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self { script }
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    fn host(&self, req: &PlannerRequest) -> Result<String, BackendError> {
        let input: HostPlanInput = decode(&req.input)?;
        let entry = self
            .script
            .host
            .iter()
            .find(|h| h.trigger == input.request && h.reply == input.clarification)
            .ok_or_else(|| missing("host", &input.request))?;
        if req.attempt < entry.malformed_attempts {
            return Ok(MALFORMED.into());
        }
        Ok(entry.response.to_string())
    }

    fn app(&self, req: &PlannerRequest) -> Result<String, BackendError> {
        let input: AppPlanInput = decode(&req.input)?;
        let entry = self
            .script
            .app
            .iter()
            .find(|a| a.trigger == input.subtask.description && a.app_id.as_ref().is_none_or(|id| *id == input.app_id))
            .ok_or_else(|| missing("app", &input.subtask.description))?;
        if req.attempt < entry.malformed_attempts {
            return Ok(MALFORMED.into());
        }
        let reply = if entry.responses.is_empty() {
            follow(entry, &input)
        } else {
            entry.responses[input.subtask_step.min(entry.responses.len() - 1)].clone()
        };
        Ok(substitute(reply, &input).to_string())
    }

    fn judge(&self, req: &PlannerRequest) -> Result<String, BackendError> {
        self.script
            .judge
            .iter()
            .find(|j| j.trigger == req.trigger)
            .map(|j| j.response.to_string())
            .ok_or_else(|| missing("judge", &req.trigger))
    }
}

impl PlannerBackend for ScriptedBackend {
    fn complete(&self, req: &PlannerRequest) -> Result<String, BackendError> {
        match req.role {
            PlannerRole::Host => self.host(req),
            PlannerRole::App => self.app(req),
            PlannerRole::Judge => self.judge(req),
        }
    }
}

fn decode<T: serde::de::DeserializeOwned>(input: &Value) -> Result<T, BackendError> {
    serde_json::from_value(input.clone()).map_err(|e| BackendError::Unavailable(format!("scripted backend got an unexpected input: {e}")))
}

fn missing(role: &str, trigger: &str) -> BackendError {
    BackendError::Unavailable(format!("no scripted {role} response for `{trigger}`"))
}

fn follow(entry: &AppScript, input: &AppPlanInput) -> Value {
    let progress = input
        .action_log
        .iter()
        .filter(|e| matches!(e.status, ActionStatus::Executed | ActionStatus::Aborted))
        .count();
    let remaining = entry.plan.get(progress..).unwrap_or_default();
    if remaining.is_empty() {
        let c = &entry.on_complete;
        return json!({
            "batch": [],
            "rationale": if c.rationale.is_empty() { "all planned steps are done".to_string() } else { c.rationale.clone() },
            "status": c.status,
            "blackboard_updates": c.blackboard_updates,
        });
    }
    let mut batch = Vec::new();
    let mut reached_end = true;
    for (i, step) in remaining.iter().enumerate() {
        let pick = step
            .options
            .iter()
            .find(|a| a.target.as_deref().is_none_or(|t| input.observation.control(t).is_some()))
            .or(step.options.first());
        if let Some(a) = pick {
            batch.push(a.clone());
        }
        if step.barrier && i + 1 < remaining.len() {
            reached_end = false;
            break;
        }
    }
    // Completion rides on the final batch unless it has to report results,
    // which are only known after execution.
    let inline_finish = reached_end && entry.on_complete.blackboard_updates.is_empty();
    json!({
        "batch": batch,
        "rationale": if entry.rationale.is_empty() { format!("steps {}..{} of the plan", progress + 1, progress + batch.len()) } else { entry.rationale.clone() },
        "status": if inline_finish { entry.on_complete.status } else { AppState::Continue },
    })
}

/// Replace `{bb.key}` with the newest handoff payload field and
/// `{last_result.key}` with the latest executed action's result field.
fn substitute(value: Value, input: &AppPlanInput) -> Value {
    match value {
        Value::String(s) => substitute_str(&s, input),
        Value::Array(items) => Value::Array(items.into_iter().map(|v| substitute(v, input)).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, substitute(v, input))).collect()),
        other => other,
    }
}

fn lookup(name: &str, input: &AppPlanInput) -> Option<Value> {
    if let Some(key) = name.strip_prefix("bb.") {
        return input
            .blackboard
            .iter()
            .rev()
            .filter(|e| e.kind == EntryKind::Result)
            .filter_map(|e| serde_json::from_value::<Handoff>(e.body.clone()).ok())
            .find_map(|h| h.payload.get(key).cloned());
    }
    if let Some(key) = name.strip_prefix("last_result.") {
        return input.action_log.iter().rev().find_map(|e| e.result.as_ref()?.get(key).cloned());
    }
    None
}

fn substitute_str(s: &str, input: &AppPlanInput) -> Value {
    if let Some(name) = s.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
        if !name.contains(['{', '}']) {
            if let Some(v) = lookup(name, input) {
                return v;
            }
        }
    }
    let mut out = String::new();
    let mut rest = s;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start..].find('}') else { break };
        let name = &rest[start + 1..start + len];
        out.push_str(&rest[..start]);
        match lookup(name, input) {
            Some(Value::String(v)) => out.push_str(&v),
            Some(v) => out.push_str(&v.to_string()),
            None => out.push_str(&rest[start..=start + len]),
        }
        rest = &rest[start + len + 1..];
    }
    out.push_str(rest);
    Value::String(out)
}
