//! The reasoning-backend abstraction: prompt assembly, strict JSON output
//! parsing with a single repair attempt, and post-processing of batches.

mod http;
pub mod prompt;
mod scripted;

use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{AppScript, Completion, HostScript, JudgeScript, PlanStep, Script, ScriptedBackend};

use crate::appagent::{ActionLogEntry, AppAgentOutput, BlackboardUpdate, SubtaskHandoff};
use crate::domain::{AppState, BlackboardEntry, Observation, PlannedAction};
use crate::hostagent::HostOutput;
use crate::knowledge::{HelpDoc, Retrieved, DEFAULT_DOCS_PER_QUERY, DEFAULT_EXPERIENCE_PER_QUERY};
use crate::puppeteer::ApiSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerRole {
    Host,
    App,
    Judge,
}

/// One backend request. `input` is the canonical serialization of the
/// structured planning input the prompt was rendered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRequest {
    pub role: PlannerRole,
    pub trigger: String,
    pub attempt: usize,
    pub prompt: String,
    pub input: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("{0}")]
    Unavailable(String),
}

pub trait PlannerBackend: Send + Sync {
    fn complete(&self, request: &PlannerRequest) -> Result<String, BackendError>;
}

/// A backend that is always down.
#[derive(Debug, Clone, Default)]
pub struct UnavailableBackend;

impl PlannerBackend for UnavailableBackend {
    fn complete(&self, _request: &PlannerRequest) -> Result<String, BackendError> {
        Err(BackendError::Unavailable("planner backend is not configured".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlannerError {
    #[error("planner backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("planner output malformed after repair: {0}")]
    Malformed(String),
}

/// Every backend request is logged with what came back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: PlannerRole,
    pub trigger: String,
    pub attempt: usize,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Planned<T> {
    pub value: T,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanFailure {
    pub error: PlannerError,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunningApp {
    pub app_id: String,
    pub handle: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostPlanInput {
    pub request: String,
    pub running_apps: Vec<RunningApp>,
    pub available_apps: Vec<String>,
    pub prior_rounds: Vec<String>,
    #[serde(default)]
    pub clarification: Option<String>,
    #[serde(default)]
    pub knowledge: Vec<HelpDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppPlanInput {
    pub round_request: String,
    pub subtask: SubtaskHandoff,
    pub app_id: String,
    pub observation: Observation,
    pub action_space: Vec<ApiSpec>,
    pub knowledge: Retrieved,
    pub blackboard: Vec<BlackboardEntry>,
    pub history: Vec<AppAgentOutput>,
    pub action_log: Vec<ActionLogEntry>,
    pub max_k: usize,
    /// Round-wide step number, 1-based.
    pub step: usize,
    /// Planning calls already made for this subtask.
    pub subtask_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeInput {
    pub request: String,
    pub criteria: Vec<String>,
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub description: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutput {
    pub criteria: Vec<JudgeScore>,
    #[serde(default)]
    pub rationale: String,
}

/// App output after post-processing, with notes on anything dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppPlan {
    pub output: AppAgentOutput,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub docs: usize,
    pub examples: usize,
}

impl Default for PromptBudget {
    fn default() -> Self {
        Self {
            docs: DEFAULT_DOCS_PER_QUERY,
            examples: DEFAULT_EXPERIENCE_PER_QUERY,
        }
    }
}

#[derive(Deserialize)]
struct AppWire {
    #[serde(default)]
    batch: Vec<PlannedAction>,
    #[serde(default)]
    rationale: String,
    status: AppState,
    #[serde(default)]
    local_state: Option<AppState>,
    #[serde(default)]
    blackboard_updates: Vec<BlackboardUpdate>,
}

pub struct Planner {
    backend: Arc<dyn PlannerBackend>,
    budget: PromptBudget,
}

impl Planner {
    pub fn new(backend: Arc<dyn PlannerBackend>) -> Self {
        Self {
            backend,
            budget: PromptBudget::default(),
        }
    }

    pub fn with_budget(mut self, budget: PromptBudget) -> Self {
        self.budget = budget;
        self
    }

    pub fn budget(&self) -> PromptBudget {
        self.budget
    }

    pub fn plan_host(&self, input: &HostPlanInput) -> Result<Planned<HostOutput>, PlanFailure> {
        let mut input = input.clone();
        input.knowledge.truncate(self.budget.docs);
        let prompt = prompt::host_prompt(&input);
        self.call(PlannerRole::Host, &input.request, prompt, &input, |text| {
            let out: HostOutput = parse_strict(text)?;
            out.validate()?;
            Ok(out)
        })
    }

    pub fn plan_app(&self, input: &AppPlanInput) -> Result<Planned<AppPlan>, PlanFailure> {
        let mut input = input.clone();
        input.knowledge.docs.truncate(self.budget.docs);
        input.knowledge.examples.truncate(self.budget.examples);
        let prompt = prompt::app_prompt(&input);
        let planned = self.call(PlannerRole::App, &input.subtask.description, prompt, &input, |text| {
            let wire: AppWire = parse_strict(text)?;
            for (i, a) in wire.batch.iter().enumerate() {
                a.check_shape().map_err(|e| format!("batch[{i}]: {e}"))?;
            }
            Ok(wire)
        })?;
        Ok(Planned {
            value: post_process(planned.value, &input.observation, input.max_k),
            calls: planned.calls,
        })
    }

    pub fn judge(&self, input: &JudgeInput) -> Result<Planned<JudgeOutput>, PlanFailure> {
        let prompt = prompt::judge_prompt(input);
        self.call(PlannerRole::Judge, &input.request, prompt, input, |text| {
            let out: JudgeOutput = parse_strict(text)?;
            if let Some(bad) = out.criteria.iter().find(|c| !(0.0..=1.0).contains(&c.score)) {
                return Err(format!("score {} for `{}` is outside [0,1]", bad.score, bad.description));
            }
            Ok(out)
        })
    }

    /// Request, parse, and on a parse failure re-prompt once with the error.
    fn call<I: Serialize, T>(
        &self,
        role: PlannerRole,
        trigger: &str,
        prompt: String,
        input: &I,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Planned<T>, PlanFailure> {
        let input = serde_json::to_value(input).expect("planner input serializes");
        let mut calls = Vec::new();
        let mut current = prompt.clone();
        for attempt in 0..2 {
            let request = PlannerRequest {
                role,
                trigger: trigger.to_string(),
                attempt,
                prompt: current.clone(),
                input: input.clone(),
            };
            let text = match self.backend.complete(&request) {
                Ok(t) => t,
                Err(BackendError::Unavailable(reason)) => {
                    calls.push(record(&request, None, Some(reason.clone())));
                    return Err(PlanFailure {
                        error: PlannerError::BackendUnavailable(reason),
                        calls,
                    });
                }
            };
            match parse(&text) {
                Ok(value) => {
                    calls.push(record(&request, Some(text), None));
                    return Ok(Planned { value, calls });
                }
                Err(reason) => {
                    tracing::debug!(?role, attempt, %reason, "planner output rejected");
                    calls.push(record(&request, Some(text), Some(reason.clone())));
                    if attempt == 1 {
                        return Err(PlanFailure {
                            error: PlannerError::Malformed(reason),
                            calls,
                        });
                    }
                    current = prompt::repair_prompt(&prompt, &reason);
                }
            }
        }
        unreachable!("loop returns on the second attempt")
    }
}

fn record(request: &PlannerRequest, response: Option<String>, error: Option<String>) -> CallRecord {
    CallRecord {
        role: request.role,
        trigger: request.trigger.clone(),
        attempt: request.attempt,
        prompt: request.prompt.clone(),
        response,
        error,
    }
}

fn parse_strict<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    serde_json::from_str(text.trim()).map_err(|e| e.to_string())
}

/// Cap the batch at `max_k`, then cut it at the first action whose target is
/// not in the observation. Completion claims do not survive a cut.
fn post_process(wire: AppWire, obs: &Observation, max_k: usize) -> AppPlan {
    let mut notes = Vec::new();
    let mut batch = wire.batch;
    let mut status = wire.status;
    if batch.len() > max_k {
        notes.push(format!("batch of {} truncated to max_k={max_k}", batch.len()));
        batch.truncate(max_k);
        if status == AppState::Finish {
            status = AppState::Continue;
        }
    }
    if let Some(bad) = batch
        .iter()
        .position(|a| a.target.as_deref().is_some_and(|t| obs.control(t).is_none()))
    {
        notes.push(format!(
            "action {} references unknown control `{}`; dropped it and {} following action(s)",
            bad,
            batch[bad].target.as_deref().unwrap_or_default(),
            batch.len() - bad - 1
        ));
        batch.truncate(bad);
        if status == AppState::Finish {
            status = AppState::Continue;
        }
    }
    AppPlan {
        output: AppAgentOutput {
            batch,
            rationale: wire.rationale,
            local_state: if status == wire.status { wire.local_state.unwrap_or(status) } else { status },
            status,
            blackboard_updates: wire.blackboard_updates,
        },
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{BoundingBox, Control, ControlSource};
    use parking_lot::Mutex;

    struct Canned(Mutex<Vec<Result<String, BackendError>>>);

    impl PlannerBackend for Canned {
        fn complete(&self, _r: &PlannerRequest) -> Result<String, BackendError> {
            self.0.lock().remove(0)
        }
    }

    fn canned(replies: Vec<Result<&str, &str>>) -> Planner {
        let replies = replies
            .into_iter()
            .map(|r| r.map(str::to_string).map_err(|e| BackendError::Unavailable(e.into())))
            .collect();
        Planner::new(Arc::new(Canned(Mutex::new(replies))))
    }

    fn obs(ids: &[&str]) -> Observation {
        Observation {
            app_id: "slideapp".into(),
            screenshot_ref: "slideapp@1".into(),
            controls: ids
                .iter()
                .map(|id| Control {
                    id: id.to_string(),
                    source: ControlSource::Accessibility,
                    control_type: "Button".into(),
                    label: id.to_string(),
                    bbox: BoundingBox::new(0, 0, 10, 10).unwrap(),
                    visible: true,
                    enabled: true,
                    som_mark: None,
                    confidence: None,
                    stale: false,
                })
                .collect(),
            timestamp: 1,
        }
    }

    fn app_input(ids: &[&str], max_k: usize) -> AppPlanInput {
        AppPlanInput {
            round_request: "r".into(),
            subtask: SubtaskHandoff {
                subtask_index: 0,
                description: "s".into(),
                agent_message: String::new(),
                blackboard_ref: 0,
                prior_round_summary: vec![],
            },
            app_id: "slideapp".into(),
            observation: obs(ids),
            action_space: vec![],
            knowledge: Retrieved::default(),
            blackboard: vec![],
            history: vec![],
            action_log: vec![],
            max_k,
            step: 1,
            subtask_step: 0,
        }
    }

    const THREE: &str = r#"{"batch":[{"target":"a","operation":"Click"},{"target":"xyz","operation":"Click"},{"target":"b","operation":"Click"}],"status":"FINISH"}"#;

    #[test]
    fn unknown_control_drops_suffix() {
        let p = canned(vec![Ok(THREE)]);
        let plan = p.plan_app(&app_input(&["a", "b"], 5)).unwrap().value;
        assert_eq!(plan.output.batch.len(), 1);
        assert_eq!(plan.output.status, AppState::Continue);
        assert_eq!(plan.notes.len(), 1);
    }

    #[test]
    fn max_k_one_forces_single_action() {
        let p = canned(vec![Ok(THREE)]);
        let plan = p.plan_app(&app_input(&["a", "b", "xyz"], 1)).unwrap().value;
        assert_eq!(plan.output.batch.len(), 1);
    }

    #[test]
    fn repairs_once_then_succeeds() {
        let p = canned(vec![Ok("sure! here you go"), Ok(THREE)]);
        let planned = p.plan_app(&app_input(&["a", "b", "xyz"], 5)).unwrap();
        assert_eq!(planned.calls.len(), 2);
        assert!(planned.calls[0].error.is_some());
        assert!(planned.calls[1].prompt.contains("could not be parsed"));
    }

    #[test]
    fn second_malformed_reply_fails() {
        let p = canned(vec![Ok("nope"), Ok("{\"batch\": 3}")]);
        let fail = p.plan_app(&app_input(&["a"], 5)).unwrap_err();
        assert!(matches!(fail.error, PlannerError::Malformed(_)));
        assert_eq!(fail.calls.len(), 2);
    }

    #[test]
    fn backend_down_is_not_retried() {
        let p = canned(vec![Err("connection refused")]);
        let fail = p.plan_app(&app_input(&["a"], 5)).unwrap_err();
        assert!(matches!(fail.error, PlannerError::BackendUnavailable(_)));
        assert_eq!(fail.calls.len(), 1);
    }

    #[test]
    fn gui_action_without_target_is_malformed() {
        let bad = r#"{"batch":[{"operation":"Click"}],"status":"CONTINUE"}"#;
        let p = canned(vec![Ok(bad), Ok(bad)]);
        assert!(p.plan_app(&app_input(&["a"], 5)).is_err());
    }
}
