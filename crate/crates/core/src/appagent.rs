//! Per-application execution runtime: observe, plan, act under a local FSM,
//! with safeguard gating and a hard step budget.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::blackboard::{Blackboard, Handoff};
use crate::detection::{annotate_som, filter_accessibility, fuse, FusionMetadata, FusionOptions, VisionDetector};
use crate::domain::{
    AppState, EntryKind, ExecutionReport, IllegalTransition, Observation, Operation, Outcome, PlannedAction,
    SpeculativeBatch,
};
use crate::planner::{AppPlanInput, CallRecord, PlannerError};
use crate::puppeteer::ExecError;
use crate::runtime::{RuntimeConfig, Services};
use crate::safeguard::{ScreenContext, ScreenDecision};
use crate::session::trace::{EventKind, Recorder};
use crate::simenv::{Desktop, SimError};
use crate::speculative::{self, BatchEnv, ValidationFailure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackboardUpdate {
    pub kind: EntryKind,
    pub body: Value,
}

/// Structured output of one app planning call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppAgentOutput {
    #[serde(default)]
    pub batch: Vec<PlannedAction>,
    #[serde(default)]
    pub rationale: String,
    pub status: AppState,
    pub local_state: AppState,
    #[serde(default)]
    pub blackboard_updates: Vec<BlackboardUpdate>,
}

/// What the host hands an agent along with a subtask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskHandoff {
    pub subtask_index: usize,
    pub description: String,
    pub agent_message: String,
    /// Blackboard length when the subtask was dispatched.
    pub blackboard_ref: u64,
    pub prior_round_summary: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStatus {
    Executed,
    Aborted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionLogEntry {
    pub step: usize,
    pub action: PlannedAction,
    pub status: ActionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppEvent {
    Step,
    RiskFlagged,
    Resumed,
    Finished,
    Failed,
}

impl AppEvent {
    pub const ALL: [AppEvent; 5] = [
        AppEvent::Step,
        AppEvent::RiskFlagged,
        AppEvent::Resumed,
        AppEvent::Finished,
        AppEvent::Failed,
    ];
}

impl fmt::Display for AppEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("event serializes");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

pub fn app_transition(from: AppState, event: AppEvent) -> Result<AppState, IllegalTransition> {
    use AppEvent as E;
    use AppState as S;
    let to = match (from, event) {
        (S::Continue, E::Step) => Some(S::Continue),
        (S::Continue, E::RiskFlagged) => Some(S::Pending),
        (S::Pending, E::Resumed) => Some(S::Continue),
        (S::Continue, E::Finished) => Some(S::Finish),
        (S::Continue | S::Pending, E::Failed) => Some(S::Fail),
        _ => None,
    };
    to.ok_or_else(|| IllegalTransition {
        machine: "app".into(),
        from: from.to_string(),
        event: event.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailKind {
    BudgetExhausted,
    PlannerOutputMalformed,
    BackendUnavailable,
    AppNotRunning,
    Planned,
    Cancelled,
    ClarificationUnanswered,
    InvalidPlan,
    Internal,
}

impl fmt::Display for FailKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("kind serializes");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

impl From<&PlannerError> for FailKind {
    fn from(e: &PlannerError) -> Self {
        match e {
            PlannerError::BackendUnavailable(_) => FailKind::BackendUnavailable,
            PlannerError::Malformed(_) => FailKind::PlannerOutputMalformed,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppAgentError {
    #[error("agent is not awaiting confirmation")]
    NotPending,
    #[error("agent is in state {0}, expected CONTINUE")]
    NotContinue(AppState),
    #[error("step budget of {0} exhausted")]
    BudgetExhausted(usize),
    #[error("no subtask assigned")]
    Unassigned,
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
}

/// An externally implemented agent wrapped to look like an AppAgent: it
/// receives the subtask and a window-scoped observation and answers in the
/// AppAgent output shape.
pub trait ExternalAgent: Send + Sync {
    fn step(&self, handoff: &SubtaskHandoff, observation: &Observation, log: &[ActionLogEntry]) -> Result<AppAgentOutput, String>;
}

#[derive(Clone, Default)]
pub enum AgentKind {
    #[default]
    Native,
    Shim(Arc<dyn ExternalAgent>),
}

impl AgentKind {
    pub fn label(&self) -> &'static str {
        match self {
            AgentKind::Native => "native",
            AgentKind::Shim(_) => "shim",
        }
    }
}

/// Per-round step accounting shared by every agent in the round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepBudget {
    pub limit: usize,
    pub used: usize,
}

impl StepBudget {
    pub fn new(limit: usize) -> Self {
        Self { limit, used: 0 }
    }

    pub fn exhausted(&self) -> bool {
        self.used >= self.limit
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Logical app planning calls (one per react step).
    pub planner_calls: usize,
    /// Host planning calls.
    pub host_planner_calls: usize,
    /// Backend requests including repairs.
    pub backend_attempts: usize,
    pub executor_actions: u32,
}

/// Borrowed runtime pieces an agent needs for one operation.
pub struct StepEnv<'a> {
    pub desktop: &'a mut Desktop,
    pub services: &'a Services,
    pub config: &'a RuntimeConfig,
    pub recorder: &'a Recorder,
    pub blackboard: &'a Blackboard,
    pub budget: &'a mut StepBudget,
    pub counters: &'a mut Counters,
    pub cancelled: &'a dyn Fn() -> bool,
    pub round_request: &'a str,
}

impl StepEnv<'_> {
    pub fn emit(&self, kind: EventKind, payload: Value) -> u64 {
        self.recorder.emit(self.desktop.state().tick, kind, payload)
    }

    /// Move desktop journal entries into the trace.
    pub fn flush_mutations(&mut self) {
        let mutations = self.desktop.drain_journal();
        if mutations.is_empty() {
            return;
        }
        let hash = self.desktop.state_hash();
        self.emit(EventKind::DesktopMutation, json!({"mutations": mutations, "state_hash": hash}));
    }
}

/// Snapshot, filter, detect, fuse, and mark one application window.
pub fn perceive(desktop: &Desktop, detector: &dyn VisionDetector, options: &FusionOptions, app_id: &str) -> Result<(Observation, FusionMetadata), SimError> {
    let snap = desktop.snapshot(app_id)?;
    let acc = filter_accessibility(&snap.accessibility);
    let vis = match detector.detect(&snap) {
        Ok(v) => v,
        Err(e) => {
            tracing::warn!(app_id, error = %e, "vision detector failed; using accessibility only");
            Vec::new()
        }
    };
    let fused = fuse(&acc, &vis, options);
    Ok((
        Observation {
            app_id: app_id.to_string(),
            screenshot_ref: snap.screenshot_ref,
            controls: annotate_som(fused.controls),
            timestamp: snap.tick,
        },
        fused.metadata,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingAction {
    pub step: usize,
    pub action: PlannedAction,
    pub matched_rule: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub output: Option<AppAgentOutput>,
    pub report: Option<ExecutionReport>,
    pub state: AppState,
}

pub struct AppAgent {
    app_id: String,
    kind: AgentKind,
    state: AppState,
    handoff: Option<SubtaskHandoff>,
    history: VecDeque<AppAgentOutput>,
    log: Vec<ActionLogEntry>,
    log_start: usize,
    subtask_steps: usize,
    pending: Option<PendingAction>,
    fail_kind: Option<FailKind>,
    fail_detail: Option<String>,
}

impl AppAgent {
    pub fn new(app_id: impl Into<String>, kind: AgentKind) -> Self {
        Self {
            app_id: app_id.into(),
            kind,
            state: AppState::Continue,
            handoff: None,
            history: VecDeque::new(),
            log: Vec::new(),
            log_start: 0,
            subtask_steps: 0,
            pending: None,
            fail_kind: None,
            fail_detail: None,
        }
    }

    pub fn app_id(&self) -> &str {
        &self.app_id
    }

    pub fn state(&self) -> AppState {
        self.state
    }

    pub fn pending(&self) -> Option<&PendingAction> {
        self.pending.as_ref()
    }

    pub fn failure(&self) -> Option<(FailKind, Option<&str>)> {
        self.fail_kind.map(|k| (k, self.fail_detail.as_deref()))
    }

    /// Full local action log across every subtask this agent served.
    pub fn action_log(&self) -> &[ActionLogEntry] {
        &self.log
    }

    /// Start a new subtask with a fresh FSM; history and the log persist.
    pub fn assign(&mut self, handoff: SubtaskHandoff) {
        self.state = AppState::Continue;
        self.handoff = Some(handoff);
        self.log_start = self.log.len();
        self.subtask_steps = 0;
        self.pending = None;
        self.fail_kind = None;
        self.fail_detail = None;
    }

    fn transition(&mut self, env: &StepEnv, event: AppEvent, reason: &str) -> Result<AppState, IllegalTransition> {
        let from = self.state;
        let to = app_transition(from, event)?;
        self.state = to;
        env.emit(
            EventKind::AppTransition,
            json!({"app_id": self.app_id, "from": from, "to": to, "event": event, "reason": reason}),
        );
        Ok(to)
    }

    /// Force the agent into FAIL from any non-terminal state.
    pub fn fail(&mut self, env: &StepEnv, kind: FailKind, detail: impl Into<String>) -> Result<(), IllegalTransition> {
        let detail = detail.into();
        self.fail_kind = Some(kind);
        self.fail_detail = Some(detail.clone());
        self.pending = None;
        self.transition(env, AppEvent::Failed, &format!("{kind}: {detail}"))?;
        Ok(())
    }

    pub fn observe(&mut self, env: &mut StepEnv) -> Result<Observation, AppAgentError> {
        let fusion = env.config.fusion.clone();
        match perceive(env.desktop, env.services.detector.as_ref(), &fusion, &self.app_id) {
            Ok((obs, _)) => Ok(obs),
            Err(e) => {
                self.fail(env, FailKind::AppNotRunning, e.to_string())?;
                Err(AppAgentError::NotContinue(self.state))
            }
        }
    }

    /// One observe-plan-act cycle from CONTINUE.
    pub fn react_step(&mut self, env: &mut StepEnv, obs: Observation) -> Result<StepReport, AppAgentError> {
        if self.state != AppState::Continue {
            return Err(AppAgentError::NotContinue(self.state));
        }
        let handoff = self.handoff.clone().ok_or(AppAgentError::Unassigned)?;
        if env.budget.exhausted() {
            let limit = env.budget.limit;
            self.fail(env, FailKind::BudgetExhausted, format!("step budget of {limit} exhausted"))?;
            return Err(AppAgentError::BudgetExhausted(limit));
        }
        env.budget.used += 1;
        let step = env.budget.used;
        self.subtask_steps += 1;
        let obs_hash = obs.digest();
        env.emit(
            EventKind::StepStarted,
            json!({
                "app_id": self.app_id,
                "step": step,
                "subtask_index": handoff.subtask_index,
                "observation_hash": obs_hash,
                "screenshot_ref": obs.screenshot_ref,
                "controls": obs.controls.iter().map(control_summary).collect::<Vec<_>>(),
            }),
        );

        env.counters.planner_calls += 1;
        let planned = match &self.kind {
            AgentKind::Native => {
                let input = self.plan_input(env, &handoff, obs.clone(), step);
                let result = env.services.planner.plan_app(&input);
                let (calls, outcome) = match result {
                    Ok(p) => (p.calls, Ok((p.value.output, p.value.notes))),
                    Err(f) => (f.calls, Err(f.error)),
                };
                self.record_calls(env, &calls, &obs_hash);
                outcome
            }
            AgentKind::Shim(agent) => {
                let log = &self.log[self.log_start..];
                let res = agent.step(&handoff, &obs, log);
                env.emit(
                    EventKind::PlannerCall,
                    json!({"role": "shim", "trigger": handoff.description, "attempt": 0, "observation_hash": obs_hash,
                           "response": res.as_ref().ok(), "error": res.as_ref().err()}),
                );
                res.map(|o| (o, Vec::new())).map_err(PlannerError::BackendUnavailable)
            }
        };
        let (output, notes) = match planned {
            Ok(v) => v,
            Err(e) => {
                self.fail(env, FailKind::from(&e), e.to_string())?;
                return Ok(self.report(step, None, None));
            }
        };
        env.emit(
            EventKind::AppOutput,
            json!({"app_id": self.app_id, "step": step, "output": output, "notes": notes}),
        );
        self.history.push_back(output.clone());
        while self.history.len() > env.config.history_window {
            self.history.pop_front();
        }
        self.post_updates(env, &handoff, &output.blackboard_updates);

        if output.status == AppState::Fail {
            self.fail(env, FailKind::Planned, output.rationale.clone())?;
            return Ok(self.report(step, Some(output), None));
        }

        let risky = self.screen_batch(env, &output.batch, &obs, step);
        let safe_len = risky.as_ref().map_or(output.batch.len(), |(i, _)| *i);
        let report = if safe_len > 0 {
            Some(self.execute(env, output.batch[..safe_len].to_vec(), obs, step))
        } else {
            None
        };
        let prefix_done = report.as_ref().is_none_or(|r| !r.halted_early);

        if let (Some((index, decision)), true) = (risky, prefix_done) {
            let pending = PendingAction {
                step,
                action: output.batch[index].clone(),
                matched_rule: decision.matched_rule,
            };
            env.emit(
                EventKind::Pending,
                json!({"app_id": self.app_id, "step": step, "index": index, "action": pending.action,
                       "description": pending.action.describe(), "matched_rule": pending.matched_rule}),
            );
            self.pending = Some(pending);
            self.transition(env, AppEvent::RiskFlagged, "risky action awaits confirmation")?;
        } else if output.status == AppState::Finish && prefix_done && safe_len == output.batch.len() {
            self.transition(env, AppEvent::Finished, "planner declared completion")?;
        } else {
            let reason = match &report {
                Some(r) if r.halted_early => "batch halted; replanning",
                _ => "continue",
            };
            self.transition(env, AppEvent::Step, reason)?;
        }
        Ok(self.report(step, Some(output), report))
    }

    /// Answer a pending confirmation.
    pub fn resume(&mut self, env: &mut StepEnv, approve: bool, auto: bool) -> Result<AppState, AppAgentError> {
        if self.state != AppState::Pending {
            return Err(AppAgentError::NotPending);
        }
        let pending = self.pending.take().ok_or(AppAgentError::NotPending)?;
        env.emit(
            EventKind::Confirmation,
            json!({"app_id": self.app_id, "step": pending.step, "decision": if approve {"approve"} else {"deny"},
                   "auto": auto, "action": pending.action}),
        );
        if approve {
            let fusion = env.config.fusion.clone();
            match perceive(env.desktop, env.services.detector.as_ref(), &fusion, &self.app_id) {
                Ok((obs, _)) => {
                    self.execute(env, vec![pending.action], obs, pending.step);
                }
                Err(e) => {
                    self.fail(env, FailKind::AppNotRunning, e.to_string())?;
                    return Ok(self.state);
                }
            }
            self.transition(env, AppEvent::Resumed, "approved")?;
        } else {
            env.emit(
                EventKind::ActionAborted,
                json!({"app_id": self.app_id, "step": pending.step, "action": pending.action,
                       "description": pending.action.describe(), "status": "aborted"}),
            );
            self.log.push(ActionLogEntry {
                step: pending.step,
                action: pending.action,
                status: ActionStatus::Aborted,
                result: None,
                detail: Some("denied by user".into()),
            });
            self.transition(env, AppEvent::Resumed, "denied; replanning")?;
        }
        Ok(self.state)
    }

    fn report(&self, step: usize, output: Option<AppAgentOutput>, report: Option<ExecutionReport>) -> StepReport {
        StepReport {
            step,
            output,
            report,
            state: self.state,
        }
    }

    fn plan_input(&self, env: &StepEnv, handoff: &SubtaskHandoff, obs: Observation, step: usize) -> AppPlanInput {
        let knowledge = env
            .services
            .knowledge
            .read()
            .retrieve(&self.app_id, env.round_request, env.config.k_docs, env.config.k_exp)
            .unwrap_or_else(|e| {
                tracing::warn!(error = %e, "knowledge retrieval failed");
                Default::default()
            });
        AppPlanInput {
            round_request: env.round_request.to_string(),
            subtask: handoff.clone(),
            app_id: self.app_id.clone(),
            observation: obs,
            action_space: env.services.registry.action_space(&self.app_id).into_iter().cloned().collect(),
            knowledge,
            blackboard: env.blackboard.all(),
            history: self.history.iter().cloned().collect(),
            action_log: self.log[self.log_start..].to_vec(),
            max_k: env.config.effective_max_batch(),
            step,
            subtask_step: self.subtask_steps - 1,
        }
    }

    fn record_calls(&self, env: &mut StepEnv, calls: &[CallRecord], obs_hash: &str) {
        for call in calls {
            env.counters.backend_attempts += 1;
            let mut payload = serde_json::to_value(call).expect("call record serializes");
            payload["observation_hash"] = json!(obs_hash);
            payload["app_id"] = json!(self.app_id);
            env.emit(EventKind::PlannerCall, payload);
        }
    }

    fn post_updates(&self, env: &StepEnv, handoff: &SubtaskHandoff, updates: &[BlackboardUpdate]) {
        for update in updates {
            let body = match update.kind {
                EntryKind::Result => serde_json::to_value(Handoff {
                    produced_by_subtask: handoff.subtask_index,
                    payload: update.body.clone(),
                })
                .expect("handoff serializes"),
                _ => update.body.clone(),
            };
            match env.blackboard.append(body, &self.app_id, update.kind, env.recorder.round()) {
                Ok(entry) => {
                    env.emit(EventKind::BlackboardAppend, json!({"entry": entry}));
                }
                Err(e) => tracing::warn!(error = %e, "blackboard append rejected"),
            }
        }
    }

    /// Screen every action; returns the first risky index and its decision.
    fn screen_batch(&self, env: &StepEnv, batch: &[PlannedAction], obs: &Observation, step: usize) -> Option<(usize, ScreenDecision)> {
        let mut first = None;
        for (i, action) in batch.iter().enumerate() {
            let label = action.target.as_deref().and_then(|t| obs.control(t)).map(|c| c.label.as_str());
            let tagged = action.operation == Operation::ApiCall
                && action
                    .api_name()
                    .and_then(|api| env.services.registry.get(&self.app_id, api))
                    .is_some_and(|spec| spec.risk_tag);
            let decision = env.services.safeguard.screen(
                action,
                ScreenContext {
                    target_label: label,
                    api_risk_tagged: tagged,
                },
            );
            env.emit(
                EventKind::Safeguard,
                json!({"app_id": self.app_id, "step": step, "index": i, "action": action.describe(),
                       "risky": decision.risky, "matched_rule": decision.matched_rule}),
            );
            if decision.risky && first.is_none() {
                first = Some((i, decision));
            }
        }
        first
    }

    fn execute(&mut self, env: &mut StepEnv, actions: Vec<PlannedAction>, obs: Observation, step: usize) -> ExecutionReport {
        let k = actions.len();
        let batch = SpeculativeBatch::new(actions, k).expect("non-empty batch within its own bound");
        let report = {
            let mut bridge = ExecBridge {
                env: &mut *env,
                app_id: &self.app_id,
                step,
            };
            speculative::run_batch(&batch, obs, &mut bridge)
        };
        env.counters.executor_actions += report.executor_actions();
        for done in &report.executed {
            self.log.push(ActionLogEntry {
                step,
                action: done.action.clone(),
                status: ActionStatus::Executed,
                result: done.outcome.result.clone(),
                detail: done.outcome.message.clone(),
            });
        }
        if report.halted_early {
            if let Some(failed) = batch.actions().get(report.executed.len()) {
                self.log.push(ActionLogEntry {
                    step,
                    action: failed.clone(),
                    status: ActionStatus::Failed,
                    result: None,
                    detail: report.halt_detail.clone(),
                });
            }
        }
        env.emit(
            EventKind::BatchReport,
            json!({
                "app_id": self.app_id,
                "step": step,
                "batch_size": report.batch_size,
                "executed": report.executed.len(),
                "halted_early": report.halted_early,
                "halt_reason": report.halt_reason,
                "halt_detail": report.halt_detail,
                "needs_replan": report.needs_replan(),
                "executor_actions": report.executor_actions(),
            }),
        );
        report
    }
}

pub fn control_summary(c: &crate::domain::Control) -> Value {
    json!({
        "mark": c.som_mark,
        "id": c.id,
        "type": c.control_type,
        "label": c.label,
        "source": c.source,
        "enabled": c.enabled,
    })
}

struct ExecBridge<'e, 'a> {
    env: &'e mut StepEnv<'a>,
    app_id: &'e str,
    step: usize,
}

impl BatchEnv for ExecBridge<'_, '_> {
    fn validate(&self, action: &PlannedAction, context: &Observation) -> Result<(), ValidationFailure> {
        speculative::validate(action, context, &self.env.services.registry)
    }

    fn execute(&mut self, action: &PlannedAction, context: &Observation) -> Result<Outcome, ExecError> {
        let result = self.env.services.puppeteer.execute(self.env.desktop, action, context);
        self.env.flush_mutations();
        match &result {
            Ok(outcome) if !outcome.is_error() => {
                self.env.emit(
                    EventKind::ActionExecuted,
                    json!({"app_id": self.app_id, "step": self.step, "action": action,
                           "description": action.describe(), "outcome": outcome}),
                );
            }
            Ok(outcome) => {
                self.env.emit(
                    EventKind::ActionFailed,
                    json!({"app_id": self.app_id, "step": self.step, "action": action,
                           "description": action.describe(), "error": outcome.message}),
                );
            }
            Err(e) => {
                self.env.emit(
                    EventKind::ActionFailed,
                    json!({"app_id": self.app_id, "step": self.step, "action": action,
                           "description": action.describe(), "error": e.to_string()}),
                );
            }
        }
        result
    }

    fn refresh(&mut self, app_id: &str) -> Result<Observation, String> {
        let fusion = self.env.config.fusion.clone();
        perceive(self.env.desktop, self.env.services.detector.as_ref(), &fusion, app_id)
            .map(|(o, _)| o)
            .map_err(|e| e.to_string())
    }

    fn cancelled(&self) -> bool {
        (self.env.cancelled)()
    }

    fn on_validation_failure(&mut self, index: usize, action: &PlannedAction, failure: &ValidationFailure) {
        self.env.emit(
            EventKind::ValidationFailed,
            json!({"app_id": self.app_id, "step": self.step, "index": index,
                   "description": action.describe(), "failure": failure.to_string()}),
        );
    }
}
