//! Multi-round sessions: the round driver that connects the host agent, app
//! agents, and the desktop, plus evaluation, export, and replay.

pub mod evaluate;
pub mod interaction;
pub mod markdown;
pub mod replay;
pub mod scenario;
pub mod trace;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::appagent::{AppAgentError, Counters, FailKind, StepBudget, StepEnv, SubtaskHandoff};
use crate::blackboard::Blackboard;
use crate::domain::{AppState, EntryKind, HostState};
use crate::hostagent::{HostAgent, HostEvent, HostOutput};
use crate::planner::{HostPlanInput, RunningApp};
use crate::runtime::{RuntimeConfig, Services};
use crate::simenv::{Catalog, Desktop, SimError};
use evaluate::{EvalContext, EvalError, EvaluationResult, Evaluator};
use interaction::{ConfirmRequest, Decision, Interaction};
use trace::{EventKind, EventLog, Recorder, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Open,
    Finished,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub status: HostState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_kind: Option<FailKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub steps: usize,
    pub planner_calls: usize,
    pub host_planner_calls: usize,
    pub backend_attempts: usize,
    pub executor_actions: u32,
    pub subtasks_completed: usize,
    pub final_state_hash: String,
}

impl RoundOutcome {
    pub fn succeeded(&self) -> bool {
        self.status == HostState::Finish
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub index: u32,
    pub request: String,
    pub outcome: Option<RoundOutcome>,
    pub evaluation: Option<EvaluationResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("a round is already in progress")]
    RoundInProgress,
    #[error("session is closed")]
    SessionClosed,
    #[error("no round is waiting to run")]
    NoActiveRound,
    #[error("app `{0}` could not be opened: {1}")]
    Fixture(String, String),
}

pub struct Session {
    id: String,
    desktop: Desktop,
    blackboard: Blackboard,
    rounds: Vec<Round>,
    status: SessionStatus,
    log: Arc<EventLog>,
    services: Arc<Services>,
    config: RuntimeConfig,
    active: Option<usize>,
}

impl Session {
    pub fn new(id: impl Into<String>, catalog: Arc<Catalog>, services: Arc<Services>, config: RuntimeConfig) -> Self {
        Self::with_log(id, catalog, services, config, EventLog::new())
    }

    pub fn with_log(id: impl Into<String>, catalog: Arc<Catalog>, services: Arc<Services>, config: RuntimeConfig, log: Arc<EventLog>) -> Self {
        let id = id.into();
        log.push(
            &id,
            0,
            0,
            EventKind::SessionStarted,
            json!({
                "catalog_fingerprint": catalog.fingerprint(),
                "apps": catalog.apps().map(|a| a.app_id.clone()).collect::<Vec<_>>(),
                "config": config,
            }),
        );
        Self {
            id,
            desktop: Desktop::new(catalog),
            blackboard: Blackboard::new(),
            rounds: Vec::new(),
            status: SessionStatus::Open,
            log,
            services,
            config,
            active: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn rounds(&self) -> &[Round] {
        &self.rounds
    }

    pub fn desktop(&self) -> &Desktop {
        &self.desktop
    }

    pub fn blackboard(&self) -> &Blackboard {
        &self.blackboard
    }

    pub fn log(&self) -> &Arc<EventLog> {
        &self.log
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.log.snapshot()
    }

    pub fn round_in_progress(&self) -> bool {
        self.active.is_some()
    }

    /// Open apps before the first round, as scenario fixtures require.
    pub fn open_apps(&mut self, apps: &[String]) -> Result<(), SessionError> {
        for app in apps {
            if self.desktop.is_running(app) {
                continue;
            }
            let handle = self
                .desktop
                .launch_app(app)
                .map_err(|e| SessionError::Fixture(app.clone(), e.to_string()))?;
            let tick = self.desktop.state().tick;
            self.log.push(&self.id, 0, tick, EventKind::AppLaunched, json!({"app_id": app, "handle": handle, "fixture": true}));
        }
        let mutations = self.desktop.drain_journal();
        if !mutations.is_empty() {
            let tick = self.desktop.state().tick;
            let hash = self.desktop.state_hash();
            self.log.push(&self.id, 0, tick, EventKind::DesktopMutation, json!({"mutations": mutations, "state_hash": hash}));
        }
        Ok(())
    }

    pub fn start_round(&mut self, request: impl Into<String>) -> Result<u32, SessionError> {
        if self.status != SessionStatus::Open {
            return Err(SessionError::SessionClosed);
        }
        if self.active.is_some() {
            return Err(SessionError::RoundInProgress);
        }
        let index = self.rounds.len() as u32 + 1;
        self.rounds.push(Round {
            index,
            request: request.into(),
            outcome: None,
            evaluation: None,
        });
        self.active = Some(self.rounds.len() - 1);
        Ok(index)
    }

    /// `start_round` followed by `run_active_round`.
    pub fn run_round(&mut self, request: impl Into<String>, interaction: &mut dyn Interaction) -> Result<RoundOutcome, SessionError> {
        self.start_round(request)?;
        self.run_active_round(interaction)
    }

    /// One-line summaries of finished rounds, handed to the planners.
    pub fn prior_round_summaries(&self) -> Vec<String> {
        self.rounds
            .iter()
            .filter_map(|r| {
                let o = r.outcome.as_ref()?;
                let results: Vec<String> = self
                    .blackboard
                    .all()
                    .into_iter()
                    .filter(|e| e.round == r.index && e.kind == EntryKind::Result)
                    .map(|e| e.body.to_string())
                    .collect();
                let mut line = format!("round {} \"{}\": {} after {} steps", r.index, r.request, o.status, o.steps);
                if let Some(reason) = &o.reason {
                    line.push_str(&format!(" ({reason})"));
                }
                if !results.is_empty() {
                    line.push_str(&format!("; results: {}", results.join(", ")));
                }
                Some(line)
            })
            .collect()
    }

    pub fn run_active_round(&mut self, interaction: &mut dyn Interaction) -> Result<RoundOutcome, SessionError> {
        let slot = self.active.ok_or(SessionError::NoActiveRound)?;
        let request = self.rounds[slot].request.clone();
        let round_no = self.rounds[slot].index;
        let prior = self.prior_round_summaries();
        let recorder = Recorder::new(Arc::clone(&self.log), self.id.clone(), round_no);
        recorder.emit(
            self.desktop.state().tick,
            EventKind::RoundStarted,
            json!({"request": request, "prior_rounds": prior}),
        );

        let token = interaction.cancel_token();
        let cancelled = move || token.is_cancelled();
        let mut budget = StepBudget::new(self.config.step_budget);
        let mut counters = Counters::default();
        let services = Arc::clone(&self.services);
        let mut host = HostAgent::new();
        let mut driver = RoundDriver {
            env: StepEnv {
                desktop: &mut self.desktop,
                services: &services,
                config: &self.config,
                recorder: &recorder,
                blackboard: &self.blackboard,
                budget: &mut budget,
                counters: &mut counters,
                cancelled: &cancelled,
                round_request: &request,
            },
            host: &mut host,
            prior: &prior,
            completed: 0,
        };
        let failure = driver.drive(interaction).err();
        let completed = driver.completed;
        let released = host.release_all();
        let tick = self.desktop.state().tick;
        if !released.is_empty() {
            recorder.emit(tick, EventKind::AgentsReleased, json!({"apps": released}));
        }

        let outcome = RoundOutcome {
            status: host.state(),
            fail_kind: failure.as_ref().map(|f| f.0),
            reason: failure.map(|f| f.1),
            steps: budget.used,
            planner_calls: counters.planner_calls,
            host_planner_calls: counters.host_planner_calls,
            backend_attempts: counters.backend_attempts,
            executor_actions: counters.executor_actions,
            subtasks_completed: completed,
            final_state_hash: self.desktop.state_hash(),
        };
        recorder.emit(tick, EventKind::RoundFinished, json!({"outcome": outcome}));
        self.rounds[slot].outcome = Some(outcome.clone());
        self.active = None;
        Ok(outcome)
    }

    /// Evaluate a finished round and record the result in the trace.
    pub fn evaluate_round(&mut self, index: u32, evaluator: &dyn Evaluator) -> Result<EvaluationResult, EvalError> {
        let slot = self
            .rounds
            .iter()
            .position(|r| r.index == index)
            .ok_or(EvalError::UnknownRound(index))?;
        if self.rounds[slot].outcome.is_none() {
            return Err(EvalError::RoundNotTerminal(index));
        }
        let round_events: Vec<TraceEvent> = self.log.snapshot().into_iter().filter(|e| e.round == index).collect();
        let transcript = markdown::export_markdown(&self.id, &round_events);
        let result = evaluator.evaluate(&EvalContext {
            request: &self.rounds[slot].request,
            state: self.desktop.state(),
            transcript: &transcript,
        })?;
        self.log.push(
            &self.id,
            index,
            self.desktop.state().tick,
            EventKind::Evaluation,
            json!({"result": result}),
        );
        self.rounds[slot].evaluation = Some(result.clone());
        Ok(result)
    }

    /// Close the session; the blackboard stops accepting entries.
    pub fn finish(&mut self) {
        if self.status != SessionStatus::Open {
            return;
        }
        let ok = self.rounds.last().and_then(|r| r.outcome.as_ref()).is_some_and(RoundOutcome::succeeded);
        self.status = if ok { SessionStatus::Finished } else { SessionStatus::Failed };
        self.blackboard.close();
        self.log.push(
            &self.id,
            self.rounds.len() as u32,
            self.desktop.state().tick,
            EventKind::SessionClosed,
            json!({"status": self.status}),
        );
        self.log.close();
    }

    pub fn export_markdown(&self) -> String {
        markdown::export_markdown(&self.id, &self.log.snapshot())
    }
}

type Failure = (FailKind, String);

struct RoundDriver<'r, 'a> {
    env: StepEnv<'a>,
    host: &'r mut HostAgent,
    prior: &'r [String],
    completed: usize,
}

impl RoundDriver<'_, '_> {
    fn host_step(&mut self, event: HostEvent) {
        match self.host.step(event) {
            Ok((from, to)) => {
                self.env.emit(EventKind::HostTransition, json!({"from": from, "to": to, "event": event}));
            }
            Err(e) => {
                // The driver only issues events the table allows; reaching this
                // is a bug, so surface it loudly in debug builds.
                debug_assert!(false, "{e}");
                tracing::error!(error = %e, "host transition rejected");
            }
        }
    }

    fn fatal(&mut self, kind: FailKind, reason: impl Into<String>) -> Failure {
        self.host_step(HostEvent::Fatal);
        (kind, reason.into())
    }

    fn host_input(&self, clarification: Option<String>) -> HostPlanInput {
        let desktop = &*self.env.desktop;
        HostPlanInput {
            request: self.env.round_request.to_string(),
            running_apps: desktop
                .summary()
                .into_iter()
                .map(|(app_id, _, handle)| RunningApp { app_id, handle })
                .collect(),
            available_apps: desktop.catalog().apps().map(|a| a.app_id.clone()).collect(),
            prior_rounds: self.prior.to_vec(),
            clarification,
            knowledge: Vec::new(),
        }
    }

    fn decompose(&mut self, interaction: &mut dyn Interaction) -> Result<Option<HostOutput>, Failure> {
        if self.env.round_request.trim().is_empty() {
            return Err(self.fatal(FailKind::InvalidPlan, "request is empty"));
        }
        let mut clarification = None;
        loop {
            let input = self.host_input(clarification.clone());
            self.env.counters.host_planner_calls += 1;
            let planned = self.env.services.planner.plan_host(&input);
            let calls = match &planned {
                Ok(p) => &p.calls,
                Err(f) => &f.calls,
            };
            for call in calls {
                self.env.counters.backend_attempts += 1;
                self.env.emit(EventKind::PlannerCall, serde_json::to_value(call).expect("call serializes"));
            }
            let output = match planned {
                Ok(p) => p.value,
                Err(f) => return Err(self.fatal(FailKind::from(&f.error), f.error.to_string())),
            };
            self.env.emit(EventKind::HostOutput, json!({"output": output}));
            match output.host_state {
                HostState::Pending => {
                    let prompt = output.user_prompt.clone().unwrap_or_default();
                    self.host_step(HostEvent::ClarificationNeeded);
                    self.env.emit(EventKind::Clarification, json!({"prompt": prompt}));
                    match interaction.clarify(&prompt) {
                        Some(reply) => {
                            self.env.emit(EventKind::Clarification, json!({"reply": reply}));
                            self.host_step(HostEvent::UserReply);
                            clarification = Some(reply);
                        }
                        None => {
                            let kind = if (self.env.cancelled)() { FailKind::Cancelled } else { FailKind::ClarificationUnanswered };
                            return Err(self.fatal(kind, "clarification was not answered"));
                        }
                    }
                }
                HostState::Fail => return Err(self.fatal(FailKind::Planned, "host planner declared failure")),
                HostState::Finish => return Ok(None),
                HostState::Continue | HostState::Assign => return Ok(Some(output)),
            }
        }
    }

    fn drive(&mut self, interaction: &mut dyn Interaction) -> Result<(), Failure> {
        let Some(plan) = self.decompose(interaction)? else {
            self.host_step(HostEvent::AllDone);
            return Ok(());
        };
        for directive in &plan.shell_commands {
            if let Err(e) = self.launch(&directive.launch) {
                return Err(self.fatal(FailKind::InvalidPlan, e.to_string()));
            }
        }
        let mut done = BTreeSet::new();
        for (index, subtask) in plan.subtask_plan.subtasks.iter().enumerate() {
            if let Some(dep) = subtask.depends_on.iter().find(|d| !done.contains(*d)) {
                return Err(self.fatal(FailKind::InvalidPlan, format!("subtask {index} depends on unfinished subtask {dep}")));
            }
            if (self.env.cancelled)() {
                return Err(self.fatal(FailKind::Cancelled, "cancelled"));
            }
            self.host_step(HostEvent::SubtaskReady);
            let app = subtask.target_app.clone();
            let agents = &self.env.services.agents;
            let provisioned = match self.host.ensure_agent(self.env.desktop, &app, || agents.resolve(&app)) {
                Ok(p) => p,
                Err(e) => return Err(self.fatal(FailKind::InvalidPlan, e.to_string())),
            };
            if let Some(handle) = provisioned.launched {
                self.env.emit(EventKind::AppLaunched, json!({"app_id": app, "handle": handle}));
                self.env.flush_mutations();
            }
            let handoff = SubtaskHandoff {
                subtask_index: index,
                description: subtask.description.clone(),
                agent_message: plan.agent_message.clone(),
                blackboard_ref: self.env.blackboard.len() as u64,
                prior_round_summary: self.prior.to_vec(),
            };
            let agent = self.host.agent_mut(&app).expect("agent was just provisioned");
            if provisioned.created {
                self.env.emit(EventKind::AgentCreated, json!({"app_id": app, "kind": self.env.services.agents.resolve(&app).label()}));
            }
            agent.assign(handoff);
            match run_agent(&mut self.env, agent, interaction) {
                AppState::Finish => {
                    self.host_step(HostEvent::SubtaskDone);
                    done.insert(index);
                    self.completed += 1;
                }
                _ => {
                    let (kind, detail) = agent
                        .failure()
                        .map(|(k, d)| (k, d.unwrap_or_default().to_string()))
                        .unwrap_or((FailKind::Internal, "agent stopped".into()));
                    self.host_step(HostEvent::SubtaskFailed);
                    let _ = self.env.blackboard.append(
                        json!({"subtask": index, "app_id": app, "kind": kind, "detail": detail}),
                        "host",
                        EntryKind::Error,
                        self.env.recorder.round(),
                    );
                    return Err(self.fatal(kind, format!("subtask {index} on {app} failed: {detail}")));
                }
            }
        }
        self.host_step(HostEvent::AllDone);
        Ok(())
    }

    fn launch(&mut self, app_id: &str) -> Result<(), SimError> {
        if self.env.desktop.is_running(app_id) {
            return Ok(());
        }
        let handle = self.env.desktop.launch_app(app_id)?;
        self.host.launches += 1;
        self.env.emit(EventKind::AppLaunched, json!({"app_id": app_id, "handle": handle}));
        self.env.flush_mutations();
        Ok(())
    }
}

/// Drive one agent until it reaches FINISH or FAIL.
fn run_agent(env: &mut StepEnv, agent: &mut crate::appagent::AppAgent, interaction: &mut dyn Interaction) -> AppState {
    loop {
        match agent.state() {
            AppState::Finish | AppState::Fail => return agent.state(),
            _ if (env.cancelled)() => {
                let _ = agent.fail(env, FailKind::Cancelled, "cancelled by user");
            }
            AppState::Continue => {
                let obs = match agent.observe(env) {
                    Ok(o) => o,
                    Err(_) => continue,
                };
                match agent.react_step(env, obs) {
                    Ok(_) | Err(AppAgentError::BudgetExhausted(_)) => {}
                    Err(e) => {
                        tracing::error!(error = %e, "react step rejected");
                        let _ = agent.fail(env, FailKind::Internal, e.to_string());
                    }
                }
            }
            AppState::Pending => {
                let pending = agent.pending().cloned().expect("PENDING agents hold an action");
                let answer = interaction.confirm(&ConfirmRequest {
                    app_id: agent.app_id().to_string(),
                    action: pending.action,
                    matched_rule: pending.matched_rule,
                });
                match answer {
                    Some(a) => {
                        if let Err(e) = agent.resume(env, a.decision == Decision::Approve, a.auto) {
                            tracing::error!(error = %e, "resume rejected");
                            let _ = agent.fail(env, FailKind::Internal, e.to_string());
                        }
                    }
                    None => {
                        let _ = agent.fail(env, FailKind::Cancelled, "cancelled while awaiting confirmation");
                    }
                }
            }
        }
    }
}

/// Payload helper for consumers that only want the outcome of a finished round.
pub fn round_outcome(event: &TraceEvent) -> Option<RoundOutcome> {
    (event.kind == EventKind::RoundFinished)
        .then(|| serde_json::from_value(event.payload.get("outcome").cloned().unwrap_or(Value::Null)).ok())
        .flatten()
}
