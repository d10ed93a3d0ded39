//! Control-plane orchestrator: request decomposition, app lifecycle, and the
//! host control-state machine.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::appagent::{AgentKind, AppAgent};
use crate::domain::{HostState, IllegalTransition, SubtaskPlan};
use crate::simenv::{Desktop, SimError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchDirective {
    pub launch: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignedApp {
    pub app_id: String,
    #[serde(default)]
    pub instance: u32,
}

/// Structured output of one host planning call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostOutput {
    pub subtask_plan: SubtaskPlan,
    #[serde(default)]
    pub shell_commands: Vec<LaunchDirective>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_app: Option<AssignedApp>,
    #[serde(default)]
    pub agent_message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_prompt: Option<String>,
    pub host_state: HostState,
}

impl HostOutput {
    pub fn validate(&self) -> Result<(), String> {
        self.subtask_plan.validate().map_err(|e| e.to_string())?;
        match self.host_state {
            HostState::Assign if self.assigned_app.is_none() => Err("host_state ASSIGN requires assigned_app".into()),
            HostState::Pending if self.user_prompt.as_deref().is_none_or(str::is_empty) => {
                Err("host_state PENDING requires user_prompt".into())
            }
            HostState::Assign | HostState::Continue if self.subtask_plan.subtasks.is_empty() => {
                Err(format!("host_state {} with an empty subtask plan", self.host_state))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostEvent {
    SubtaskReady,
    SubtaskDone,
    SubtaskFailed,
    ClarificationNeeded,
    UserReply,
    AllDone,
    Fatal,
}

impl HostEvent {
    pub const ALL: [HostEvent; 7] = [
        HostEvent::SubtaskReady,
        HostEvent::SubtaskDone,
        HostEvent::SubtaskFailed,
        HostEvent::ClarificationNeeded,
        HostEvent::UserReply,
        HostEvent::AllDone,
        HostEvent::Fatal,
    ];
}

impl fmt::Display for HostEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("event serializes");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

/// The host transition table. Everything not listed is illegal.
pub fn host_transition(from: HostState, event: HostEvent) -> Result<HostState, IllegalTransition> {
    use HostEvent as E;
    use HostState as S;
    let to = match (from, event) {
        (S::Finish | S::Fail, _) => None,
        (_, E::Fatal) => Some(S::Fail),
        (S::Continue, E::SubtaskReady) => Some(S::Assign),
        (S::Assign, E::SubtaskDone) => Some(S::Continue),
        // A failed subtask returns control to the host, which then decides
        // whether the failure is fatal.
        (S::Assign, E::SubtaskFailed) => Some(S::Continue),
        (S::Continue, E::ClarificationNeeded) => Some(S::Pending),
        (S::Pending, E::UserReply) => Some(S::Continue),
        (S::Continue, E::AllDone) => Some(S::Finish),
        _ => None,
    };
    to.ok_or_else(|| IllegalTransition {
        machine: "host".into(),
        from: from.to_string(),
        event: event.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostFsm {
    state: HostState,
}

impl Default for HostFsm {
    fn default() -> Self {
        Self {
            state: HostState::Continue,
        }
    }
}

impl HostFsm {
    pub fn state(&self) -> HostState {
        self.state
    }

    pub fn step(&mut self, event: HostEvent) -> Result<(HostState, HostState), IllegalTransition> {
        let from = self.state;
        self.state = host_transition(from, event)?;
        Ok((from, self.state))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HostError {
    #[error("request is empty")]
    EmptyRequest,
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// What `ensure_agent` had to do to make an agent available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provisioned {
    pub launched: Option<u32>,
    pub created: bool,
}

/// Host-side state for one round: the FSM plus the live AppAgents.
#[derive(Default)]
pub struct HostAgent {
    fsm: HostFsm,
    agents: BTreeMap<String, AppAgent>,
    pub launches: usize,
}

impl HostAgent {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> HostState {
        self.fsm.state()
    }

    pub fn step(&mut self, event: HostEvent) -> Result<(HostState, HostState), IllegalTransition> {
        self.fsm.step(event)
    }

    /// Launch the app if absent and create its agent if none exists yet.
    pub fn ensure_agent(&mut self, desktop: &mut Desktop, app_id: &str, kind: impl FnOnce() -> AgentKind) -> Result<Provisioned, HostError> {
        let mut out = Provisioned::default();
        if !desktop.is_running(app_id) {
            out.launched = Some(desktop.launch_app(app_id)?);
            self.launches += 1;
        }
        if !self.agents.contains_key(app_id) {
            self.agents.insert(app_id.to_string(), AppAgent::new(app_id, kind()));
            out.created = true;
        }
        Ok(out)
    }

    pub fn agent_mut(&mut self, app_id: &str) -> Option<&mut AppAgent> {
        self.agents.get_mut(app_id)
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    /// Tear down every agent; returns the released app ids.
    pub fn release_all(&mut self) -> Vec<String> {
        std::mem::take(&mut self.agents).into_keys().collect()
    }
}
