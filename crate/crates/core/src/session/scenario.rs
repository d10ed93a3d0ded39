//! Scenario files: a request, the apps to open first, success predicates,
//! and optionally the planner script and the human answers to replay.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::evaluate::{EvalError, EvaluationResult, RuleEvaluator, SuccessPredicate};
use super::interaction::{Decision, Interaction, Scripted};
use super::{RoundOutcome, Session, SessionError};
use crate::planner::{Script, ScriptedBackend};
use crate::runtime::{BundleError, CatalogBundle, RuntimeConfig, Services};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptSource {
    Path(PathBuf),
    Inline(Box<Script>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub request: String,
    #[serde(default)]
    pub app_fixtures: Vec<String>,
    #[serde(default)]
    pub success_predicates: Vec<SuccessPredicate>,
    #[serde(default)]
    pub planner_script: Option<ScriptSource>,
    /// Answers for safeguard prompts, in order.
    #[serde(default)]
    pub confirmations: Vec<Decision>,
    /// Answers for clarification prompts, in order.
    #[serde(default)]
    pub clarifications: Vec<String>,
    /// Directory relative script paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {reason}")]
    Load { path: String, reason: String },
    #[error("scenario has no planner script")]
    NoScript,
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// A finished scenario round. The session stays open so callers can export
/// or replay it.
pub struct ScenarioRun {
    pub session: Session,
    pub outcome: RoundOutcome,
    pub evaluation: Result<EvaluationResult, EvalError>,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let err = |reason: String| ScenarioError::Load {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut scenario: Scenario = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        scenario.base_dir = path.parent().map(Path::to_path_buf);
        Ok(scenario)
    }

    pub fn script(&self) -> Result<Script, ScenarioError> {
        match &self.planner_script {
            None => Err(ScenarioError::NoScript),
            Some(ScriptSource::Inline(s)) => Ok((**s).clone()),
            Some(ScriptSource::Path(p)) => {
                let full = match &self.base_dir {
                    Some(base) if p.is_relative() => base.join(p),
                    _ => p.clone(),
                };
                Script::load(&full).map_err(|reason| ScenarioError::Load {
                    path: full.display().to_string(),
                    reason,
                })
            }
        }
    }

    /// Human answers recorded in the scenario, as an interaction.
    pub fn interaction(&self) -> Scripted {
        Scripted::new(self.confirmations.iter().copied(), self.clarifications.iter().cloned())
    }

    /// Run against the bundle with the scenario's own planner script.
    pub fn run(&self, bundle: &CatalogBundle, config: RuntimeConfig, interaction: &mut dyn Interaction) -> Result<ScenarioRun, ScenarioError> {
        let services = bundle.services(Arc::new(ScriptedBackend::new(self.script()?)))?;
        self.run_with(bundle, Arc::new(services), config, interaction)
    }

    pub fn run_with(
        &self,
        bundle: &CatalogBundle,
        services: Arc<Services>,
        config: RuntimeConfig,
        interaction: &mut dyn Interaction,
    ) -> Result<ScenarioRun, ScenarioError> {
        let id = if self.name.is_empty() { "scenario" } else { &self.name };
        let mut session = Session::new(id, bundle.catalog.clone(), services, config);
        session.open_apps(&self.app_fixtures)?;
        let outcome = session.run_round(self.request.clone(), interaction)?;
        let index = session.rounds().len() as u32;
        let evaluator = RuleEvaluator {
            predicates: self.success_predicates.clone(),
        };
        let evaluation = session.evaluate_round(index, &evaluator);
        Ok(ScenarioRun {
            session,
            outcome,
            evaluation,
        })
    }
}
