//! Speculative multi-action execution.
//!
//! One planner call yields a batch; each action is validated against the
//! context left behind by its predecessors and executed in order. The first
//! failed validation or execution error stops the batch and the partial
//! report asks the agent to replan.

use serde::{Deserialize, Serialize};

use crate::domain::{
    ExecutedAction, ExecutionReport, HaltReason, Observation, Operation, Outcome, PlannedAction,
    SpeculativeBatch,
};
use crate::puppeteer::{ApiRegistry, ExecError};

pub const DEFAULT_MAX_BATCH: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "reason", content = "detail")]
pub enum ValidationFailure {
    #[error("target control `{0}` is not in the current context")]
    ControlMissing(String),
    #[error("target control `{0}` is not visible")]
    ControlInvisible(String),
    #[error("target control `{0}` is disabled")]
    ControlDisabled(String),
    #[error("GUI action has no target control")]
    MissingTarget,
    #[error("API `{0}` is not registered for this app")]
    UnknownApi(String),
    #[error("arguments rejected by schema: {0}")]
    SchemaViolation(String),
}

/// Decide whether `action` may run in `context` right now.
///
/// GUI actions need a visible, enabled target in the context. API calls need a
/// registered API whose schema accepts the arguments; failing that, an API
/// call still validates when its first GUI fallback step would.
pub fn validate(action: &PlannedAction, context: &Observation, registry: &ApiRegistry) -> Result<(), ValidationFailure> {
    if action.operation == Operation::ApiCall {
        let api = action.api_name().unwrap_or_default();
        let api_check = match registry.get(&context.app_id, api) {
            None => Err(ValidationFailure::UnknownApi(api.into())),
            Some(spec) => spec.check_args(&action.payload.args).map_err(ValidationFailure::SchemaViolation),
        };
        return match (api_check, action.payload.gui_fallback.first()) {
            (Ok(()), _) => Ok(()),
            (Err(_), Some(first)) if first.operation.is_gui() && validate(first, context, registry).is_ok() => Ok(()),
            (Err(e), _) => Err(e),
        };
    }
    let target = action.target.as_deref().ok_or(ValidationFailure::MissingTarget)?;
    let control = context
        .control(target)
        .ok_or_else(|| ValidationFailure::ControlMissing(target.into()))?;
    if !control.visible || control.stale {
        return Err(ValidationFailure::ControlInvisible(target.into()));
    }
    if !control.enabled {
        return Err(ValidationFailure::ControlDisabled(target.into()));
    }
    Ok(())
}

/// What the batch loop needs from the surrounding runtime.
pub trait BatchEnv {
    fn validate(&self, action: &PlannedAction, context: &Observation) -> Result<(), ValidationFailure>;
    fn execute(&mut self, action: &PlannedAction, context: &Observation) -> Result<Outcome, ExecError>;
    /// Re-observe the application after an action.
    fn refresh(&mut self, app_id: &str) -> Result<Observation, String>;
    /// Checked between actions, never during one.
    fn cancelled(&self) -> bool {
        false
    }
    /// Called for every validation failure, before the batch halts.
    fn on_validation_failure(&mut self, _index: usize, _action: &PlannedAction, _failure: &ValidationFailure) {}
}

pub fn run_batch(batch: &SpeculativeBatch, c0: Observation, env: &mut dyn BatchEnv) -> ExecutionReport {
    let app_id = c0.app_id.clone();
    let mut context = c0;
    let mut executed = Vec::with_capacity(batch.k());
    let mut halt = (HaltReason::None, None);

    for (i, action) in batch.actions().iter().enumerate() {
        if env.cancelled() {
            halt = (HaltReason::Cancelled, Some("cancelled".to_string()));
            break;
        }
        if let Err(failure) = env.validate(action, &context) {
            env.on_validation_failure(i, action, &failure);
            halt = (HaltReason::ValidationFailed, Some(failure.to_string()));
            break;
        }
        let result = env.execute(action, &context);
        let refreshed = env.refresh(&app_id);
        if let Ok(fresh) = &refreshed {
            context = fresh.clone();
        }
        match result {
            Ok(outcome) if !outcome.is_error() => executed.push(ExecutedAction {
                action: action.clone(),
                outcome,
            }),
            Ok(outcome) => {
                halt = (HaltReason::ExecutionError, outcome.message);
                break;
            }
            Err(e) => {
                halt = (HaltReason::ExecutionError, Some(e.to_string()));
                break;
            }
        }
        if let Err(e) = refreshed {
            if executed.len() < batch.k() {
                halt = (HaltReason::ExecutionError, Some(e));
                break;
            }
        }
    }

    ExecutionReport {
        halted_early: executed.len() < batch.k(),
        batch_size: batch.k(),
        executed,
        halt_reason: halt.0,
        halt_detail: halt.1,
        final_context: context,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{BoundingBox, Control, ControlSource};
    use crate::puppeteer::{ApiSpec, ArgSpec, ArgType, EffectRuleHandler};
    use serde_json::json;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn control(id: &str) -> Control {
        Control {
            id: id.into(),
            source: ControlSource::Accessibility,
            control_type: "Button".into(),
            label: id.into(),
            bbox: BoundingBox::new(0, 0, 5, 5).unwrap(),
            visible: true,
            enabled: true,
            som_mark: None,
            confidence: None,
            stale: false,
        }
    }

    /// Scripted environment: clicking a control may hide others.
    struct Toy {
        ctx: Observation,
        hides: BTreeMap<String, Vec<String>>,
        executed: Vec<String>,
        registry: ApiRegistry,
    }

    impl Toy {
        fn new(ids: &[&str]) -> Self {
            Self {
                ctx: Observation { app_id: "app".into(), screenshot_ref: String::new(), controls: ids.iter().map(|i| control(i)).collect(), timestamp: 0 },
                hides: BTreeMap::new(),
                executed: vec![],
                registry: ApiRegistry::new(),
            }
        }
    }

    impl BatchEnv for Toy {
        fn validate(&self, a: &PlannedAction, c: &Observation) -> Result<(), ValidationFailure> {
            validate(a, c, &self.registry)
        }
        fn execute(&mut self, a: &PlannedAction, _: &Observation) -> Result<Outcome, ExecError> {
            let target = a.target.clone().unwrap();
            self.executed.push(target.clone());
            if let Some(hidden) = self.hides.get(&target) {
                self.ctx.controls.retain(|c| !hidden.contains(&c.id));
            }
            Ok(Outcome::success(1))
        }
        fn refresh(&mut self, _: &str) -> Result<Observation, String> {
            self.ctx.timestamp += 1;
            Ok(self.ctx.clone())
        }
    }

    fn batch(ids: &[&str]) -> SpeculativeBatch {
        SpeculativeBatch::new(ids.iter().map(|i| PlannedAction::click(*i)).collect(), 5).unwrap()
    }

    #[test]
    fn layout_change_halts_before_third_action() {
        let mut env = Toy::new(&["paste", "quick_style", "grid_filled"]);
        env.hides.insert("quick_style".into(), vec!["grid_filled".into()]);
        let c0 = env.ctx.clone();
        let report = run_batch(&batch(&["paste", "quick_style", "grid_filled"]), c0, &mut env);
        assert_eq!(report.executed.len(), 2);
        assert!(report.halted_early);
        assert!(report.needs_replan());
        assert_eq!(report.halt_reason, HaltReason::ValidationFailed);
        assert_eq!(env.executed, ["paste", "quick_style"]);
        assert!(report.final_context.control("grid_filled").is_none());
    }

    #[test]
    fn single_valid_action() {
        let mut env = Toy::new(&["a"]);
        let c0 = env.ctx.clone();
        let report = run_batch(&batch(&["a"]), c0, &mut env);
        assert_eq!(report.executed.len(), 1);
        assert!(!report.halted_early);
        assert_eq!(report.halt_reason, HaltReason::None);
    }

    #[test]
    fn validation_reasons() {
        let mut ctx = Toy::new(&["a", "b", "c"]).ctx;
        ctx.controls[1].visible = false;
        ctx.controls[2].enabled = false;
        let reg = ApiRegistry::new();
        assert!(validate(&PlannedAction::click("a"), &ctx, &reg).is_ok());
        assert_eq!(validate(&PlannedAction::click("b"), &ctx, &reg), Err(ValidationFailure::ControlInvisible("b".into())));
        assert_eq!(validate(&PlannedAction::click("c"), &ctx, &reg), Err(ValidationFailure::ControlDisabled("c".into())));
        assert_eq!(validate(&PlannedAction::click("z"), &ctx, &reg), Err(ValidationFailure::ControlMissing("z".into())));
    }

    #[test]
    fn api_validation_uses_registry() {
        let mut reg = ApiRegistry::new();
        reg.register_api(
            ApiSpec {
                name: "save_as".into(),
                app_binding: "app".into(),
                argument_schema: vec![ArgSpec { name: "format".into(), semantic_type: ArgType::String, required: true }],
                description: String::new(),
                risk_tag: false,
            },
            Arc::new(EffectRuleHandler),
        )
        .unwrap();
        let ctx = Toy::new(&["menu"]).ctx;
        let ok = PlannedAction::api_call("save_as", BTreeMap::from([("format".into(), json!("csv"))]));
        assert!(validate(&ok, &ctx, &reg).is_ok());
        let missing = PlannedAction::api_call("save_as", BTreeMap::new());
        assert!(matches!(validate(&missing, &ctx, &reg), Err(ValidationFailure::SchemaViolation(_))));
        let mut unknown = PlannedAction::api_call("nope", BTreeMap::new());
        assert_eq!(validate(&unknown, &ctx, &reg), Err(ValidationFailure::UnknownApi("nope".into())));
        unknown.payload.gui_fallback = vec![PlannedAction::click("menu")];
        assert!(validate(&unknown, &ctx, &reg).is_ok());
    }

    #[test]
    fn cancellation_checked_between_actions() {
        struct Cancel(Toy);
        impl BatchEnv for Cancel {
            fn validate(&self, a: &PlannedAction, c: &Observation) -> Result<(), ValidationFailure> {
                self.0.validate(a, c)
            }
            fn execute(&mut self, a: &PlannedAction, c: &Observation) -> Result<Outcome, ExecError> {
                self.0.execute(a, c)
            }
            fn refresh(&mut self, id: &str) -> Result<Observation, String> {
                self.0.refresh(id)
            }
            fn cancelled(&self) -> bool {
                !self.0.executed.is_empty()
            }
        }
        let toy = Toy::new(&["a", "b"]);
        let c0 = toy.ctx.clone();
        let mut env = Cancel(toy);
        let report = run_batch(&batch(&["a", "b"]), c0, &mut env);
        assert_eq!(report.executed.len(), 1);
        assert_eq!(report.halt_reason, HaltReason::Cancelled);
    }
}
