//! Unified GUI/API execution: a per-application API registry and an executor
//! that prefers registered APIs and falls back to planner-supplied GUI steps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{ControlSource, Observation, Operation, Outcome, OutcomeStatus, PlannedAction};
use crate::simenv::{Desktop, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArgType {
    String,
    Integer,
    Number,
    Boolean,
    Array,
    Object,
    Any,
}

impl ArgType {
    fn accepts(self, value: &Value) -> bool {
        match self {
            ArgType::String => value.is_string(),
            ArgType::Integer => value.is_i64() || value.is_u64(),
            ArgType::Number => value.is_number(),
            ArgType::Boolean => value.is_boolean(),
            ArgType::Array => value.is_array(),
            ArgType::Object => value.is_object(),
            ArgType::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub semantic_type: ArgType,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiSpec {
    pub name: String,
    pub app_binding: String,
    #[serde(default)]
    pub argument_schema: Vec<ArgSpec>,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub risk_tag: bool,
}

impl ApiSpec {
    /// Check an argument map against the schema: required args present,
    /// declared types respected, no undeclared args.
    pub fn check_args(&self, args: &BTreeMap<String, Value>) -> Result<(), String> {
        for arg in &self.argument_schema {
            match args.get(&arg.name) {
                None if arg.required => return Err(format!("missing required argument `{}`", arg.name)),
                Some(v) if !arg.semantic_type.accepts(v) => {
                    return Err(format!("argument `{}` expects {:?}, got {v}", arg.name, arg.semantic_type))
                }
                _ => {}
            }
        }
        if let Some(extra) = args.keys().find(|k| !self.argument_schema.iter().any(|a| &a.name == *k)) {
            return Err(format!("unexpected argument `{extra}`"));
        }
        Ok(())
    }
}

/// Shape returned by API handlers: results on success, or an error message.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HandlerReply {
    #[serde(default)]
    pub results: Value,
    #[serde(default)]
    pub error: Option<String>,
}

pub trait ApiHandler: Send + Sync {
    /// Run the API against the app. Handlers must go through
    /// [`Desktop::apply_action`] to change application state.
    fn invoke(&self, desktop: &mut Desktop, app_id: &str, action: &PlannedAction) -> Result<HandlerReply, SimError>;
}

/// Default handler: the app's own effect rules implement the API.
#[derive(Debug, Default, Clone, Copy)]
pub struct EffectRuleHandler;

impl ApiHandler for EffectRuleHandler {
    fn invoke(&self, desktop: &mut Desktop, app_id: &str, action: &PlannedAction) -> Result<HandlerReply, SimError> {
        let outcome = desktop.apply_action(app_id, action)?;
        let error = outcome.is_error().then(|| outcome.message.clone().unwrap_or_default());
        Ok(HandlerReply {
            results: outcome.result.unwrap_or(Value::Null),
            error,
        })
    }
}

/// Handler that always fails without touching the desktop; models a missing
/// COM binding or a permission error.
#[derive(Debug, Clone)]
pub struct UnavailableHandler(pub String);

impl ApiHandler for UnavailableHandler {
    fn invoke(&self, _: &mut Desktop, _: &str, _: &PlannedAction) -> Result<HandlerReply, SimError> {
        Ok(HandlerReply {
            results: Value::Null,
            error: Some(self.0.clone()),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("API `{name}` already registered for `{app}`")]
    DuplicateApi { app: String, name: String },
    #[error("API `{name}` declares argument `{arg}` twice")]
    DuplicateArgument { name: String, arg: String },
    #[error("manifest binds unknown handler `{0}`")]
    UnknownHandler(String),
    #[error("reading API manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
}

struct RegisteredApi {
    spec: ApiSpec,
    handler: Arc<dyn ApiHandler>,
}

#[derive(Default)]
pub struct ApiRegistry {
    entries: BTreeMap<(String, String), RegisteredApi>,
}

impl fmt::Debug for ApiRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

/// One manifest row: an [`ApiSpec`] plus the name of the handler to bind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub spec: ApiSpec,
    #[serde(default = "default_handler")]
    pub handler: String,
}

fn default_handler() -> String {
    "effect_rules".into()
}

/// Named handlers a manifest may bind to.
pub struct HandlerTable(BTreeMap<String, Arc<dyn ApiHandler>>);

impl Default for HandlerTable {
    fn default() -> Self {
        let mut table: BTreeMap<String, Arc<dyn ApiHandler>> = BTreeMap::new();
        table.insert("effect_rules".into(), Arc::new(EffectRuleHandler));
        table.insert("unavailable".into(), Arc::new(UnavailableHandler("API binding unavailable".into())));
        Self(table)
    }
}

impl HandlerTable {
    pub fn insert(&mut self, name: impl Into<String>, handler: Arc<dyn ApiHandler>) {
        self.0.insert(name.into(), handler);
    }
}

impl ApiRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_api(&mut self, spec: ApiSpec, handler: Arc<dyn ApiHandler>) -> Result<(), RegistryError> {
        let mut names = BTreeSet::new();
        if let Some(dup) = spec.argument_schema.iter().find(|a| !names.insert(a.name.as_str())) {
            return Err(RegistryError::DuplicateArgument {
                name: spec.name.clone(),
                arg: dup.name.clone(),
            });
        }
        let key = (spec.app_binding.clone(), spec.name.clone());
        if self.entries.contains_key(&key) {
            return Err(RegistryError::DuplicateApi { app: key.0, name: key.1 });
        }
        self.entries.insert(key, RegisteredApi { spec, handler });
        Ok(())
    }

    pub fn load_manifest(&mut self, entries: Vec<ManifestEntry>, handlers: &HandlerTable) -> Result<(), RegistryError> {
        for entry in entries {
            let handler = handlers
                .0
                .get(&entry.handler)
                .cloned()
                .ok_or_else(|| RegistryError::UnknownHandler(entry.handler.clone()))?;
            self.register_api(entry.spec, handler)?;
        }
        Ok(())
    }

    pub fn load_manifest_file(&mut self, path: impl AsRef<Path>, handlers: &HandlerTable) -> Result<(), RegistryError> {
        let path = path.as_ref();
        let manifest_err = |reason: String| RegistryError::Manifest {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| manifest_err(e.to_string()))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| manifest_err(e.to_string()))?;
        self.load_manifest(entries, handlers)
    }

    pub fn get(&self, app_id: &str, name: &str) -> Option<&ApiSpec> {
        self.entries.get(&(app_id.to_string(), name.to_string())).map(|e| &e.spec)
    }

    fn handler(&self, app_id: &str, name: &str) -> Option<&Arc<dyn ApiHandler>> {
        self.entries.get(&(app_id.to_string(), name.to_string())).map(|e| &e.handler)
    }

    /// APIs offered to the planner for one app, ordered by name.
    pub fn action_space(&self, app_id: &str) -> Vec<&ApiSpec> {
        self.entries
            .iter()
            .filter(|((app, _), _)| app == app_id)
            .map(|(_, e)| &e.spec)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("schema violation for `{api}`: {reason}")]
    SchemaViolation { api: String, reason: String },
    #[error("API `{api}` is not registered for `{app}`")]
    UnknownApi { app: String, api: String },
    #[error("API `{api}` failed: {message}")]
    ApiHandlerError { api: String, message: String },
    #[error("fallback step must be a GUI action, got {0}")]
    InvalidFallback(Operation),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub struct Puppeteer {
    registry: Arc<ApiRegistry>,
}

impl Puppeteer {
    pub fn new(registry: Arc<ApiRegistry>) -> Self {
        Self { registry }
    }

    pub fn registry(&self) -> &Arc<ApiRegistry> {
        &self.registry
    }

    /// Execute one action in the context's application.
    ///
    /// API calls are validated before dispatch, so a schema failure never
    /// touches the desktop. If the API route fails and the action carries GUI
    /// fallback steps, those run instead and the outcome is tagged `fell_back`.
    pub fn execute(&self, desktop: &mut Desktop, action: &PlannedAction, context: &Observation) -> Result<Outcome, ExecError> {
        let app_id = context.app_id.as_str();
        if action.operation.is_gui() {
            let grounded = ground(desktop, action, context);
            return Ok(desktop.apply_action(app_id, grounded.as_ref().unwrap_or(action))?);
        }
        let (dispatched, api_err) = match self.call_api(desktop, app_id, action) {
            Ok(outcome) => return Ok(outcome),
            Err((dispatched, ExecError::Sim(e))) if dispatched => return Err(ExecError::Sim(e)),
            Err(pair) => pair,
        };
        if action.payload.gui_fallback.is_empty() {
            return Err(api_err);
        }
        tracing::debug!(api = ?action.api_name(), error = %api_err, "API route failed, running GUI fallback");
        let mut executor_actions = u32::from(dispatched);
        let mut last = Outcome::success(0);
        for step in &action.payload.gui_fallback {
            if !step.operation.is_gui() {
                return Err(ExecError::InvalidFallback(step.operation));
            }
            let grounded = ground(desktop, step, context);
            last = desktop.apply_action(app_id, grounded.as_ref().unwrap_or(step))?;
            executor_actions += 1;
            if last.is_error() {
                break;
            }
        }
        Ok(Outcome {
            status: last.status,
            message: Some(format!("fell back to GUI: {api_err}")),
            fell_back: true,
            executor_actions,
            result: last.result,
        })
    }

    /// Returns the error plus whether the call reached the environment.
    fn call_api(&self, desktop: &mut Desktop, app_id: &str, action: &PlannedAction) -> Result<Outcome, (bool, ExecError)> {
        let api = action.api_name().unwrap_or_default().to_string();
        let spec = self.registry.get(app_id, &api).ok_or_else(|| {
            (
                false,
                ExecError::UnknownApi {
                    app: app_id.into(),
                    api: api.clone(),
                },
            )
        })?;
        spec.check_args(&action.payload.args).map_err(|reason| {
            (
                false,
                ExecError::SchemaViolation {
                    api: api.clone(),
                    reason,
                },
            )
        })?;
        let handler = self.registry.handler(app_id, &api).expect("spec and handler registered together");
        let reply = handler.invoke(desktop, app_id, action).map_err(|e| (true, ExecError::Sim(e)))?;
        if let Some(message) = reply.error {
            return Err((true, ExecError::ApiHandlerError { api, message }));
        }
        Ok(Outcome {
            status: OutcomeStatus::Success,
            message: None,
            fell_back: false,
            executor_actions: 1,
            result: (!reply.results.is_null()).then_some(reply.results),
        })
    }
}

/// Vision-only targets have no accessibility handle, so the click lands at
/// the centre of the detected box and hits whatever control is there.
fn ground(desktop: &Desktop, action: &PlannedAction, context: &Observation) -> Option<PlannedAction> {
    let control = context.control(action.target.as_deref()?)?;
    if control.source != ControlSource::Vision {
        return None;
    }
    let b = control.bbox;
    let hit = desktop.control_at(&context.app_id, b.left + (b.right - b.left) / 2, b.top + (b.bottom - b.top) / 2)?;
    let mut grounded = action.clone();
    grounded.target = Some(hit);
    Some(grounded)
}
