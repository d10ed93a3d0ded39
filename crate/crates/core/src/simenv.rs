//! Deterministic simulated desktop.
//!
//! Applications are declared as JSON documents (controls + effect rules). The
//! only way state changes is [`Desktop::launch_app`] or an effect rule fired by
//! [`Desktop::apply_action`]; every such call is journaled so a run can be
//! replayed against a fresh desktop.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{
    digest_json, ActionShapeError, BoundingBox, Control, ControlSource, Operation, Outcome,
    OutcomeStatus, PlannedAction,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("unknown app `{0}`")]
    UnknownApp(String),
    #[error("app `{0}` is not running")]
    AppNotRunning(String),
    #[error("control `{control}` not found in `{app}`")]
    ControlNotFound { app: String, control: String },
    #[error("control `{control}` in `{app}` is disabled")]
    ControlDisabled { app: String, control: String },
    #[error("app `{app}` crashed: {message}")]
    AppCrashed { app: String, message: String },
    #[error(transparent)]
    InvalidAction(#[from] ActionShapeError),
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("app `{app}`: {reason}")]
    Invalid { app: String, reason: String },
    #[error("app `{0}` defined twice")]
    DuplicateApp(String),
}

fn box_from_array<'de, D: serde::Deserializer<'de>>(d: D) -> Result<BoundingBox, D::Error> {
    let [l, t, r, b] = <[i32; 4]>::deserialize(d)?;
    BoundingBox::new(l, t, r, b).map_err(serde::de::Error::custom)
}

fn box_to_array<S: serde::Serializer>(b: &BoundingBox, s: S) -> Result<S::Ok, S::Error> {
    [b.left, b.top, b.right, b.bottom].serialize(s)
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTemplate {
    pub id: String,
    pub control_type: String,
    pub label: String,
    #[serde(rename = "box", deserialize_with = "box_from_array", serialize_with = "box_to_array")]
    pub bbox: BoundingBox,
    #[serde(default = "yes")]
    pub visible: bool,
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Not exposed through the accessibility dump; only a vision detector sees it.
    #[serde(default)]
    pub custom_rendered: bool,
    /// Named window/pane this control belongs to, for open/close effects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PayloadPredicate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keys: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub args: BTreeMap<String, Value>,
}

impl PayloadPredicate {
    fn matches(&self, action: &PlannedAction) -> bool {
        let p = &action.payload;
        self.text.as_ref().is_none_or(|t| p.text.as_ref() == Some(t))
            && self.keys.as_ref().is_none_or(|k| p.keys.as_ref() == Some(k))
            && self.args.iter().all(|(k, v)| p.args.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    /// Control id for GUI operations, API name for `ApiCall`.
    pub target: String,
    pub operation: Operation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<PayloadPredicate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Effect {
    Show { control: String },
    Hide { control: String },
    Enable { control: String },
    Disable { control: String },
    SetLabel { control: String, label: String },
    OpenWindow { window: String },
    CloseWindow { window: String },
    SetState { key: String, value: Value },
    EmitError {
        message: String,
        #[serde(default)]
        fatal: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRule {
    pub trigger: Trigger,
    /// Document-state keys that must hold these values for the rule to fire.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub precondition: BTreeMap<String, Value>,
    pub effects: Vec<Effect>,
    /// Result map reported back to the caller (API handlers surface it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppDefinition {
    pub app_id: String,
    pub display_name: String,
    pub controls: Vec<ControlTemplate>,
    #[serde(default)]
    pub effect_rules: Vec<EffectRule>,
    #[serde(default)]
    pub exposed_apis: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub initial_state: BTreeMap<String, Value>,
}

impl AppDefinition {
    pub fn validate(&self) -> Result<(), CatalogError> {
        let invalid = |reason: String| CatalogError::Invalid {
            app: self.app_id.clone(),
            reason,
        };
        let mut ids = BTreeSet::new();
        for c in &self.controls {
            if !ids.insert(c.id.as_str()) {
                return Err(invalid(format!("duplicate control id `{}`", c.id)));
            }
        }
        let windows: BTreeSet<&str> = self.controls.iter().filter_map(|c| c.window.as_deref()).collect();
        let apis: BTreeSet<&str> = self.exposed_apis.iter().map(String::as_str).collect();
        for (i, rule) in self.effect_rules.iter().enumerate() {
            let t = &rule.trigger;
            let known = if t.operation == Operation::ApiCall {
                apis.contains(t.target.as_str())
            } else {
                ids.contains(t.target.as_str())
            };
            if !known {
                return Err(invalid(format!("rule {i} triggers on unknown `{}`", t.target)));
            }
            for effect in &rule.effects {
                let missing = match effect {
                    Effect::Show { control }
                    | Effect::Hide { control }
                    | Effect::Enable { control }
                    | Effect::Disable { control }
                    | Effect::SetLabel { control, .. } => (!ids.contains(control.as_str())).then_some(control),
                    Effect::OpenWindow { window } | Effect::CloseWindow { window } => {
                        (!windows.contains(window.as_str())).then_some(window)
                    }
                    Effect::SetState { .. } | Effect::EmitError { .. } => None,
                };
                if let Some(name) = missing {
                    return Err(invalid(format!("rule {i} references unknown `{name}`")));
                }
            }
        }
        Ok(())
    }

    fn template(&self, id: &str) -> Option<&ControlTemplate> {
        self.controls.iter().find(|c| c.id == id)
    }
}

/// The set of applications a desktop can launch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    apps: BTreeMap<String, AppDefinition>,
}

impl Catalog {
    pub fn from_apps(apps: impl IntoIterator<Item = AppDefinition>) -> Result<Self, CatalogError> {
        let mut map = BTreeMap::new();
        for app in apps {
            app.validate()?;
            if map.contains_key(&app.app_id) {
                return Err(CatalogError::DuplicateApp(app.app_id));
            }
            map.insert(app.app_id.clone(), app);
        }
        Ok(Self { apps: map })
    }

    /// Load every `*.json` app document under `dir/apps` (or `dir` itself
    /// when there is no `apps` subdirectory).
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let dir = dir.as_ref();
        let apps_dir = if dir.join("apps").is_dir() { dir.join("apps") } else { dir.to_path_buf() };
        let io = |source| CatalogError::Io {
            path: apps_dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = fs::read_dir(&apps_dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let mut apps = Vec::with_capacity(paths.len());
        for path in paths {
            let text = fs::read_to_string(&path).map_err(|source| CatalogError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let app: AppDefinition = serde_json::from_str(&text).map_err(|source| CatalogError::Parse {
                path: path.display().to_string(),
                source,
            })?;
            apps.push(app);
        }
        Self::from_apps(apps)
    }

    pub fn get(&self, app_id: &str) -> Option<&AppDefinition> {
        self.apps.get(app_id)
    }

    pub fn apps(&self) -> impl Iterator<Item = &AppDefinition> {
        self.apps.values()
    }

    /// Digest identifying this exact catalog content; traces record it.
    pub fn fingerprint(&self) -> String {
        digest_json(&self.apps)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlState {
    pub id: String,
    pub label: String,
    pub visible: bool,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppInstance {
    pub app_id: String,
    pub handle: u32,
    pub controls: Vec<ControlState>,
    pub document: BTreeMap<String, Value>,
    pub crashed: bool,
}

impl AppInstance {
    fn control_mut(&mut self, id: &str) -> Option<&mut ControlState> {
        self.controls.iter_mut().find(|c| c.id == id)
    }

    pub fn control(&self, id: &str) -> Option<&ControlState> {
        self.controls.iter().find(|c| c.id == id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DesktopState {
    pub running_apps: BTreeMap<String, AppInstance>,
    pub focused_app: Option<String>,
    pub tick: u64,
    pub next_handle: u32,
}

pub fn state_hash(state: &DesktopState) -> String {
    digest_json(state)
}

/// One journaled call that may have changed the desktop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    Launch { app_id: String },
    Action { app_id: String, action: PlannedAction },
}

/// Raw perception of one app: what accessibility exposes and what only a
/// vision model could see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub app_id: String,
    pub screenshot_ref: String,
    pub accessibility: Vec<Control>,
    pub vision_only: Vec<Control>,
    pub tick: u64,
}

#[derive(Debug)]
pub struct Desktop {
    catalog: Arc<Catalog>,
    state: DesktopState,
    journal: Vec<Mutation>,
    artifacts: Mutex<BTreeMap<String, String>>,
}

impl Clone for Desktop {
    fn clone(&self) -> Self {
        Self {
            catalog: Arc::clone(&self.catalog),
            state: self.state.clone(),
            journal: self.journal.clone(),
            artifacts: Mutex::new(self.artifacts.lock().clone()),
        }
    }
}

impl Desktop {
    pub fn new(catalog: Arc<Catalog>) -> Self {
        Self {
            catalog,
            state: DesktopState::default(),
            journal: Vec::new(),
            artifacts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn state(&self) -> &DesktopState {
        &self.state
    }

    pub fn state_hash(&self) -> String {
        state_hash(&self.state)
    }

    pub fn journal(&self) -> &[Mutation] {
        &self.journal
    }

    pub fn drain_journal(&mut self) -> Vec<Mutation> {
        std::mem::take(&mut self.journal)
    }

    pub fn is_running(&self, app_id: &str) -> bool {
        self.state.running_apps.get(app_id).is_some_and(|a| !a.crashed)
    }

    pub fn instance(&self, app_id: &str) -> Option<&AppInstance> {
        self.state.running_apps.get(app_id)
    }

    /// Launch an app, or return the existing handle if it is already running.
    pub fn launch_app(&mut self, app_id: &str) -> Result<u32, SimError> {
        let def = self.catalog.get(app_id).ok_or_else(|| SimError::UnknownApp(app_id.into()))?;
        if let Some(existing) = self.state.running_apps.get(app_id).filter(|a| !a.crashed) {
            return Ok(existing.handle);
        }
        self.journal.push(Mutation::Launch { app_id: app_id.into() });
        let handle = self.state.next_handle;
        self.state.next_handle += 1;
        let instance = AppInstance {
            app_id: app_id.into(),
            handle,
            controls: def
                .controls
                .iter()
                .map(|c| ControlState {
                    id: c.id.clone(),
                    label: c.label.clone(),
                    visible: c.visible,
                    enabled: c.enabled,
                })
                .collect(),
            document: def.initial_state.clone(),
            crashed: false,
        };
        self.state.running_apps.insert(app_id.into(), instance);
        self.state.focused_app = Some(app_id.into());
        self.state.tick += 1;
        Ok(handle)
    }

    /// Fire the first effect rule matching `action` in `app_id`.
    pub fn apply_action(&mut self, app_id: &str, action: &PlannedAction) -> Result<Outcome, SimError> {
        self.journal.push(Mutation::Action {
            app_id: app_id.into(),
            action: action.clone(),
        });
        action.check_shape()?;
        let def = Arc::clone(&self.catalog);
        let def = def.get(app_id).ok_or_else(|| SimError::UnknownApp(app_id.into()))?;
        let instance = self
            .state
            .running_apps
            .get(app_id)
            .filter(|a| !a.crashed)
            .ok_or_else(|| SimError::AppNotRunning(app_id.into()))?;

        let trigger_target = if action.operation == Operation::ApiCall {
            action.api_name().unwrap_or_default().to_string()
        } else {
            let target = action.target.clone().unwrap_or_default();
            let control = instance
                .control(&target)
                .filter(|c| c.visible)
                .ok_or_else(|| SimError::ControlNotFound {
                    app: app_id.into(),
                    control: target.clone(),
                })?;
            if !control.enabled {
                return Err(SimError::ControlDisabled {
                    app: app_id.into(),
                    control: target,
                });
            }
            target
        };

        let rule = def.effect_rules.iter().find(|rule| {
            rule.trigger.target == trigger_target
                && rule.trigger.operation == action.operation
                && rule.trigger.payload.as_ref().is_none_or(|p| p.matches(action))
                && rule.precondition.iter().all(|(k, v)| instance.document.get(k) == Some(v))
        });

        self.state.tick += 1;
        self.state.focused_app = Some(app_id.into());
        let Some(rule) = rule else {
            return Ok(Outcome::no_op());
        };

        let instance = self.state.running_apps.get_mut(app_id).expect("checked above");
        let render_ctx = RenderContext {
            action,
            document: instance.document.clone(),
        };
        for effect in &rule.effects {
            match effect {
                Effect::Show { control } => set_flag(instance, control, |c| c.visible = true),
                Effect::Hide { control } => set_flag(instance, control, |c| c.visible = false),
                Effect::Enable { control } => set_flag(instance, control, |c| c.enabled = true),
                Effect::Disable { control } => set_flag(instance, control, |c| c.enabled = false),
                Effect::SetLabel { control, label } => {
                    let label = render_str(label, &render_ctx);
                    set_flag(instance, control, |c| c.label = label.clone());
                }
                Effect::OpenWindow { window } | Effect::CloseWindow { window } => {
                    let show = matches!(effect, Effect::OpenWindow { .. });
                    for t in def.controls.iter().filter(|t| t.window.as_deref() == Some(window)) {
                        set_flag(instance, &t.id, |c| c.visible = show);
                    }
                }
                Effect::SetState { key, value } => {
                    instance.document.insert(key.clone(), render_value(value, &render_ctx));
                }
                Effect::EmitError { message, fatal } => {
                    let message = render_str(message, &render_ctx);
                    if *fatal {
                        instance.crashed = true;
                        return Err(SimError::AppCrashed {
                            app: app_id.into(),
                            message,
                        });
                    }
                    return Ok(Outcome {
                        status: OutcomeStatus::Error,
                        message: Some(message),
                        fell_back: false,
                        executor_actions: 1,
                        result: None,
                    });
                }
            }
        }
        let mut outcome = Outcome::success(1);
        outcome.result = rule.result.as_ref().map(|r| render_value(r, &render_ctx));
        Ok(outcome)
    }

    /// Read-only capture of an app's controls. Custom-rendered controls are
    /// withheld from the accessibility dump and surface in `vision_only`
    /// while visible.
    pub fn snapshot(&self, app_id: &str) -> Result<Snapshot, SimError> {
        let def = self.catalog.get(app_id).ok_or_else(|| SimError::UnknownApp(app_id.into()))?;
        let instance = self
            .state
            .running_apps
            .get(app_id)
            .filter(|a| !a.crashed)
            .ok_or_else(|| SimError::AppNotRunning(app_id.into()))?;
        let mut accessibility = Vec::new();
        let mut vision_only = Vec::new();
        for live in &instance.controls {
            let template = def.template(&live.id).expect("instance mirrors its definition");
            let control = Control {
                id: live.id.clone(),
                source: ControlSource::Accessibility,
                control_type: template.control_type.clone(),
                label: live.label.clone(),
                bbox: template.bbox,
                visible: live.visible,
                enabled: live.enabled,
                som_mark: None,
                confidence: None,
                stale: false,
            };
            if template.custom_rendered {
                if live.visible {
                    vision_only.push(control);
                }
            } else {
                accessibility.push(control);
            }
        }
        let screenshot_ref = format!("{app_id}@{}", self.state.tick);
        let layout: Vec<&Control> = accessibility.iter().chain(&vision_only).filter(|c| c.visible).collect();
        let layout = serde_json::to_string(&layout).expect("controls serialize");
        self.artifacts.lock().insert(screenshot_ref.clone(), layout);
        Ok(Snapshot {
            app_id: app_id.into(),
            screenshot_ref,
            accessibility,
            vision_only,
            tick: self.state.tick,
        })
    }

    /// Id of the visible control under a point, preferring the smallest box.
    pub fn control_at(&self, app_id: &str, x: i32, y: i32) -> Option<String> {
        let def = self.catalog.get(app_id)?;
        let instance = self.state.running_apps.get(app_id).filter(|a| !a.crashed)?;
        instance
            .controls
            .iter()
            .filter(|c| c.visible)
            .filter_map(|c| def.template(&c.id).map(|t| (c, t.bbox)))
            .filter(|(_, b)| b.left <= x && x < b.right && b.top <= y && y < b.bottom)
            .min_by_key(|(_, b)| b.area())
            .map(|(c, _)| c.id.clone())
    }

    /// Serialized visible layout stored for a screenshot handle.
    pub fn artifact(&self, screenshot_ref: &str) -> Option<String> {
        self.artifacts.lock().get(screenshot_ref).cloned()
    }

    /// Running apps as `(app_id, display_name, handle)`.
    pub fn summary(&self) -> Vec<(String, String, u32)> {
        self.state
            .running_apps
            .values()
            .filter(|a| !a.crashed)
            .map(|a| {
                let name = self.catalog.get(&a.app_id).map(|d| d.display_name.clone()).unwrap_or_default();
                (a.app_id.clone(), name, a.handle)
            })
            .collect()
    }
}

fn set_flag(instance: &mut AppInstance, control: &str, f: impl FnOnce(&mut ControlState)) {
    if let Some(c) = instance.control_mut(control) {
        f(c);
    }
}

struct RenderContext<'a> {
    action: &'a PlannedAction,
    document: BTreeMap<String, Value>,
}

impl RenderContext<'_> {
    fn lookup(&self, path: &str) -> Option<Value> {
        let payload = &self.action.payload;
        match path.split_once('.') {
            Some(("args", key)) => payload.args.get(key).cloned(),
            Some(("state", key)) => self.document.get(key).cloned(),
            None if path == "text" => payload.text.clone().map(Value::String),
            None if path == "keys" => payload.keys.clone().map(Value::String),
            _ => None,
        }
    }
}

/// Expand `{args.x}`, `{state.x}`, `{text}` and `{keys}` placeholders. A
/// string consisting of a single placeholder keeps the referenced JSON type.
fn render_value(value: &Value, ctx: &RenderContext<'_>) -> Value {
    match value {
        Value::String(s) => {
            if let Some(inner) = s.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
                if !inner.contains(['{', '}']) {
                    if let Some(v) = ctx.lookup(inner) {
                        return v;
                    }
                }
            }
            Value::String(render_str(s, ctx))
        }
        Value::Array(items) => Value::Array(items.iter().map(|v| render_value(v, ctx)).collect()),
        Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), render_value(v, ctx))).collect()),
        other => other.clone(),
    }
}

fn render_str(template: &str, ctx: &RenderContext<'_>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let path = &after[..close];
                match ctx.lookup(path) {
                    Some(Value::String(s)) => out.push_str(&s),
                    Some(v) => out.push_str(&v.to_string()),
                    None => {
                        out.push('{');
                        out.push_str(path);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
