//! Core data model shared by every runtime layer.
//!
//! All types here are plain values: cloneable, `Send + Sync`, and serialized
//! through serde into the canonical JSON used by traces and the wire protocol.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Axis-aligned box in window-relative integer pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoundingBox {
    pub left: i32,
    pub top: i32,
    pub right: i32,
    pub bottom: i32,
}

#[derive(Deserialize)]
struct RawBox {
    left: i32,
    top: i32,
    right: i32,
    bottom: i32,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = InvalidBox;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.left, raw.top, raw.right, raw.bottom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid bounding box ({left},{top},{right},{bottom}): edges are inverted")]
pub struct InvalidBox {
    pub left: i32,
    pub top: i32,
    pub right: i32,
    pub bottom: i32,
}

impl BoundingBox {
    pub fn new(left: i32, top: i32, right: i32, bottom: i32) -> Result<Self, InvalidBox> {
        if left > right || top > bottom {
            return Err(InvalidBox {
                left,
                top,
                right,
                bottom,
            });
        }
        Ok(Self {
            left,
            top,
            right,
            bottom,
        })
    }

    pub fn width(&self) -> u64 {
        (i64::from(self.right) - i64::from(self.left)) as u64
    }

    pub fn height(&self) -> u64 {
        (i64::from(self.bottom) - i64::from(self.top)) as u64
    }

    pub fn area(&self) -> u64 {
        self.width() * self.height()
    }

    /// Intersection box, or `None` when the boxes do not share positive area.
    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let left = self.left.max(other.left);
        let top = self.top.max(other.top);
        let right = self.right.min(other.right);
        let bottom = self.bottom.min(other.bottom);
        if left < right && top < bottom {
            Some(BoundingBox {
                left,
                top,
                right,
                bottom,
            })
        } else {
            None
        }
    }

    /// Shift every edge by the given offsets, keeping the box valid.
    pub fn translated(&self, dx: i32, dy: i32) -> BoundingBox {
        BoundingBox {
            left: self.left + dx,
            top: self.top + dy,
            right: self.right + dx,
            bottom: self.bottom + dy,
        }
    }
}

/// Exact intersection-over-union as an integer ratio.
///
/// A zero union is reported as `0/1`, so two degenerate boxes never overlap.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Iou {
    pub intersection: u64,
    pub union: u64,
}

impl Iou {
    pub const ZERO: Iou = Iou {
        intersection: 0,
        union: 1,
    };

    pub fn as_f64(&self) -> f64 {
        self.intersection as f64 / self.union as f64
    }

    /// `self > numerator / denominator`, decided in integer arithmetic.
    pub fn exceeds(&self, numerator: u64, denominator: u64) -> bool {
        u128::from(self.intersection) * u128::from(denominator)
            > u128::from(numerator) * u128::from(self.union)
    }
}

impl PartialEq for Iou {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Iou {}

impl PartialOrd for Iou {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Iou {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = u128::from(self.intersection) * u128::from(other.union);
        let rhs = u128::from(other.intersection) * u128::from(self.union);
        lhs.cmp(&rhs)
    }
}

impl fmt::Display for Iou {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.intersection, self.union)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Iou {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Iou::ZERO;
    }
    Iou {
        intersection: inter,
        union,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlSource {
    Accessibility,
    Vision,
}

/// One interactive UI element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub id: String,
    pub source: ControlSource,
    pub control_type: String,
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub visible: bool,
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub som_mark: Option<u32>,
    /// Detector confidence; present only for vision-sourced controls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stale: bool,
}

/// An agent's fused view of one application window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub app_id: String,
    pub screenshot_ref: String,
    pub controls: Vec<Control>,
    pub timestamp: u64,
}

impl Observation {
    pub fn empty(app_id: impl Into<String>, timestamp: u64) -> Self {
        Self {
            app_id: app_id.into(),
            screenshot_ref: String::new(),
            controls: Vec::new(),
            timestamp,
        }
    }

    pub fn control(&self, id: &str) -> Option<&Control> {
        self.controls.iter().find(|c| c.id == id)
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operation {
    Click,
    TypeText,
    Hotkey,
    ApiCall,
}

impl Operation {
    pub fn is_gui(self) -> bool {
        !matches!(self, Operation::ApiCall)
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Operation::Click => "Click",
            Operation::TypeText => "TypeText",
            Operation::Hotkey => "Hotkey",
            Operation::ApiCall => "ApiCall",
        };
        f.write_str(name)
    }
}

/// Arguments for a planned operation. Which fields matter depends on the
/// operation: `text` for TypeText, `keys` for Hotkey, `api`/`args` for ApiCall.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keys: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub args: BTreeMap<String, Value>,
    /// GUI steps to run if the API route fails.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gui_fallback: Vec<PlannedAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedAction {
    #[serde(default)]
    pub target: Option<String>,
    pub operation: Operation,
    #[serde(default)]
    pub payload: ActionPayload,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActionShapeError {
    #[error("{0} action requires a target control")]
    MissingTarget(Operation),
    #[error("ApiCall action does not name an API")]
    MissingApiName,
}

impl PlannedAction {
    pub fn click(target: impl Into<String>) -> Self {
        Self {
            target: Some(target.into()),
            operation: Operation::Click,
            payload: ActionPayload::default(),
            rationale: String::new(),
        }
    }

    pub fn type_text(target: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            target: Some(target.into()),
            operation: Operation::TypeText,
            payload: ActionPayload {
                text: Some(text.into()),
                ..ActionPayload::default()
            },
            rationale: String::new(),
        }
    }

    pub fn api_call(api: impl Into<String>, args: BTreeMap<String, Value>) -> Self {
        Self {
            target: None,
            operation: Operation::ApiCall,
            payload: ActionPayload {
                api: Some(api.into()),
                args,
                ..ActionPayload::default()
            },
            rationale: String::new(),
        }
    }

    pub fn with_rationale(mut self, rationale: impl Into<String>) -> Self {
        self.rationale = rationale.into();
        self
    }

    pub fn api_name(&self) -> Option<&str> {
        self.payload.api.as_deref()
    }

    /// Structural checks that do not need a registry or a context.
    pub fn check_shape(&self) -> Result<(), ActionShapeError> {
        match self.operation {
            Operation::ApiCall if self.payload.api.is_none() => Err(ActionShapeError::MissingApiName),
            op if op.is_gui() && self.target.is_none() => Err(ActionShapeError::MissingTarget(op)),
            _ => Ok(()),
        }
    }

    /// Short human-readable description, used in logs and experience records.
    pub fn describe(&self) -> String {
        match self.operation {
            Operation::ApiCall => {
                let args = serde_json::to_string(&self.payload.args).unwrap_or_default();
                format!("ApiCall {}({})", self.api_name().unwrap_or("?"), args)
            }
            Operation::TypeText => format!(
                "TypeText {:?} into {}",
                self.payload.text.as_deref().unwrap_or(""),
                self.target.as_deref().unwrap_or("?")
            ),
            Operation::Hotkey => format!(
                "Hotkey {} on {}",
                self.payload.keys.as_deref().unwrap_or(""),
                self.target.as_deref().unwrap_or("?")
            ),
            Operation::Click => format!("Click {}", self.target.as_deref().unwrap_or("?")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BatchError {
    #[error("speculative batch is empty")]
    Empty,
    #[error("batch of {len} actions exceeds the maximum of {max}")]
    TooLarge { len: usize, max: usize },
}

/// The planner's k-step speculation for one inference call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeculativeBatch {
    actions: Vec<PlannedAction>,
}

impl SpeculativeBatch {
    pub fn new(actions: Vec<PlannedAction>, max_k: usize) -> Result<Self, BatchError> {
        if actions.is_empty() {
            return Err(BatchError::Empty);
        }
        if actions.len() > max_k {
            return Err(BatchError::TooLarge {
                len: actions.len(),
                max: max_k,
            });
        }
        Ok(Self { actions })
    }

    pub fn actions(&self) -> &[PlannedAction] {
        &self.actions
    }

    pub fn k(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Success,
    /// No effect rule matched; the environment swallowed the input.
    NoOp,
    Error,
}

/// What happened when one action reached the executor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub status: OutcomeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fell_back: bool,
    /// Low-level environment mutations this action cost (1 per GUI event or API call).
    pub executor_actions: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
}

impl Outcome {
    pub fn success(executor_actions: u32) -> Self {
        Self {
            status: OutcomeStatus::Success,
            message: None,
            fell_back: false,
            executor_actions,
            result: None,
        }
    }

    pub fn no_op() -> Self {
        Self {
            status: OutcomeStatus::NoOp,
            message: Some("no effect rule matched".into()),
            fell_back: false,
            executor_actions: 1,
            result: None,
        }
    }

    pub fn is_error(&self) -> bool {
        self.status == OutcomeStatus::Error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedAction {
    pub action: PlannedAction,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HaltReason {
    None,
    ValidationFailed,
    ExecutionError,
    Cancelled,
}

/// Result of running one speculative batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub executed: Vec<ExecutedAction>,
    pub batch_size: usize,
    pub halted_early: bool,
    pub halt_reason: HaltReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt_detail: Option<String>,
    pub final_context: Observation,
}

impl ExecutionReport {
    /// Fewer actions ran than were predicted, so the agent must replan.
    pub fn needs_replan(&self) -> bool {
        self.executed.len() < self.batch_size
    }

    pub fn executor_actions(&self) -> u32 {
        self.executed.iter().map(|e| e.outcome.executor_actions).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub description: String,
    pub target_app: String,
    #[serde(default)]
    pub depends_on: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskPlan {
    pub subtasks: Vec<Subtask>,
    pub origin_request: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("subtask {subtask} depends on {dependency}, which does not precede it")]
    ForwardDependency { subtask: usize, dependency: usize },
    #[error("subtask {0} has an empty target application")]
    MissingTarget(usize),
}

impl SubtaskPlan {
    /// Dependencies must point strictly backwards, which also rules out cycles.
    pub fn validate(&self) -> Result<(), PlanError> {
        for (i, subtask) in self.subtasks.iter().enumerate() {
            if subtask.target_app.is_empty() {
                return Err(PlanError::MissingTarget(i));
            }
            if let Some(&dep) = subtask.depends_on.iter().find(|&&d| d >= i) {
                return Err(PlanError::ForwardDependency {
                    subtask: i,
                    dependency: dep,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HostState {
    Continue,
    Assign,
    Pending,
    Finish,
    Fail,
}

impl HostState {
    pub fn is_terminal(self) -> bool {
        matches!(self, HostState::Finish | HostState::Fail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AppState {
    Continue,
    Pending,
    Finish,
    Fail,
}

impl AppState {
    pub fn is_terminal(self) -> bool {
        matches!(self, AppState::Finish | AppState::Fail)
    }
}

impl fmt::Display for HostState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(state_name(serde_json::to_value(self)))
    }
}

impl fmt::Display for AppState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(state_name(serde_json::to_value(self)))
    }
}

fn state_name(value: serde_json::Result<Value>) -> &'static str {
    match value.ok().as_ref().and_then(Value::as_str) {
        Some("CONTINUE") => "CONTINUE",
        Some("ASSIGN") => "ASSIGN",
        Some("PENDING") => "PENDING",
        Some("FINISH") => "FINISH",
        Some("FAIL") => "FAIL",
        _ => "?",
    }
}

/// A state machine received an event its transition table does not allow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("illegal {machine} transition: {from} on {event}")]
pub struct IllegalTransition {
    pub machine: String,
    pub from: String,
    pub event: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    Result,
    Error,
    Insight,
    Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackboardEntry {
    pub seq: u64,
    pub author: String,
    pub kind: EntryKind,
    pub body: Value,
    pub round: u32,
}

/// Hex SHA-256 of a value's canonical JSON.
pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("domain values always serialize");
    hex::encode(Sha256::digest(&bytes))
}
