//! Risk screening for planned actions.
//!
//! Rules are data: each one lists optional criteria (operation kind, API name,
//! control label, payload text) and matches when all of its criteria match.
//! Patterns are globs (`*`, `?`) unless prefixed with `re:`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{Operation, PlannedAction};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operation: Option<Operation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_pattern: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskRule {
    pub id: String,
    #[serde(rename = "match")]
    pub criteria: RuleMatch,
}

#[derive(Debug, thiserror::Error)]
pub enum SafeguardError {
    #[error("malformed risk rule `{id}`: {reason}")]
    MalformedRule { id: String, reason: String },
    #[error("reading ruleset {path}: {reason}")]
    Load { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenDecision {
    pub risky: bool,
    pub matched_rule: Option<String>,
}

impl ScreenDecision {
    pub fn safe() -> Self {
        Self {
            risky: false,
            matched_rule: None,
        }
    }
}

/// What the screen may know about an action beyond the action itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScreenContext<'a> {
    /// Label of the target control in the current observation.
    pub target_label: Option<&'a str>,
    /// The called API is registered with `risk_tag = true`.
    pub api_risk_tagged: bool,
}

pub trait RiskScreen: Send + Sync {
    fn screen(&self, action: &PlannedAction, ctx: ScreenContext<'_>) -> ScreenDecision;
}

#[derive(Debug, Clone)]
struct CompiledRule {
    id: String,
    operation: Option<Operation>,
    api: Option<Regex>,
    label: Option<Regex>,
    payload: Option<Regex>,
}

#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    rules: Vec<CompiledRule>,
}

fn compile_pattern(id: &str, pattern: &str) -> Result<Regex, SafeguardError> {
    let source = match pattern.strip_prefix("re:") {
        Some(re) => re.to_string(),
        None => {
            let mut re = String::from("^");
            for ch in pattern.chars() {
                match ch {
                    '*' => re.push_str(".*"),
                    '?' => re.push('.'),
                    c => re.push_str(&regex::escape(&c.to_string())),
                }
            }
            re.push('$');
            re
        }
    };
    Regex::new(&source).map_err(|e| SafeguardError::MalformedRule {
        id: id.into(),
        reason: e.to_string(),
    })
}

impl RuleSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_rules(rules: Vec<RiskRule>) -> Result<Self, SafeguardError> {
        let mut ids = BTreeSet::new();
        let mut compiled = Vec::with_capacity(rules.len());
        for rule in rules {
            let malformed = |reason: &str| SafeguardError::MalformedRule {
                id: rule.id.clone(),
                reason: reason.into(),
            };
            if rule.id.is_empty() {
                return Err(malformed("empty id"));
            }
            if !ids.insert(rule.id.clone()) {
                return Err(malformed("duplicate id"));
            }
            let m = &rule.criteria;
            if m == &RuleMatch::default() {
                return Err(malformed("no match criteria"));
            }
            let compile = |p: &Option<String>| p.as_deref().map(|p| compile_pattern(&rule.id, p)).transpose();
            compiled.push(CompiledRule {
                operation: m.operation,
                api: compile(&m.api_pattern)?,
                label: compile(&m.label_pattern)?,
                payload: compile(&m.payload_pattern)?,
                id: rule.id,
            });
        }
        Ok(Self { rules: compiled })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SafeguardError> {
        let path = path.as_ref();
        let load_err = |reason: String| SafeguardError::Load {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let rules: Vec<RiskRule> = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        Self::from_rules(rules)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

fn payload_strings(action: &PlannedAction) -> Vec<String> {
    let p = &action.payload;
    let mut out: Vec<String> = p.text.iter().chain(&p.keys).cloned().collect();
    for v in p.args.values() {
        match v {
            Value::String(s) => out.push(s.clone()),
            other => out.push(other.to_string()),
        }
    }
    out
}

impl CompiledRule {
    fn matches(&self, action: &PlannedAction, ctx: ScreenContext<'_>) -> bool {
        if self.operation.is_some_and(|op| op != action.operation) {
            return false;
        }
        if let Some(api) = &self.api {
            if !action.api_name().is_some_and(|name| api.is_match(name)) {
                return false;
            }
        }
        if let Some(label) = &self.label {
            if !ctx.target_label.is_some_and(|l| label.is_match(l)) {
                return false;
            }
        }
        if let Some(payload) = &self.payload {
            if !payload_strings(action).iter().any(|s| payload.is_match(s)) {
                return false;
            }
        }
        true
    }
}

impl RiskScreen for RuleSet {
    fn screen(&self, action: &PlannedAction, ctx: ScreenContext<'_>) -> ScreenDecision {
        if ctx.api_risk_tagged && action.operation == Operation::ApiCall {
            return ScreenDecision {
                risky: true,
                matched_rule: Some(format!("risk_tag:{}", action.api_name().unwrap_or_default())),
            };
        }
        match self.rules.iter().find(|r| r.matches(action, ctx)) {
            Some(rule) => ScreenDecision {
                risky: true,
                matched_rule: Some(rule.id.clone()),
            },
            None => ScreenDecision::safe(),
        }
    }
}
