//! Round evaluation: per-criterion scores aggregated into a verdict.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::planner::{JudgeInput, Planner};
use crate::simenv::DesktopState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Partial,
    Failure,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Success => "success",
            Verdict::Partial => "partial",
            Verdict::Failure => "failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub description: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub verdict: Verdict,
    pub criteria: Vec<CriterionScore>,
    pub rationale: String,
}

/// Success iff every score is 1, failure iff every score is 0, partial otherwise.
pub fn aggregate(scores: &[f64]) -> Verdict {
    if scores.iter().all(|&s| s >= 1.0) {
        Verdict::Success
    } else if scores.iter().all(|&s| s <= 0.0) {
        Verdict::Failure
    } else {
        Verdict::Partial
    }
}

impl EvaluationResult {
    pub fn from_scores(criteria: Vec<CriterionScore>, rationale: impl Into<String>) -> Self {
        let scores: Vec<f64> = criteria.iter().map(|c| c.score).collect();
        Self {
            verdict: aggregate(&scores),
            criteria,
            rationale: rationale.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("scenario declares no success predicates")]
    ScenarioCriteriaMissing,
    #[error("round {0} has not finished")]
    RoundNotTerminal(u32),
    #[error("no round {0}")]
    UnknownRound(u32),
    #[error("judge failed: {0}")]
    Judge(String),
}

/// A document-state check: `app.document[key] == expected`. Without `app`,
/// any running app whose document holds `key` may satisfy it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessPredicate {
    #[serde(default)]
    pub app: Option<String>,
    pub key: String,
    pub expected: Value,
    #[serde(default)]
    pub description: Option<String>,
}

impl SuccessPredicate {
    pub fn describe(&self) -> String {
        self.description.clone().unwrap_or_else(|| match &self.app {
            Some(app) => format!("{app}.{} == {}", self.key, self.expected),
            None => format!("{} == {}", self.key, self.expected),
        })
    }

    pub fn holds(&self, state: &DesktopState) -> bool {
        state
            .running_apps
            .values()
            .filter(|a| self.app.as_ref().is_none_or(|id| *id == a.app_id))
            .any(|a| a.document.get(&self.key) == Some(&self.expected))
    }
}

/// What an evaluator may look at.
pub struct EvalContext<'a> {
    pub request: &'a str,
    pub state: &'a DesktopState,
    /// Markdown rendering of the round.
    pub transcript: &'a str,
}

pub trait Evaluator {
    fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<EvaluationResult, EvalError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleEvaluator {
    pub predicates: Vec<SuccessPredicate>,
}

impl Evaluator for RuleEvaluator {
    fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<EvaluationResult, EvalError> {
        if self.predicates.is_empty() {
            return Err(EvalError::ScenarioCriteriaMissing);
        }
        let criteria: Vec<CriterionScore> = self
            .predicates
            .iter()
            .map(|p| CriterionScore {
                description: p.describe(),
                score: if p.holds(ctx.state) { 1.0 } else { 0.0 },
            })
            .collect();
        let met = criteria.iter().filter(|c| c.score >= 1.0).count();
        let rationale = format!("{met} of {} document predicates hold", criteria.len());
        Ok(EvaluationResult::from_scores(criteria, rationale))
    }
}

/// Delegates scoring to the planner's judge role.
pub struct JudgeEvaluator<'p> {
    pub planner: &'p Planner,
    pub criteria: Vec<String>,
}

impl Evaluator for JudgeEvaluator<'_> {
    fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<EvaluationResult, EvalError> {
        let input = JudgeInput {
            request: ctx.request.to_string(),
            criteria: self.criteria.clone(),
            transcript: ctx.transcript.to_string(),
        };
        let out = self.planner.judge(&input).map_err(|f| EvalError::Judge(f.error.to_string()))?;
        if out.value.criteria.is_empty() {
            return Err(EvalError::Judge("judge returned no criteria".into()));
        }
        let criteria = out
            .value
            .criteria
            .into_iter()
            .map(|c| CriterionScore {
                description: c.description,
                score: c.score,
            })
            .collect();
        Ok(EvaluationResult::from_scores(criteria, out.value.rationale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::AppInstance;
    use serde_json::json;
    use std::collections::BTreeMap;

    fn state(doc: &[(&str, Value)]) -> DesktopState {
        let mut s = DesktopState::default();
        s.running_apps.insert(
            "sheetapp".into(),
            AppInstance {
                app_id: "sheetapp".into(),
                handle: 1,
                controls: vec![],
                document: doc.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<BTreeMap<_, _>>(),
                crashed: false,
            },
        );
        s
    }

    fn pred(key: &str, expected: Value) -> SuccessPredicate {
        SuccessPredicate {
            app: Some("sheetapp".into()),
            key: key.into(),
            expected,
            description: None,
        }
    }

    fn eval(preds: Vec<SuccessPredicate>, s: &DesktopState) -> Result<EvaluationResult, EvalError> {
        RuleEvaluator { predicates: preds }.evaluate(&EvalContext {
            request: "r",
            state: s,
            transcript: "",
        })
    }

    #[test]
    fn all_some_none() {
        let s = state(&[("saved_format", json!("csv")), ("saved", json!(true))]);
        let ok = eval(vec![pred("saved_format", json!("csv")), pred("saved", json!(true))], &s).unwrap();
        assert_eq!(ok.verdict, Verdict::Success);
        let half = eval(vec![pred("saved_format", json!("csv")), pred("saved", json!(false))], &s).unwrap();
        assert_eq!(half.verdict, Verdict::Partial);
        let none = eval(vec![pred("saved_format", json!("xlsx"))], &s).unwrap();
        assert_eq!(none.verdict, Verdict::Failure);
    }

    #[test]
    fn empty_predicates_rejected() {
        assert_eq!(eval(vec![], &state(&[])), Err(EvalError::ScenarioCriteriaMissing));
    }

    #[test]
    fn fractional_scores_are_partial() {
        assert_eq!(aggregate(&[0.5]), Verdict::Partial);
        assert_eq!(aggregate(&[1.0, 1.0]), Verdict::Success);
        assert_eq!(aggregate(&[0.0, 0.0]), Verdict::Failure);
    }
}
