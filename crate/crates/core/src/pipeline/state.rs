use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{CodeSnippet, Verdict};
use crate::render::View;
use crate::schema::{AttributeSet, InputKind};
use crate::similarity::{Score, ScoreMode, SimilarityReport};
use crate::validator::ValidationError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("tau must be in (0, 1], got {0}")]
    Tau(f64),
    #[error("max_iterations must be at least 1")]
    MaxIterations,
}

/// Loop parameters for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerificationConfig {
    pub tau: f64,
    pub max_iterations: u32,
    /// Repair attempts allowed per synthesis step.
    pub repair_budget: u32,
    /// Scoring for image inputs. Text-only and multimodal sessions always
    /// use the VLM.
    pub mode: ScoreMode,
    pub cot_enabled: bool,
    pub refine_enabled: bool,
    pub few_shot_k: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            tau: 0.90,
            max_iterations: 5,
            repair_budget: 2,
            mode: ScoreMode::Embedding,
            cot_enabled: true,
            refine_enabled: true,
            few_shot_k: 3,
        }
    }
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ConfigError::Tau(self.tau));
        }
        if self.max_iterations == 0 {
            return Err(ConfigError::MaxIterations);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Created,
    Described,
    Drafted,
    Validated,
    Rendered,
    Evaluated,
    Refining,
    Accepted,
    Exhausted,
    Failed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Created => "created",
            Phase::Described => "described",
            Phase::Drafted => "drafted",
            Phase::Validated => "validated",
            Phase::Rendered => "rendered",
            Phase::Evaluated => "evaluated",
            Phase::Refining => "refining",
            Phase::Accepted => "accepted",
            Phase::Exhausted => "exhausted",
            Phase::Failed => "failed",
        }
    }

    /// Accepted, exhausted or failed. Accepted and exhausted sessions can
    /// still be reopened by an edit.
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Accepted | Phase::Exhausted | Phase::Failed)
    }

    pub fn is_editable(self) -> bool {
        matches!(self, Phase::Accepted | Phase::Exhausted)
    }

    /// Edges of the session graph. Drafted loops on itself for repairs;
    /// Validated returns to Drafted when a render trace is sent back.
    pub fn can_transition(self, to: Phase) -> bool {
        use Phase::*;
        if to == Failed {
            return self != Failed;
        }
        matches!(
            (self, to),
            (Created, Described)
                | (Described, Drafted)
                | (Drafted, Drafted)
                | (Drafted, Validated)
                | (Validated, Drafted)
                | (Validated, Rendered)
                | (Rendered, Evaluated)
                | (Evaluated, Accepted)
                | (Evaluated, Exhausted)
                | (Evaluated, Refining)
                | (Refining, Drafted)
                | (Refining, Accepted)
                | (Accepted, Refining)
                | (Exhausted, Refining)
        )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Refine,
    Exhaust,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Accept => "accept",
            Decision::Refine => "refine",
            Decision::Exhaust => "exhaust",
        })
    }
}

/// Where the session's input came from. The image itself is stored beside
/// the state, not inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind_override: Option<InputKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub snippet: CodeSnippet,
    /// Error lists of every rejected draft for this iteration, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<Vec<ValidationError>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub render_failures: Vec<String>,
    #[serde(default)]
    pub views: Vec<View>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    /// Edit instruction that opened this iteration, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

impl IterationRecord {
    pub fn report(&self) -> Option<&SimilarityReport> {
        self.verdict.as_ref().and_then(|v| v.report.as_ref())
    }

    pub fn score(&self) -> Option<Score> {
        self.report().map(|r| r.s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub instruction: String,
    /// Last iteration before the edit began.
    pub base_iteration: u32,
    pub identity_targeted: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attribute_deltas: BTreeMap<String, crate::schema::AttributeValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<OutcomeStatus>,
}

/// Everything the loop knows about one session; persisted as `state.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub input: InputSpec,
    pub config: VerificationConfig,
    pub phase: Phase,
    /// Iterations so far, counting edits; the first draft is iteration 1.
    pub iteration: u32,
    /// Iteration count at which the current budget began (0, or the base of
    /// the latest edit).
    pub round_start: u32,
    pub records: Vec<IterationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attrs: Option<AttributeSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_iteration: Option<u32>,
    /// Iteration whose snippet the session currently stands on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_iteration: Option<u32>,
    #[serde(default)]
    pub vlm_gate: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edits: Vec<EditRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank_entry: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl SessionState {
    pub fn new(id: impl Into<String>, input: InputSpec, config: VerificationConfig) -> Self {
        let now = Utc::now();
        Self {
            id: id.into(),
            input,
            config,
            phase: Phase::Created,
            iteration: 0,
            round_start: 0,
            records: Vec::new(),
            attrs: None,
            best_iteration: None,
            final_iteration: None,
            vlm_gate: false,
            edits: Vec::new(),
            failure: None,
            bank_entry: None,
            created_at: now,
            updated_at: now,
        }
    }

    pub fn record(&self, iteration: u32) -> Option<&IterationRecord> {
        self.records.iter().find(|r| r.iteration == iteration)
    }

    pub fn record_mut(&mut self, iteration: u32) -> Option<&mut IterationRecord> {
        self.records.iter_mut().find(|r| r.iteration == iteration)
    }

    /// Iterations used in the current budget.
    pub fn round_iterations(&self) -> u32 {
        self.iteration - self.round_start
    }

    pub fn status(&self) -> SessionStatus {
        match self.phase {
            Phase::Accepted => SessionStatus::Accepted,
            Phase::Exhausted => SessionStatus::ExhaustedBestEffort,
            Phase::Failed => SessionStatus::Failed,
            _ => SessionStatus::Running,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Accepted,
    ExhaustedBestEffort,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Accepted,
    ExhaustedBestEffort,
    Failed,
}

impl OutcomeStatus {
    /// CLI exit code: 0 accepted, 2 exhausted, 1 failed.
    pub fn exit_code(self) -> i32 {
        match self {
            OutcomeStatus::Accepted => 0,
            OutcomeStatus::ExhaustedBestEffort => 2,
            OutcomeStatus::Failed => 1,
        }
    }
}

impl fmt::Display for OutcomeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeStatus::Accepted => "accepted",
            OutcomeStatus::ExhaustedBestEffort => "exhausted_best_effort",
            OutcomeStatus::Failed => "failed",
        })
    }
}

/// Result of a run or an edit; persisted as `outcome.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub session: String,
    pub status: OutcomeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_iteration: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_snippet: Option<String>,
    /// Render file per view, relative to the session directory.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub final_renders: BTreeMap<View, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_report: Option<SimilarityReport>,
    pub iterations: u32,
    pub elapsed_ms: u64,
    #[serde(default)]
    pub no_changes: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = VerificationConfig::default();
        assert_eq!((c.tau, c.max_iterations, c.repair_budget, c.few_shot_k), (0.90, 5, 2, 3));
        assert!(c.cot_enabled && c.refine_enabled);
        assert_eq!(c.validate(), Ok(()));
    }

    #[test]
    fn config_bounds() {
        let bad = |f: fn(&mut VerificationConfig)| {
            let mut c = VerificationConfig::default();
            f(&mut c);
            c.validate()
        };
        assert_eq!(bad(|c| c.tau = 1.5), Err(ConfigError::Tau(1.5)));
        assert_eq!(bad(|c| c.tau = 0.0), Err(ConfigError::Tau(0.0)));
        assert!(bad(|c| c.tau = f64::NAN).is_err());
        assert_eq!(bad(|c| c.tau = 1.0), Ok(()));
        assert_eq!(bad(|c| c.max_iterations = 0), Err(ConfigError::MaxIterations));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: VerificationConfig = serde_json::from_str(r#"{"tau": 0.8}"#).unwrap();
        assert_eq!(c.tau, 0.8);
        assert_eq!(c.max_iterations, 5);
    }

    #[test]
    fn graph_edges() {
        use Phase::*;
        assert!(Created.can_transition(Described));
        assert!(Drafted.can_transition(Drafted));
        assert!(Evaluated.can_transition(Refining));
        assert!(Accepted.can_transition(Refining));
        assert!(Rendered.can_transition(Failed));
        assert!(!Failed.can_transition(Failed));
        assert!(!Created.can_transition(Rendered));
        assert!(!Accepted.can_transition(Drafted));
        assert!(!Failed.can_transition(Refining));
    }
}
