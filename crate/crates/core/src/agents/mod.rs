//! The five agent roles, their prompt contracts and the LLM backend seam.
//!
//! Each `invoke_*` function assembles a prompt, logs the request, calls the
//! backend, logs the completion, and only then parses it. Unparseable
//! completions are re-prompted [`FORMAT_RETRIES`] times with a format
//! reminder before the call fails.

mod backend;
mod http;
mod mock;
mod prompt;

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use backend::{
    BackendError, Capabilities, LlmBackend, LlmRequest, PromptPart, ScriptEntry, ScriptedBackend, TranscriptScript,
};
pub use http::{ChatBackend, ChatBackendConfig};
pub use mock::MockBackend;
pub use prompt::{
    assemble_prompt, find_section, format_reminder, phase_sentinels, section, FewShotExample, PromptContext,
    PromptOptions, ALL_PHASE_SENTINELS, CODE_PHASES, DESCRIPTOR_PHASES, EVALUATOR_PHASES, EXAMPLE_TAG,
};

use crate::render::RenderResult;
use crate::schema::{
    fuse, validate_attributes, ApiSchema, AttributeError, AttributeSet, AttributeValue, FusionReport, InputKind,
    Source, Violation,
};
use crate::similarity::{score_render, Providers, Score, ScoreMode, SimilarityError, SimilarityReport, SubScoreKey};
use crate::validator::{detect_no_changes, extract_region};

/// Re-prompts allowed after an unparseable completion.
pub const FORMAT_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Descriptor,
    Generator,
    Evaluator,
    Refiner,
    Editor,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Descriptor,
        AgentRole::Generator,
        AgentRole::Evaluator,
        AgentRole::Refiner,
        AgentRole::Editor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Descriptor => "descriptor",
            AgentRole::Generator => "generator",
            AgentRole::Evaluator => "evaluator",
            AgentRole::Refiner => "refiner",
            AgentRole::Editor => "editor",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum Payload {
    AttributeDoc(String),
    SnippetText(String),
    VerdictDoc(String),
    InstructionText(String),
}

impl Payload {
    /// Whether this payload is what `role` produces.
    pub fn fits(&self, role: AgentRole) -> bool {
        matches!(
            (role, self),
            (AgentRole::Descriptor, Payload::AttributeDoc(_))
                | (AgentRole::Generator | AgentRole::Refiner | AgentRole::Editor, Payload::SnippetText(_))
                | (AgentRole::Evaluator, Payload::VerdictDoc(_))
        )
    }
}

/// A typed record of one agent output, as written to the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub role: AgentRole,
    pub session_id: String,
    pub iteration: u32,
    pub payload: Payload,
    pub context_refs: Vec<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("{role} backend call failed: {source}")]
    Backend { role: AgentRole, source: BackendError },
    #[error("missing context: {0}")]
    MissingArtifact(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("backend `{backend}` lacks {capability} capability")]
    Capability { backend: String, capability: &'static str },
    #[error("{role} completion has no snippet region after {attempts} attempt(s)")]
    Extraction { role: AgentRole, attempts: u32 },
    #[error("{role} completion could not be parsed after {attempts} attempt(s)")]
    Unparseable { role: AgentRole, attempts: u32, last: String },
    #[error(transparent)]
    Attributes(#[from] AttributeError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

impl AgentError {
    pub fn is_backend(&self) -> bool {
        matches!(self, AgentError::Backend { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentEventKind {
    Request,
    Completion,
    Error,
}

/// Write-ahead record of one backend exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEvent {
    pub role: AgentRole,
    pub iteration: u32,
    pub attempt: u32,
    pub kind: AgentEventKind,
    pub backend: String,
    pub body: serde_json::Value,
}

/// Sink for backend exchanges. Called before a completion is used.
pub trait AgentLog {
    fn record(&self, event: AgentEvent);
}

/// Discards everything.
pub struct NullLog;

impl AgentLog for NullLog {
    fn record(&self, _event: AgentEvent) {}
}

impl<F: Fn(AgentEvent)> AgentLog for F {
    fn record(&self, event: AgentEvent) {
        self(event)
    }
}

/// Calls `backend` until `parse` accepts the completion, re-prompting with a
/// format reminder at most [`FORMAT_RETRIES`] times.
fn call_agent<T>(
    backend: &dyn LlmBackend,
    role: AgentRole,
    iteration: u32,
    parts: Vec<PromptPart>,
    log: &dyn AgentLog,
    mut parse: impl FnMut(&str) -> Option<T>,
) -> Result<T, AgentError> {
    let mut last = String::new();
    for attempt in 0..=FORMAT_RETRIES {
        let mut request = LlmRequest {
            role,
            iteration,
            parts: parts.clone(),
        };
        if attempt > 0 {
            request.parts.push(PromptPart::Text(format_reminder(role)));
        }
        let event = |kind, body| AgentEvent {
            role,
            iteration,
            attempt,
            kind,
            backend: backend.name().to_string(),
            body,
        };
        log.record(event(AgentEventKind::Request, request.log_value()));
        let completion = match backend.call(&request) {
            Ok(c) => c,
            Err(source) => {
                log.record(event(AgentEventKind::Error, json!({ "error": source.to_string() })));
                return Err(AgentError::Backend { role, source });
            }
        };
        log.record(event(AgentEventKind::Completion, json!({ "text": completion })));
        if let Some(v) = parse(&completion) {
            return Ok(v);
        }
        last = completion;
    }
    Err(AgentError::Unparseable {
        role,
        attempts: FORMAT_RETRIES + 1,
        last,
    })
}

fn require_vision(backend: &dyn LlmBackend) -> Result<(), AgentError> {
    if backend.capabilities().vision {
        Ok(())
    } else {
        Err(AgentError::Capability {
            backend: backend.name().to_string(),
            capability: "vision",
        })
    }
}

// ---------------------------------------------------------------- descriptor

#[derive(Debug, Clone, Copy, Default)]
pub struct DescriptorInput<'a> {
    pub text: Option<&'a str>,
    pub image: Option<&'a [u8]>,
    /// Forces portrait or full_body for image inputs.
    pub kind_override: Option<InputKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorOutput {
    pub attrs: AttributeSet,
    pub input_kind: InputKind,
    pub fusion: Option<FusionReport>,
    /// Entries the completion proposed that failed schema validation.
    pub dropped: Vec<Violation>,
}

fn json_candidates(text: &str) -> Vec<&str> {
    let mut out = vec![text.trim()];
    if let Some(start) = text.find("```json") {
        let rest = &text[start + 7..];
        if let Some(end) = rest.find("```") {
            out.push(rest[..end].trim());
        }
    }
    if let (Some(a), Some(b)) = (text.find('{'), text.rfind('}')) {
        if a < b {
            out.push(&text[a..=b]);
        }
    }
    out
}

/// Reads the descriptor's attribute document. Entries may be
/// `{"value": v, "source": s}` objects or bare values; sources are
/// overwritten with `source`. Invalid entries are removed and returned.
pub fn parse_descriptor_completion(
    text: &str,
    schema: &ApiSchema,
    source: Source,
    base_kind: InputKind,
) -> Option<(AttributeSet, Option<InputKind>, Vec<Violation>)> {
    let doc = json_candidates(text)
        .into_iter()
        .find_map(|c| serde_json::from_str::<serde_json::Value>(c).ok().filter(|v| v.get("entries").is_some_and(|e| e.is_object())))?;
    let claimed = doc
        .get("input_kind")
        .and_then(|k| serde_json::from_value::<InputKind>(k.clone()).ok());
    let mut attrs = AttributeSet::new(base_kind).with_schema(schema);
    for (path, raw) in doc["entries"].as_object()? {
        let raw = raw.get("value").unwrap_or(raw);
        let value = match raw {
            serde_json::Value::Number(n) => AttributeValue::Scalar(n.as_f64()?),
            serde_json::Value::String(s) => AttributeValue::Text(s.clone()),
            _ => continue,
        };
        attrs.insert(path.clone(), value, source);
    }
    let report = validate_attributes(&attrs, schema);
    for v in &report.violations {
        attrs.entries.remove(&v.path);
    }
    Some((attrs, claimed, report.violations))
}

fn describe_one(
    ctx: PromptContext<'_>,
    source: Source,
    base_kind: InputKind,
    backend: &dyn LlmBackend,
    schema: &ApiSchema,
    options: &PromptOptions,
    log: &dyn AgentLog,
) -> Result<(AttributeSet, Option<InputKind>, Vec<Violation>), AgentError> {
    let parts = assemble_prompt(AgentRole::Descriptor, &ctx, options, schema)?;
    call_agent(backend, AgentRole::Descriptor, 0, parts, log, |c| {
        parse_descriptor_completion(c, schema, source, base_kind)
    })
}

/// Extracts a validated attribute set from the input. Image and text are
/// described separately and fused when both are present.
pub fn invoke_descriptor(
    input: DescriptorInput<'_>,
    backend: &dyn LlmBackend,
    schema: &ApiSchema,
    options: &PromptOptions,
    log: &dyn AgentLog,
) -> Result<DescriptorOutput, AgentError> {
    let text = input.text.filter(|t| !t.trim().is_empty());
    if text.is_none() && input.image.is_none() {
        return Err(AgentError::Precondition("input needs an image or a text description".into()));
    }
    if input.image.is_some() {
        require_vision(backend)?;
    }
    let from_image = match input.image {
        Some(img) => {
            let ctx = PromptContext {
                input_image: Some(img),
                ..Default::default()
            };
            let (mut attrs, claimed, dropped) =
                describe_one(ctx, Source::Image, InputKind::Portrait, backend, schema, options, log)?;
            let kind = match input.kind_override.or(claimed) {
                Some(k @ (InputKind::Portrait | InputKind::FullBody)) => k,
                _ => InputKind::Portrait,
            };
            attrs.input_kind = kind;
            Some((attrs, dropped))
        }
        None => None,
    };
    let from_text = match text {
        Some(t) => {
            let ctx = PromptContext {
                input_text: Some(t),
                ..Default::default()
            };
            let (attrs, _, dropped) = describe_one(ctx, Source::Text, InputKind::TextOnly, backend, schema, options, log)?;
            Some((attrs, dropped))
        }
        None => None,
    };
    Ok(match (from_image, from_text) {
        (Some((img, mut d1)), Some((txt, d2))) => {
            let (attrs, report) = fuse(&img, &txt)?;
            d1.extend(d2);
            DescriptorOutput {
                input_kind: attrs.input_kind,
                attrs,
                fusion: Some(report),
                dropped: d1,
            }
        }
        (Some((attrs, dropped)), None) | (None, Some((attrs, dropped))) => DescriptorOutput {
            input_kind: attrs.input_kind,
            attrs,
            fusion: None,
            dropped,
        },
        (None, None) => unreachable!("checked above"),
    })
}

// ---------------------------------------------------------------- snippets

/// A region-bounded snippet and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSnippet {
    pub body: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub analysis: Vec<String>,
    pub iteration: u32,
    pub agent: AgentRole,
    /// Format re-prompts plus repair attempts that preceded this snippet.
    pub repairs: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples_used: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_iteration: Option<u32>,
}

fn extract_snippet(
    backend: &dyn LlmBackend,
    role: AgentRole,
    iteration: u32,
    parts: Vec<PromptPart>,
    log: &dyn AgentLog,
    allow_no_changes: bool,
) -> Result<Option<crate::validator::Region>, AgentError> {
    let result = call_agent(backend, role, iteration, parts, log, |c| {
        if allow_no_changes && extract_region(c).is_err() && detect_no_changes(c) {
            return Some(None);
        }
        extract_region(c).ok().map(Some)
    });
    match result {
        Err(AgentError::Unparseable { role, attempts, .. }) => Err(AgentError::Extraction { role, attempts }),
        other => other,
    }
}

pub struct GeneratorCall<'a> {
    pub attrs: &'a AttributeSet,
    pub examples: &'a [FewShotExample],
    pub iteration: u32,
    /// Validation errors or a render trace from the previous attempt.
    pub repair: Option<&'a str>,
}

pub fn invoke_generator(
    call: GeneratorCall<'_>,
    backend: &dyn LlmBackend,
    schema: &ApiSchema,
    options: &PromptOptions,
    log: &dyn AgentLog,
) -> Result<CodeSnippet, AgentError> {
    let ctx = PromptContext {
        attrs: Some(call.attrs),
        examples: call.examples,
        repair: call.repair,
        ..Default::default()
    };
    let parts = assemble_prompt(AgentRole::Generator, &ctx, options, schema)?;
    let region = extract_snippet(backend, AgentRole::Generator, call.iteration, parts, log, false)?
        .expect("no-changes disabled for the generator");
    Ok(CodeSnippet {
        body: region.body,
        analysis: region.analysis,
        iteration: call.iteration,
        agent: AgentRole::Generator,
        repairs: 0,
        examples_used: call.examples.iter().take(options.few_shot_k).map(|e| e.id.clone()).collect(),
        parent_iteration: None,
    })
}

// ---------------------------------------------------------------- evaluator

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub category: String,
    pub text: String,
}

/// The evaluator's judgement of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Absent only when a VLM answered `# NO_CHANGES` without a score.
    pub report: Option<SimilarityReport>,
    pub no_changes: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suggestions: Vec<Suggestion>,
}

impl Verdict {
    pub fn score(&self) -> Option<Score> {
        self.report.as_ref().map(|r| r.s)
    }

    /// True when a suggestion targets the base preset.
    pub fn preset_flagged(&self) -> bool {
        self.suggestions.iter().any(|s| s.category == "preset")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedEvaluation {
    pub score: Option<Score>,
    pub no_changes: bool,
    pub sub_scores: BTreeMap<SubScoreKey, Score>,
    pub suggestions: Vec<Suggestion>,
}

fn percent(s: &str) -> Option<u32> {
    let s = s.trim();
    let s = s.strip_suffix('%').unwrap_or(s).trim();
    s.parse::<u32>().ok().filter(|v| *v <= 100)
}

/// Reads `SCORE:`, `SUBSCORE k:`, `SUGGEST c:` lines and the NO_CHANGES
/// marker. `None` when the completion has neither a score nor the marker.
pub fn parse_evaluation(completion: &str) -> Option<ParsedEvaluation> {
    let mut out = ParsedEvaluation {
        no_changes: detect_no_changes(completion),
        ..Default::default()
    };
    for line in completion.lines().map(str::trim) {
        if let Some(rest) = line.strip_prefix("SCORE:") {
            if out.score.is_none() {
                out.score = percent(rest).map(Score::from_percent);
            }
        } else if let Some(rest) = line.strip_prefix("SUBSCORE ") {
            if let Some((key, val)) = rest.split_once(':') {
                if let (Some(k), Some(v)) = (SubScoreKey::parse(key), percent(val)) {
                    out.sub_scores.insert(k, Score::from_percent(v));
                }
            }
        } else if let Some(rest) = line.strip_prefix("SUGGEST ") {
            if let Some((cat, text)) = rest.split_once(':') {
                out.suggestions.push(Suggestion {
                    category: cat.trim().to_ascii_lowercase().replace([' ', '-'], "_"),
                    text: text.trim().to_string(),
                });
            }
        }
    }
    (out.score.is_some() || out.no_changes).then_some(out)
}

/// The original input a render is judged against.
#[derive(Debug, Clone, Copy)]
pub struct OriginalInput<'a> {
    pub text: Option<&'a str>,
    pub image: Option<&'a [u8]>,
    pub kind: InputKind,
}

pub struct EvaluatorCall<'a> {
    pub original: OriginalInput<'a>,
    pub render: &'a RenderResult,
    pub mode: ScoreMode,
    pub iteration: u32,
    pub tau: f64,
}

fn render_parts(render: &RenderResult) -> Vec<(crate::render::View, &[u8])> {
    render.images.iter().map(|(v, img)| (*v, img.bytes.as_slice())).collect()
}

/// Embedding mode: s from the providers; for full-body inputs a VLM, when
/// available, adds sub-scores and suggestions but does not move the gate.
/// VLM mode: s is the model's rating.
pub fn invoke_evaluator(
    call: EvaluatorCall<'_>,
    backend: Option<&dyn LlmBackend>,
    providers: &Providers,
    schema: &ApiSchema,
    options: &PromptOptions,
    log: &dyn AgentLog,
) -> Result<Verdict, AgentError> {
    let ctx = PromptContext {
        input_text: call.original.text,
        input_image: call.original.image,
        input_kind: Some(call.original.kind),
        renders: render_parts(call.render),
        tau: Some(call.tau),
        ..Default::default()
    };
    match call.mode {
        ScoreMode::Embedding => {
            let mut report = score_render(
                call.original.image,
                call.render,
                call.original.kind,
                providers,
                call.iteration,
            )?;
            let mut suggestions = Vec::new();
            if let (InputKind::FullBody, Some(b)) = (call.original.kind, backend) {
                if b.capabilities().vision {
                    let parts = assemble_prompt(AgentRole::Evaluator, &ctx, options, schema)?;
                    match call_agent(b, AgentRole::Evaluator, call.iteration, parts, log, parse_evaluation) {
                        Ok(parsed) => {
                            report.sub_scores = parsed.sub_scores;
                            suggestions = parsed.suggestions;
                        }
                        Err(e @ AgentError::Backend { .. }) => return Err(e),
                        Err(e) => tracing::warn!(error = %e, "sub-scoring completion ignored"),
                    }
                }
            }
            Ok(Verdict {
                report: Some(report),
                no_changes: false,
                suggestions,
            })
        }
        ScoreMode::Vlm => {
            let b = backend.ok_or_else(|| AgentError::MissingArtifact("vision backend for vlm scoring".into()))?;
            require_vision(b)?;
            let parts = assemble_prompt(AgentRole::Evaluator, &ctx, options, schema)?;
            let parsed = call_agent(b, AgentRole::Evaluator, call.iteration, parts, log, parse_evaluation)?;
            let report = parsed.score.map(|s| {
                let mut r = SimilarityReport::vlm(s, b.name(), call.iteration);
                r.sub_scores = parsed.sub_scores.clone();
                r
            });
            Ok(Verdict {
                report,
                no_changes: parsed.no_changes,
                suggestions: parsed.suggestions,
            })
        }
    }
}

// ---------------------------------------------------------------- refiner / editor

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefineOutcome {
    Snippet(CodeSnippet),
    NoChanges,
}

pub struct RefinerCall<'a> {
    pub prev: Option<&'a CodeSnippet>,
    pub render: &'a RenderResult,
    pub original: OriginalInput<'a>,
    pub verdict: &'a Verdict,
    pub examples: &'a [FewShotExample],
    /// Iteration the new snippet belongs to.
    pub iteration: u32,
    pub tau: f64,
    pub repair: Option<&'a str>,
}

pub fn invoke_refiner(
    call: RefinerCall<'_>,
    backend: &dyn LlmBackend,
    schema: &ApiSchema,
    options: &PromptOptions,
    log: &dyn AgentLog,
) -> Result<RefineOutcome, AgentError> {
    let prev = call
        .prev
        .ok_or_else(|| AgentError::Precondition("refinement needs the previous snippet".into()))?;
    let ctx = PromptContext {
        input_text: call.original.text,
        input_image: call.original.image,
        input_kind: Some(call.original.kind),
        examples: call.examples,
        prev_snippet: Some(&prev.body),
        renders: render_parts(call.render),
        verdict: Some(call.verdict),
        repair: call.repair,
        tau: Some(call.tau),
        ..Default::default()
    };
    let parts = assemble_prompt(AgentRole::Refiner, &ctx, options, schema)?;
    Ok(match extract_snippet(backend, AgentRole::Refiner, call.iteration, parts, log, true)? {
        None => RefineOutcome::NoChanges,
        Some(region) => RefineOutcome::Snippet(CodeSnippet {
            body: region.body,
            analysis: region.analysis,
            iteration: call.iteration,
            agent: AgentRole::Refiner,
            repairs: 0,
            examples_used: call.examples.iter().take(options.few_shot_k).map(|e| e.id.clone()).collect(),
            parent_iteration: Some(prev.iteration),
        }),
    })
}

pub struct EditorCall<'a> {
    pub current: &'a CodeSnippet,
    pub render: Option<&'a RenderResult>,
    pub instruction: &'a str,
    pub iteration: u32,
    pub repair: Option<&'a str>,
}

pub fn invoke_editor(
    call: EditorCall<'_>,
    backend: &dyn LlmBackend,
    schema: &ApiSchema,
    options: &PromptOptions,
    log: &dyn AgentLog,
) -> Result<CodeSnippet, AgentError> {
    if call.instruction.trim().is_empty() {
        return Err(AgentError::Precondition("edit instruction is empty".into()));
    }
    let ctx = PromptContext {
        prev_snippet: Some(&call.current.body),
        renders: call.render.map(render_parts).unwrap_or_default(),
        instruction: Some(call.instruction),
        repair: call.repair,
        ..Default::default()
    };
    let parts = assemble_prompt(AgentRole::Editor, &ctx, options, schema)?;
    let region = extract_snippet(backend, AgentRole::Editor, call.iteration, parts, log, false)?
        .expect("no-changes disabled for the editor");
    Ok(CodeSnippet {
        body: region.body,
        analysis: region.analysis,
        iteration: call.iteration,
        agent: AgentRole::Editor,
        repairs: 0,
        examples_used: Vec::new(),
        parent_iteration: Some(call.current.iteration),
    })
}

/// Whether an edit instruction asks for a different base identity.
pub fn instruction_targets_identity(instruction: &str) -> bool {
    let lower = instruction.to_lowercase();
    [
        "preset",
        "identity",
        "different person",
        "another person",
        "someone else",
        "gender",
        "ethnicity",
        "into a man",
        "into a woman",
    ]
    .iter()
    .any(|k| lower.contains(k))
}
