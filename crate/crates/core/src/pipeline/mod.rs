//! The auto-verification loop: describe, generate, validate, render,
//! evaluate, and refine until the gate accepts or the budget runs out.
//!
//! Every step is appended to the session journal, and `state.json` is
//! rewritten, before the next step starts.

mod journal;
mod state;
mod store;

use std::collections::BTreeMap;
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::Utc;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use journal::{read_log, replay, replay_records, Journal, JournalRecord, Replay, ReplayError, Step, LOG_FILE};
pub use state::{
    ConfigError, Decision, EditRecord, InputSpec, IterationRecord, OutcomeStatus, Phase, SessionOutcome,
    SessionState, SessionStatus, VerificationConfig,
};
pub use store::{
    is_valid_session_id, new_session_id, SessionDir, SessionStore, INPUT_IMAGE_FILE, OUTCOME_FILE, RENDER_LOG_FILE,
    STATE_FILE,
};

use crate::agents::{
    instruction_targets_identity, invoke_descriptor, invoke_editor, invoke_evaluator, invoke_generator,
    invoke_refiner, AgentEvent, AgentLog, CodeSnippet, DescriptorInput, EditorCall, EvaluatorCall,
    FewShotExample, GeneratorCall, LlmBackend, OriginalInput, PromptOptions, RefineOutcome, RefinerCall, Verdict,
};
use crate::codebank::CodeBank;
use crate::render::{RenderAdapter, RenderRequest, RenderResult, View};
use crate::schema::{ApiSchema, AttributeValue, InputKind, Source};
use crate::similarity::{Providers, ScoreMode};
use crate::validator::{
    errors_prompt_text, parse_snippet, validate_snippet, Literal, ValidationContext, ValidationError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub resolution: (u32, u32),
    pub seed: u64,
    pub timeout: Duration,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            resolution: RenderRequest::DEFAULT_RESOLUTION,
            seed: 0,
            timeout: RenderRequest::DEFAULT_TIMEOUT,
        }
    }
}

/// Called after each step record is durable, with the number of step
/// records written so far in this process. Returning `true` simulates a
/// crash at that boundary.
pub type FaultHook = Arc<dyn Fn(usize, &JournalRecord) -> bool + Send + Sync>;

/// Everything a session needs from the outside.
#[derive(Clone)]
pub struct Deps {
    pub schema: Arc<ApiSchema>,
    pub backend: Arc<dyn LlmBackend>,
    pub renderer: Arc<dyn RenderAdapter>,
    pub providers: Providers,
    pub bank: Option<Arc<CodeBank>>,
    pub render: RenderSettings,
    pub faults: Option<FaultHook>,
}

impl Deps {
    pub fn new(schema: Arc<ApiSchema>, backend: Arc<dyn LlmBackend>, renderer: Arc<dyn RenderAdapter>) -> Self {
        Self {
            schema,
            backend,
            renderer,
            providers: Providers::default(),
            bank: None,
            render: RenderSettings::default(),
            faults: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionInput {
    pub text: Option<String>,
    pub image: Option<Vec<u8>>,
    /// Portrait or full_body, for image inputs.
    pub kind_override: Option<InputKind>,
}

impl SessionInput {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Default::default()
        }
    }

    fn text_ref(&self) -> Option<&str> {
        self.text.as_deref().filter(|t| !t.trim().is_empty())
    }

    pub fn is_empty(&self) -> bool {
        self.text_ref().is_none() && self.image.as_ref().is_none_or(|i| i.is_empty())
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("input has neither text nor image")]
    EmptyInput,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("session is {0}; only accepted or exhausted sessions take edits")]
    NotEditable(Phase),
    #[error("session already ran (phase {0})")]
    AlreadyRan(Phase),
    #[error("edit instruction is empty")]
    EmptyInstruction,
    #[error("crash injected after step record {0}")]
    Crashed(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Journal(#[from] ReplayError),
}

// ---------------------------------------------------------------- gate

/// Accept on s >= tau or a NO_CHANGES verdict; refine while budget and the
/// refine flag allow; exhaust otherwise. `i` counts iterations in the
/// current budget.
pub fn evaluate_gate(verdict: &Verdict, config: &VerificationConfig, i: u32) -> Decision {
    let s = verdict.score().map(|s| s.get());
    if verdict.no_changes || s.is_some_and(|s| s >= config.tau) {
        Decision::Accept
    } else if config.refine_enabled && i < config.max_iterations {
        Decision::Refine
    } else {
        Decision::Exhaust
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no rendered iteration to choose from")]
pub struct NoRenderedIteration;

/// Iteration with the highest s; the later one wins ties.
pub fn select_best(records: &[IterationRecord]) -> Result<u32, NoRenderedIteration> {
    let mut best: Option<(f64, u32)> = None;
    for r in records {
        if let Some(s) = r.score() {
            if best.is_none_or(|(b, _)| s.get() >= b) {
                best = Some((s.get(), r.iteration));
            }
        }
    }
    best.map(|(_, i)| i).ok_or(NoRenderedIteration)
}

// ---------------------------------------------------------------- repair

#[derive(Debug, Clone, PartialEq)]
pub struct Repaired {
    pub snippet: CodeSnippet,
    /// Repair attempts used, 1-based.
    pub attempts: u32,
    /// Error lists of the rejected repair attempts.
    pub rejected: Vec<Vec<ValidationError>>,
}

#[derive(Debug, Error)]
pub enum RepairFailure<E> {
    #[error("repair budget exhausted after {attempts} attempt(s)")]
    Exhausted {
        attempts: u32,
        errors: Vec<Vec<ValidationError>>,
    },
    #[error(transparent)]
    Inner(E),
}

/// Re-prompts with `feedback` until a draft validates, at most `budget`
/// times. `attempt(n, feedback)` produces and validates the n-th repair.
pub fn repair_step<E>(
    feedback: String,
    budget: u32,
    mut attempt: impl FnMut(u32, &str) -> Result<(CodeSnippet, Vec<ValidationError>), E>,
) -> Result<Repaired, RepairFailure<E>> {
    let mut feedback = feedback;
    let mut rejected = Vec::new();
    for n in 1..=budget {
        let (mut snippet, errors) = attempt(n, &feedback).map_err(RepairFailure::Inner)?;
        if errors.is_empty() {
            snippet.repairs = n;
            return Ok(Repaired {
                snippet,
                attempts: n,
                rejected,
            });
        }
        feedback = errors_prompt_text(&errors);
        rejected.push(errors);
    }
    Err(RepairFailure::Exhausted {
        attempts: budget,
        errors: rejected,
    })
}

// ---------------------------------------------------------------- session

#[derive(Debug, Clone)]
enum DraftKind {
    Generate,
    Refine { prev: u32 },
    Edit { base: u32, instruction: String },
}

impl DraftKind {
    fn step(&self) -> Step {
        match self {
            DraftKind::Generate => Step::Generate,
            DraftKind::Refine { .. } => Step::Refine,
            DraftKind::Edit { .. } => Step::Edit,
        }
    }
}

/// Why a synthesis step stopped short of a validated snippet.
enum StepStop {
    NoChanges,
    Fail(String),
    Session(SessionError),
}

impl From<SessionError> for StepStop {
    fn from(e: SessionError) -> Self {
        StepStop::Session(e)
    }
}

impl From<io::Error> for StepStop {
    fn from(e: io::Error) -> Self {
        StepStop::Session(e.into())
    }
}

/// Journals agent exchanges, keeping the first write error for later.
struct AgentSink<'a> {
    journal: &'a Journal,
    session: &'a str,
    error: Mutex<Option<io::Error>>,
}

impl AgentLog for AgentSink<'_> {
    fn record(&self, event: AgentEvent) {
        let record = JournalRecord {
            ts: Utc::now(),
            session: self.session.to_string(),
            iteration: event.iteration,
            step: Step::Agent,
            phase: None,
            payload_ref: None,
            outcome: serde_json::to_value(event.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            detail: json!({
                "role": event.role,
                "attempt": event.attempt,
                "backend": event.backend,
                "body": event.body,
            }),
        };
        if let Err(e) = self.journal.append(&record) {
            self.error.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
        }
    }
}

impl AgentSink<'_> {
    fn finish(self) -> Result<(), io::Error> {
        match self.error.into_inner().unwrap_or_else(|p| p.into_inner()) {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// One avatar session: its state, input, artifacts and journal.
#[derive(Debug)]
pub struct Session {
    state: SessionState,
    input: SessionInput,
    dir: Option<SessionDir>,
    journal: Journal,
    renders: BTreeMap<u32, RenderResult>,
    steps: usize,
}

impl Session {
    /// Starts a session, writing the input and the `created` record. With
    /// `dir`, artifacts and a durable journal live there; otherwise in
    /// memory.
    pub fn create(
        id: impl Into<String>,
        input: SessionInput,
        config: VerificationConfig,
        dir: Option<SessionDir>,
    ) -> Result<Self, SessionError> {
        if input.is_empty() {
            return Err(SessionError::EmptyInput);
        }
        config.validate()?;
        let spec = InputSpec {
            text: input.text_ref().map(str::to_string),
            image_sha256: input.image.as_ref().map(|i| hex::encode(Sha256::digest(i))),
            kind_override: input.kind_override,
        };
        let state = SessionState::new(id, spec, config);
        let journal = match &dir {
            Some(d) => {
                if let Some(img) = &input.image {
                    d.write_input_image(img)?;
                }
                Journal::open(d.journal_path(), true)?
            }
            None => Journal::memory(),
        };
        let mut session = Self {
            state,
            input,
            dir,
            journal,
            renders: BTreeMap::new(),
            steps: 0,
        };
        let detail = json!({ "config": session.state.config, "input": session.state.input });
        session.append(Step::Create, Some(Phase::Created), 0, "created", None, detail)?;
        session.persist()?;
        Ok(session)
    }

    /// Reopens a stored session for edits or inspection.
    pub fn open(dir: SessionDir) -> Result<Self, SessionError> {
        let state = dir.read_state()?;
        let input = SessionInput {
            text: state.input.text.clone(),
            image: dir.read_input_image()?,
            kind_override: state.input.kind_override,
        };
        let journal = Journal::open(dir.journal_path(), true)?;
        Ok(Self {
            state,
            input,
            dir: Some(dir),
            journal,
            renders: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn dir(&self) -> Option<&SessionDir> {
        self.dir.as_ref()
    }

    /// Render of `iteration`, from memory or the session directory.
    pub fn render(&self, iteration: u32) -> Option<RenderResult> {
        if let Some(r) = self.renders.get(&iteration) {
            return Some(r.clone());
        }
        let dir = self.dir.as_ref()?;
        let record = self.state.record(iteration)?;
        let mut images = BTreeMap::new();
        for view in &record.views {
            let bytes = dir.read_render(iteration, *view).ok()?;
            images.insert(
                *view,
                crate::render::RenderedImage {
                    format: crate::render::ImageFormat::Png,
                    bytes,
                },
            );
        }
        Some(RenderResult {
            images,
            duration: Duration::ZERO,
            log_excerpt: String::new(),
        })
    }

    fn persist(&mut self) -> Result<(), SessionError> {
        self.state.updated_at = Utc::now();
        if let Some(d) = &self.dir {
            d.write_state(&self.state)?;
        }
        Ok(())
    }

    fn append(
        &mut self,
        step: Step,
        phase: Option<Phase>,
        iteration: u32,
        outcome: &str,
        payload_ref: Option<String>,
        detail: serde_json::Value,
    ) -> Result<JournalRecord, SessionError> {
        if let Some(to) = phase {
            debug_assert!(
                self.state.phase.can_transition(to) || (to == Phase::Created && self.steps == 0),
                "{} -> {to}",
                self.state.phase
            );
            self.state.phase = to;
        }
        let record = JournalRecord {
            ts: Utc::now(),
            session: self.state.id.clone(),
            iteration,
            step,
            phase,
            payload_ref,
            outcome: outcome.to_string(),
            detail,
        };
        self.journal.append(&record)?;
        self.steps += 1;
        Ok(record)
    }

    /// Appends a step record, persists state, then gives the fault hook a
    /// chance to stop the session.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        deps: &Deps,
        step: Step,
        phase: Option<Phase>,
        iteration: u32,
        outcome: &str,
        payload_ref: Option<String>,
        detail: serde_json::Value,
    ) -> Result<(), SessionError> {
        let record = self.append(step, phase, iteration, outcome, payload_ref, detail)?;
        self.persist()?;
        if let Some(hook) = &deps.faults {
            if hook(self.steps, &record) {
                return Err(SessionError::Crashed(self.steps));
            }
        }
        Ok(())
    }

    fn options(&self) -> PromptOptions {
        PromptOptions {
            cot_enabled: self.state.config.cot_enabled,
            few_shot_k: self.state.config.few_shot_k,
            schema_manual_included: true,
        }
    }

    fn original(&self) -> OriginalInput<'_> {
        OriginalInput {
            text: self.input.text_ref(),
            image: self.input.image.as_deref(),
            kind: self.state.attrs.as_ref().map_or(InputKind::TextOnly, |a| a.input_kind),
        }
    }

    /// The text the evaluator judges against: the original description
    /// followed by any edits that changed attributes.
    fn reference_text(&self) -> Option<String> {
        let edits: Vec<&str> = self
            .state
            .edits
            .iter()
            .filter(|e| !e.attribute_deltas.is_empty())
            .map(|e| e.instruction.as_str())
            .collect();
        let base = self.input.text_ref();
        if edits.is_empty() {
            return base.map(str::to_string);
        }
        let mut out = base.unwrap_or("The avatar in the reference image.").to_string();
        out.push_str("\nRequested edits:");
        for e in edits {
            out.push_str("\n- ");
            out.push_str(e);
        }
        Some(out)
    }

    fn score_mode(&self) -> ScoreMode {
        if self.state.vlm_gate {
            return ScoreMode::Vlm;
        }
        match self.original().kind {
            InputKind::Portrait | InputKind::FullBody => self.state.config.mode,
            InputKind::TextOnly | InputKind::Multimodal => ScoreMode::Vlm,
        }
    }

    fn examples(&self, deps: &Deps) -> Vec<FewShotExample> {
        let (Some(bank), Some(attrs)) = (&deps.bank, &self.state.attrs) else {
            return Vec::new();
        };
        bank.examples(attrs, self.state.config.few_shot_k).unwrap_or_else(|e| {
            tracing::warn!(error = %e, "few-shot retrieval failed");
            Vec::new()
        })
    }

    fn outcome(&self, status: OutcomeStatus, started: Instant, no_changes: bool) -> SessionOutcome {
        let final_iteration = match status {
            OutcomeStatus::Failed => None,
            _ => self.state.final_iteration,
        };
        let record = final_iteration.and_then(|i| self.state.record(i));
        SessionOutcome {
            session: self.state.id.clone(),
            status,
            final_iteration,
            final_snippet: record.map(|r| r.snippet.body.clone()),
            final_renders: record
                .map(|r| r.views.iter().map(|v| (*v, SessionDir::render_rel(r.iteration, *v))).collect())
                .unwrap_or_default(),
            final_report: record.and_then(|r| r.report().cloned()),
            iterations: self.state.iteration,
            elapsed_ms: started.elapsed().as_millis() as u64,
            no_changes,
            failure: self.state.failure.clone(),
        }
    }

    fn finish(&mut self, status: OutcomeStatus, started: Instant, no_changes: bool) -> Result<SessionOutcome, SessionError> {
        if let Some(edit) = self.state.edits.last_mut() {
            if edit.status.is_none() {
                edit.status = Some(status);
            }
        }
        self.persist()?;
        let outcome = self.outcome(status, started, no_changes);
        if let Some(d) = &self.dir {
            d.write_outcome(&outcome)?;
        }
        Ok(outcome)
    }

    fn fail(&mut self, deps: &Deps, step: Step, reason: String, started: Instant) -> Result<SessionOutcome, SessionError> {
        tracing::warn!(session = %self.state.id, %reason, "session failed");
        self.state.failure = Some(reason.clone());
        let iteration = self.state.iteration;
        self.step(deps, Step::Fail, Some(Phase::Failed), iteration, "failed", None, json!({ "step": step, "reason": reason }))?;
        self.finish(OutcomeStatus::Failed, started, false)
    }

    /// Runs the loop from a fresh session to a terminal outcome.
    pub fn run(&mut self, deps: &Deps) -> Result<SessionOutcome, SessionError> {
        let started = Instant::now();
        if self.state.phase != Phase::Created {
            return Err(SessionError::AlreadyRan(self.state.phase));
        }
        let options = self.options();
        let described = {
            let sink = AgentSink {
                journal: &self.journal,
                session: &self.state.id,
                error: Mutex::new(None),
            };
            let input = DescriptorInput {
                text: self.input.text_ref(),
                image: self.input.image.as_deref(),
                kind_override: self.input.kind_override,
            };
            let r = invoke_descriptor(input, deps.backend.as_ref(), &deps.schema, &options, &sink);
            sink.finish()?;
            r
        };
        let out = match described {
            Ok(out) => out,
            Err(e) => return self.fail(deps, Step::Describe, format!("descriptor: {e}"), started),
        };
        let detail = json!({
            "input_kind": out.input_kind,
            "entries": out.attrs.len(),
            "conflicts": out.fusion.as_ref().map(|f| &f.conflicts),
            "dropped": out.dropped,
        });
        self.state.attrs = Some(out.attrs);
        self.step(deps, Step::Describe, Some(Phase::Described), 0, "ok", None, detail)?;
        let outcome = self.iterate(deps, DraftKind::Generate, started)?;
        if outcome.status == OutcomeStatus::Accepted {
            self.add_to_bank(deps)?;
            if let Some(d) = &self.dir {
                d.write_state(&self.state)?;
            }
        }
        Ok(outcome)
    }

    fn add_to_bank(&mut self, deps: &Deps) -> Result<(), SessionError> {
        let (Some(bank), Some(i)) = (&deps.bank, self.state.final_iteration) else {
            return Ok(());
        };
        let record = self.state.record(i).expect("final iteration is recorded");
        let attrs = self.state.attrs.clone().expect("described session has attributes");
        let result = bank.add(&attrs, &record.snippet.body, &self.state.id);
        let (outcome, detail) = match &result {
            Ok(id) => ("added", json!({ "entry": id })),
            Err(e) => ("rejected", json!({ "error": e.to_string() })),
        };
        if let Ok(id) = result {
            self.state.bank_entry = Some(id);
        } else {
            tracing::warn!(detail = %detail, "accepted snippet not banked");
        }
        self.step(deps, Step::Bank, None, i, outcome, None, detail)
    }

    /// Applies an edit instruction to an accepted or exhausted session
    /// under a fresh iteration budget.
    pub fn apply_edit(&mut self, instruction: &str, deps: &Deps) -> Result<SessionOutcome, SessionError> {
        let started = Instant::now();
        if !self.state.phase.is_editable() {
            return Err(SessionError::NotEditable(self.state.phase));
        }
        if instruction.trim().is_empty() {
            return Err(SessionError::EmptyInstruction);
        }
        let base = self
            .state
            .final_iteration
            .or(self.state.best_iteration)
            .expect("editable sessions have a final iteration");
        let identity = instruction_targets_identity(instruction);
        self.state.round_start = self.state.iteration;
        self.state.edits.push(EditRecord {
            instruction: instruction.to_string(),
            base_iteration: base,
            identity_targeted: identity,
            attribute_deltas: BTreeMap::new(),
            status: None,
        });
        let iteration = self.state.iteration;
        let detail = json!({ "instruction": instruction, "base": base, "identity_targeted": identity });
        self.step(deps, Step::Edit, Some(Phase::Refining), iteration, "requested", None, detail)?;
        self.iterate(
            deps,
            DraftKind::Edit {
                base,
                instruction: instruction.to_string(),
            },
            started,
        )
    }

    /// Draft, render, evaluate and gate until a terminal phase.
    fn iterate(&mut self, deps: &Deps, first: DraftKind, started: Instant) -> Result<SessionOutcome, SessionError> {
        let mut kind = first;
        loop {
            let iteration = self.state.iteration + 1;
            match self.synthesize_and_render(deps, &kind, iteration) {
                Ok(()) => {}
                Err(StepStop::Session(e)) => return Err(e),
                Err(StepStop::Fail(reason)) => return self.fail(deps, kind.step(), reason, started),
                Err(StepStop::NoChanges) => {
                    let accepted = match (&kind, self.state.phase) {
                        (DraftKind::Refine { prev }, Phase::Refining) => *prev,
                        _ => {
                            let reason = "NO_CHANGES in reply to a repair request".to_string();
                            return self.fail(deps, kind.step(), reason, started);
                        }
                    };
                    if let Some(r) = self.state.record_mut(accepted) {
                        r.decision = Some(Decision::Accept);
                    }
                    self.state.final_iteration = Some(accepted);
                    self.step(deps, Step::Refine, Some(Phase::Accepted), accepted, "no_changes", None, json!(null))?;
                    return self.finish(OutcomeStatus::Accepted, started, true);
                }
            }

            let verdict = {
                let render = self.renders.get(&iteration).expect("rendered above");
                let text = self.reference_text();
                let mut original = self.original();
                original.text = text.as_deref();
                let sink = AgentSink {
                    journal: &self.journal,
                    session: &self.state.id,
                    error: Mutex::new(None),
                };
                let call = EvaluatorCall {
                    original,
                    render,
                    mode: self.score_mode(),
                    iteration,
                    tau: self.state.config.tau,
                };
                let r = invoke_evaluator(
                    call,
                    Some(deps.backend.as_ref()),
                    &deps.providers,
                    &deps.schema,
                    &self.options(),
                    &sink,
                );
                sink.finish()?;
                r
            };
            let verdict = match verdict {
                Ok(v) => v,
                Err(e) => return self.fail(deps, Step::Evaluate, format!("evaluator: {e}"), started),
            };
            let score = verdict.score().map(|s| s.get());
            let detail = json!({ "report": verdict.report, "no_changes": verdict.no_changes, "suggestions": verdict.suggestions });
            self.state.record_mut(iteration).expect("record exists").verdict = Some(verdict.clone());
            let round: Vec<IterationRecord> = self
                .state
                .records
                .iter()
                .filter(|r| r.iteration > self.state.round_start)
                .cloned()
                .collect();
            self.state.best_iteration = select_best(&round).ok();
            let outcome = score.map_or_else(|| "no_score".to_string(), |s| format!("s={s:.4}"));
            self.step(deps, Step::Evaluate, Some(Phase::Evaluated), iteration, &outcome, None, detail)?;

            let decision = evaluate_gate(&verdict, &self.state.config, self.state.round_iterations());
            self.state.record_mut(iteration).expect("record exists").decision = Some(decision);
            let detail = json!({ "decision": decision, "tau": self.state.config.tau, "i": self.state.round_iterations() });
            match decision {
                Decision::Accept => {
                    self.state.final_iteration = Some(iteration);
                    self.step(deps, Step::Gate, Some(Phase::Accepted), iteration, "accept", None, detail)?;
                    return self.finish(OutcomeStatus::Accepted, started, verdict.no_changes);
                }
                Decision::Exhaust => {
                    self.state.final_iteration = self.state.best_iteration;
                    self.step(deps, Step::Gate, Some(Phase::Exhausted), iteration, "exhaust", None, detail)?;
                    return self.finish(OutcomeStatus::ExhaustedBestEffort, started, false);
                }
                Decision::Refine => {
                    self.step(deps, Step::Gate, Some(Phase::Refining), iteration, "refine", None, detail)?;
                    kind = DraftKind::Refine { prev: iteration };
                }
            }
        }
    }

    /// Produces a validated, rendered snippet for `iteration`, sending one
    /// render trace back for repair before giving up.
    fn synthesize_and_render(&mut self, deps: &Deps, kind: &DraftKind, iteration: u32) -> Result<(), StepStop> {
        let mut feedback: Option<String> = None;
        let mut render_failures = 0;
        loop {
            let snippet = self.draft(deps, kind, iteration, feedback.take())?;
            if let DraftKind::Edit { base, .. } = kind {
                self.record_edit_deltas(deps, *base, &snippet);
            }
            match self.render_snippet(deps, &snippet.body, iteration) {
                Ok(result) => {
                    let views: Vec<View> = result.images.keys().copied().collect();
                    if let Some(d) = &self.dir {
                        for (view, img) in &result.images {
                            d.write_render(iteration, *view, &img.bytes)?;
                        }
                        if !result.log_excerpt.is_empty() {
                            d.append_render_log(iteration, &result.log_excerpt)?;
                        }
                    }
                    self.state.record_mut(iteration).expect("record exists").views = views.clone();
                    self.renders.insert(iteration, result);
                    let refs = views.iter().map(|v| SessionDir::render_rel(iteration, *v)).collect::<Vec<_>>().join(",");
                    self.step(deps, Step::Render, Some(Phase::Rendered), iteration, "ok", Some(refs), json!(null))?;
                    return Ok(());
                }
                Err(trace) => {
                    render_failures += 1;
                    if let Some(d) = &self.dir {
                        d.append_render_log(iteration, &trace.raw)?;
                    }
                    self.state
                        .record_mut(iteration)
                        .expect("record exists")
                        .render_failures
                        .push(trace.hint.prompt_text());
                    let detail = json!({ "kind": trace.hint.kind, "line": trace.hint.line, "message": trace.hint.message, "timed_out": trace.timed_out });
                    self.step(deps, Step::Render, None, iteration, "failed", None, detail)?;
                    if render_failures >= 2 {
                        return Err(StepStop::Fail(format!("render failed twice: {}", trace.hint.prompt_text())));
                    }
                    feedback = Some(trace.hint.prompt_text());
                }
            }
        }
    }

    fn render_snippet(&self, deps: &Deps, body: &str, iteration: u32) -> Result<RenderResult, crate::render::ErrorTrace> {
        let mut request = RenderRequest::new(body);
        request.resolution = deps.render.resolution;
        request.seed = deps.render.seed;
        request.timeout = deps.render.timeout;
        let (out_dir, scratch): (PathBuf, bool) = match &self.dir {
            Some(d) => match d.iteration_dir(iteration) {
                Ok(p) => (p, false),
                Err(e) => return Err(crate::render::ErrorTrace::host("io", e.to_string(), None, false)),
            },
            None => {
                let p = std::env::temp_dir().join(format!("forge-{}-iter{iteration}-{:08x}", self.state.id, rand::random::<u32>()));
                if let Err(e) = std::fs::create_dir_all(&p) {
                    return Err(crate::render::ErrorTrace::host("io", e.to_string(), None, false));
                }
                (p, true)
            }
        };
        let result = deps.renderer.render(&request, &out_dir);
        if scratch {
            let _ = std::fs::remove_dir_all(&out_dir);
        }
        result
    }

    /// First draft plus up to `repair_budget` repairs. Every draft and
    /// validation result is journaled.
    fn draft(&mut self, deps: &Deps, kind: &DraftKind, iteration: u32, feedback: Option<String>) -> Result<CodeSnippet, StepStop> {
        let (snippet, errors) = self.draft_once(deps, kind, iteration, 0, feedback.as_deref())?;
        if errors.is_empty() {
            return Ok(snippet);
        }
        let budget = self.state.config.repair_budget;
        let result = repair_step(errors_prompt_text(&errors), budget, |n, fb| {
            self.draft_once(deps, kind, iteration, n, Some(fb))
        });
        match result {
            Ok(r) => Ok(r.snippet),
            Err(RepairFailure::Inner(stop)) => Err(stop),
            Err(RepairFailure::Exhausted { attempts, errors: rejected }) => {
                let last = rejected.last().unwrap_or(&errors);
                Err(StepStop::Fail(format!(
                    "validation errors persist after {attempts} repair(s): {}",
                    last.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
                )))
            }
        }
    }

    fn draft_once(
        &mut self,
        deps: &Deps,
        kind: &DraftKind,
        iteration: u32,
        attempt: u32,
        feedback: Option<&str>,
    ) -> Result<(CodeSnippet, Vec<ValidationError>), StepStop> {
        let options = self.options();
        let examples = match kind {
            DraftKind::Edit { .. } => Vec::new(),
            _ => self.examples(deps),
        };
        let drafted = {
            let sink = AgentSink {
                journal: &self.journal,
                session: &self.state.id,
                error: Mutex::new(None),
            };
            let backend = deps.backend.as_ref();
            let r = match kind {
                DraftKind::Generate => {
                    let attrs = self.state.attrs.as_ref().expect("described");
                    let call = GeneratorCall {
                        attrs,
                        examples: &examples,
                        iteration,
                        repair: feedback,
                    };
                    invoke_generator(call, backend, &deps.schema, &options, &sink).map(Some)
                }
                DraftKind::Refine { prev } => {
                    let record = self.state.record(*prev).expect("refined iteration is recorded");
                    let render = self.renders.get(prev).expect("refined iteration was rendered");
                    let verdict = record.verdict.as_ref().expect("refined iteration was evaluated");
                    let text = self.reference_text();
                    let mut original = self.original();
                    original.text = text.as_deref();
                    let call = RefinerCall {
                        prev: Some(&record.snippet),
                        render,
                        original,
                        verdict,
                        examples: &examples,
                        iteration,
                        tau: self.state.config.tau,
                        repair: feedback,
                    };
                    invoke_refiner(call, backend, &deps.schema, &options, &sink).map(|o| match o {
                        RefineOutcome::Snippet(s) => Some(s),
                        RefineOutcome::NoChanges => None,
                    })
                }
                DraftKind::Edit { base, instruction } => {
                    let record = self.state.record(*base).expect("edit base is recorded");
                    let render = self.render(*base);
                    let call = EditorCall {
                        current: &record.snippet,
                        render: render.as_ref(),
                        instruction,
                        iteration,
                        repair: feedback,
                    };
                    invoke_editor(call, backend, &deps.schema, &options, &sink).map(Some)
                }
            };
            sink.finish()?;
            r
        };
        let mut snippet = match drafted {
            Ok(Some(s)) => s,
            Ok(None) => return Err(StepStop::NoChanges),
            Err(e) => return Err(StepStop::Fail(format!("{}: {e}", kind.step()))),
        };
        snippet.repairs = attempt;

        let errors = {
            let prev_ast = match kind {
                DraftKind::Generate => None,
                DraftKind::Refine { prev } => Some(parse_snippet(&self.state.record(*prev).expect("recorded").snippet.body).ast),
                DraftKind::Edit { base, .. } => Some(parse_snippet(&self.state.record(*base).expect("recorded").snippet.body).ast),
            };
            let ctx = match (kind, &prev_ast) {
                (DraftKind::Refine { prev }, Some(ast)) => ValidationContext::Refinement {
                    prev: ast,
                    preset_flagged: self
                        .state
                        .record(*prev)
                        .and_then(|r| r.verdict.as_ref())
                        .is_some_and(Verdict::preset_flagged),
                },
                (DraftKind::Edit { instruction, .. }, Some(ast)) => ValidationContext::Edit {
                    prev: ast,
                    preset_targeted: instruction_targets_identity(instruction),
                },
                _ => ValidationContext::FreshGeneration,
            };
            validate_snippet(&snippet.body, &deps.schema, ctx)
        };

        if let Some(d) = &self.dir {
            d.write_snippet(iteration, &snippet.body)?;
        }
        self.state.iteration = iteration;
        match self.state.record_mut(iteration) {
            Some(r) => r.snippet = snippet.clone(),
            None => self.state.records.push(IterationRecord {
                iteration,
                snippet: snippet.clone(),
                rejected: Vec::new(),
                render_failures: Vec::new(),
                views: Vec::new(),
                verdict: None,
                decision: None,
                instruction: match kind {
                    DraftKind::Edit { instruction, .. } => Some(instruction.clone()),
                    _ => None,
                },
            }),
        }
        let step = if attempt == 0 { kind.step() } else { Step::Repair };
        let detail = json!({ "attempt": attempt, "agent": snippet.agent, "examples": snippet.examples_used, "body": snippet.body });
        self.step(deps, step, Some(Phase::Drafted), iteration, "drafted", Some(SessionDir::snippet_rel(iteration)), detail)?;

        if errors.is_empty() {
            self.step(deps, Step::Validate, Some(Phase::Validated), iteration, "ok", None, json!(null))?;
        } else {
            self.state.record_mut(iteration).expect("pushed above").rejected.push(errors.clone());
            self.step(deps, Step::Validate, None, iteration, "rejected", None, json!({ "errors": errors }))?;
        }
        Ok((snippet, errors))
    }

    /// Attribute changes an edit made, found by diffing the snippets'
    /// bindings. Any change switches the gate to the VLM.
    fn record_edit_deltas(&mut self, deps: &Deps, base: u32, snippet: &CodeSnippet) {
        let before = parse_snippet(&self.state.record(base).expect("recorded").snippet.body).ast.attribute_bindings();
        let after = parse_snippet(&snippet.body).ast.attribute_bindings();
        let mut deltas = BTreeMap::new();
        for (path, lit) in &after {
            if before.get(path) == Some(lit) {
                continue;
            }
            let value = match lit {
                Literal::Int(i) => AttributeValue::Scalar(*i as f64),
                Literal::Decimal(d) => AttributeValue::Scalar(*d),
                Literal::Str(s) => AttributeValue::Text(s.clone()),
                Literal::Bool(_) => continue,
            };
            if deps.schema.check_value(path, &value).is_ok() {
                deltas.insert(path.clone(), value);
            }
        }
        if let Some(attrs) = self.state.attrs.as_mut() {
            for (path, value) in &deltas {
                attrs.insert(path.clone(), value.clone(), Source::Text);
            }
        }
        if !deltas.is_empty() {
            self.state.vlm_gate = true;
        }
        if let Some(edit) = self.state.edits.last_mut() {
            edit.attribute_deltas = deltas;
        }
    }
}

/// Runs a fresh in-memory session.
pub fn run_session(input: SessionInput, config: VerificationConfig, deps: &Deps) -> Result<SessionOutcome, SessionError> {
    Session::create(new_session_id(), input, config, None)?.run(deps)
}
