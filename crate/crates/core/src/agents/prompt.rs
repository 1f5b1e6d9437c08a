//! Prompt assembly. Every prompt is a deterministic function of the role,
//! the context and the options.

use serde::{Deserialize, Serialize};

use super::{AgentError, AgentRole, Verdict};
use crate::render::View;
use crate::schema::{serialize_attributes, ApiSchema, AttributeSet, InputKind};
use crate::validator::{REGION_END, REGION_START};

pub const DESCRIPTOR_PHASES: [&str; 3] = ["### 1. OBSERVE PHASE", "### 2. DECOMPOSE PHASE", "### 3. EMIT PHASE"];
pub const CODE_PHASES: [&str; 3] = ["### 1. ANALYSIS PHASE", "### 2. EDIT PHASE", "### 3. OUTPUT PHASE"];
pub const EVALUATOR_PHASES: [&str; 3] = ["### 1. COMPARE PHASE", "### 2. SCORE PHASE", "### 3. VERDICT PHASE"];

/// Every scaffold sentinel across all roles.
pub const ALL_PHASE_SENTINELS: [&str; 9] = [
    DESCRIPTOR_PHASES[0],
    DESCRIPTOR_PHASES[1],
    DESCRIPTOR_PHASES[2],
    CODE_PHASES[0],
    CODE_PHASES[1],
    CODE_PHASES[2],
    EVALUATOR_PHASES[0],
    EVALUATOR_PHASES[1],
    EVALUATOR_PHASES[2],
];

pub fn phase_sentinels(role: AgentRole) -> &'static [&'static str; 3] {
    match role {
        AgentRole::Descriptor => &DESCRIPTOR_PHASES,
        AgentRole::Evaluator => &EVALUATOR_PHASES,
        AgentRole::Generator | AgentRole::Refiner | AgentRole::Editor => &CODE_PHASES,
    }
}

/// Opening tag of a few-shot example block.
pub const EXAMPLE_TAG: &str = "[EXAMPLE ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub cot_enabled: bool,
    pub few_shot_k: usize,
    pub schema_manual_included: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            cot_enabled: true,
            few_shot_k: 3,
            schema_manual_included: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub id: String,
    pub body: String,
}

/// Artifacts available to an agent call. Roles check for what they need.
#[derive(Debug, Clone, Default)]
pub struct PromptContext<'a> {
    pub input_text: Option<&'a str>,
    pub input_image: Option<&'a [u8]>,
    pub input_kind: Option<InputKind>,
    pub attrs: Option<&'a AttributeSet>,
    pub examples: &'a [FewShotExample],
    pub prev_snippet: Option<&'a str>,
    pub renders: Vec<(View, &'a [u8])>,
    pub verdict: Option<&'a Verdict>,
    pub instruction: Option<&'a str>,
    pub repair: Option<&'a str>,
    pub tau: Option<f64>,
}

/// A tagged block: `[NAME]`, body, `[END NAME]`.
pub fn section(name: &str, body: &str) -> String {
    format!("[{name}]\n{body}\n[END {name}]")
}

/// Body of the first `[NAME]` block in `text`.
pub fn find_section<'t>(text: &'t str, name: &str) -> Option<&'t str> {
    let open = format!("[{name}]\n");
    let close = format!("\n[END {name}]");
    let start = text.find(&open)? + open.len();
    let len = text[start..].find(&close)?;
    Some(&text[start..start + len])
}

fn header(role: AgentRole) -> &'static str {
    match role {
        AgentRole::Descriptor => {
            "You are the Descriptor. Turn the user's portrait, full-body photo or text description into \
             structured avatar attributes, using only attribute paths and values listed in the API manual."
        }
        AgentRole::Generator => {
            "You are the Generator. Write a HumGen3D snippet that builds the avatar described by the attributes."
        }
        AgentRole::Evaluator => {
            "You are the Evaluator. Judge how closely the rendered avatar matches the original input."
        }
        AgentRole::Refiner => {
            "You are the Refiner. Compare the renders with the original input and revise the snippet to close \
             the gaps named in the evaluation."
        }
        AgentRole::Editor => "You are the Editor. Apply the user's instruction to the current snippet.",
    }
}

fn phases(role: AgentRole) -> String {
    let [a, b, c] = *phase_sentinels(role);
    let (ta, tb, tc) = match role {
        AgentRole::Descriptor => (
            "List the visible or stated traits: identity cues, body proportions, hair, face, clothing, footwear, expression.",
            "Map each trait to one attribute path. Use enum values exactly as written and keep scalars inside their ranges. \
             Fill unstated identity traits with plausible defaults.",
            "Write the attribute document.",
        ),
        AgentRole::Generator => (
            "Pick the base preset, then the assets and parameter values each attribute maps to. \
             Record the reasoning as `# ANALYSIS:` comment lines before the region.",
            "Turn each decision into an allowed statement: preset load, body/face key loops, setter calls, channel assignments.",
            "Emit the full snippet.",
        ),
        AgentRole::Refiner => (
            "List the differences between the avatar and the input, starting from the evaluation.",
            "Change only the statements responsible. Keep the preset load as is unless the evaluation says the preset is wrong. \
             Re-emit every unchanged statement with its previous value.",
            "Emit the complete revised snippet.",
        ),
        AgentRole::Editor => (
            "Work out which attributes the instruction touches.",
            "Change only those statements. Keep the preset load unless the instruction asks for a different person.",
            "Emit the complete edited snippet.",
        ),
        AgentRole::Evaluator => (
            "Compare the render with the original input on the criteria below.",
            "Rate overall similarity from 0 to 100, and each criterion you judged.",
            "Name the concrete changes that would raise the score.",
        ),
    };
    format!("{a}\n{ta}\n{b}\n{tb}\n{c}\n{tc}")
}

fn criteria(kind: Option<InputKind>) -> &'static str {
    match kind {
        Some(InputKind::Portrait) => "Criteria: facial structure, skin tone, hair, expression.",
        Some(InputKind::FullBody) => "Criteria: hair style, clothing color, garment type, body build.",
        _ => "Criteria: every trait stated in the original input.",
    }
}

fn region_directive() -> String {
    format!(
        "Output the complete snippet bounded by '{REGION_START}' and '{REGION_END}'. After the two imports it must \
         start with `my_human = Human.from_preset(...)`, use only literal values, and call only API paths from the manual."
    )
}

fn directive(role: AgentRole, ctx: &PromptContext<'_>) -> String {
    match role {
        AgentRole::Descriptor => "Reply with one JSON attribute document: \
             {\"input_kind\": ..., \"entries\": {\"<path>\": {\"value\": ..., \"source\": \"image\"|\"text\"}}}. \
             Set input_kind to \"portrait\" for a head-and-shoulders image, \"full_body\" for a full-figure image \
             and \"text_only\" for a description."
            .to_string(),
        AgentRole::Generator => region_directive(),
        AgentRole::Refiner => format!(
            "{} If the avatar needs no edits, reply with the single line `# NO_CHANGES`.",
            region_directive()
        ),
        AgentRole::Editor => region_directive(),
        AgentRole::Evaluator => {
            let tau = ctx.tau.map(|t| format!("{:.0}%", t * 100.0)).unwrap_or_else(|| "the threshold".into());
            format!(
                "Reply with a line `SCORE: <integer 0-100>`. Add `SUBSCORE <face|hair|clothing_color|garment_type>: \
                 <integer 0-100>` lines for the criteria you judged and `SUGGEST <category>: <change>` lines for each fix \
                 (use category `preset` if the base preset is wrong). If similarity is at least {tau}, you may reply \
                 with the single line `# NO_CHANGES` instead."
            )
        }
    }
}

/// Reminder appended when a completion could not be parsed.
pub fn format_reminder(role: AgentRole) -> String {
    let what = match role {
        AgentRole::Descriptor => "a single JSON attribute document with an `entries` object",
        AgentRole::Evaluator => "a `SCORE: <integer 0-100>` line or the single line `# NO_CHANGES`",
        _ => "the snippet between the region marker lines",
    };
    format!("FORMAT REMINDER: the previous reply could not be parsed. Reply with {what}.")
}

fn require<T>(value: Option<T>, what: &str) -> Result<T, AgentError> {
    value.ok_or_else(|| AgentError::MissingArtifact(what.to_string()))
}

fn verdict_text(v: &Verdict, tau: Option<f64>) -> String {
    let mut lines = Vec::new();
    if let Some(report) = &v.report {
        let tau = tau.map(|t| format!(" (threshold {t:.2})")).unwrap_or_default();
        lines.push(format!("score: {:.4}{tau}", report.s.get()));
        for (k, s) in &report.sub_scores {
            lines.push(format!("subscore {}: {:.2}", serde_json::to_value(k).unwrap_or_default().as_str().unwrap_or(""), s.get()));
        }
    }
    for s in &v.suggestions {
        lines.push(format!("suggest {}: {}", s.category, s.text));
    }
    if lines.is_empty() {
        lines.push("no details".into());
    }
    lines.join("\n")
}

/// Ordered prompt parts for `role`.
pub fn assemble_prompt(
    role: AgentRole,
    ctx: &PromptContext<'_>,
    options: &PromptOptions,
    schema: &ApiSchema,
) -> Result<Vec<super::PromptPart>, AgentError> {
    use super::PromptPart;

    match role {
        AgentRole::Descriptor => {
            if ctx.input_text.is_none() && ctx.input_image.is_none() {
                return Err(AgentError::MissingArtifact("input image or text".into()));
            }
        }
        AgentRole::Generator => {
            require(ctx.attrs, "attributes")?;
        }
        AgentRole::Evaluator => {
            if ctx.renders.is_empty() {
                return Err(AgentError::MissingArtifact("renders".into()));
            }
            if ctx.input_text.is_none() && ctx.input_image.is_none() {
                return Err(AgentError::MissingArtifact("original input".into()));
            }
        }
        AgentRole::Refiner => {
            require(ctx.prev_snippet, "previous snippet")?;
            require(ctx.verdict, "evaluation verdict")?;
            if ctx.renders.is_empty() {
                return Err(AgentError::MissingArtifact("renders".into()));
            }
            if ctx.input_text.is_none() && ctx.input_image.is_none() {
                return Err(AgentError::MissingArtifact("original input".into()));
            }
        }
        AgentRole::Editor => {
            require(ctx.prev_snippet, "current snippet")?;
            require(ctx.instruction, "instruction")?;
        }
    }

    let mut text = vec![header(role).to_string()];
    if options.cot_enabled {
        text.push(phases(role));
    }
    if role == AgentRole::Evaluator {
        text.push(criteria(ctx.input_kind).to_string());
    }
    if options.schema_manual_included {
        text.push(section("API MANUAL", &schema.manual_text()));
    }
    if matches!(role, AgentRole::Generator | AgentRole::Refiner | AgentRole::Editor) {
        for (i, ex) in ctx.examples.iter().take(options.few_shot_k).enumerate() {
            text.push(section(&format!("EXAMPLE {}", i + 1), &ex.body));
        }
    }
    if let Some(t) = ctx.input_text {
        if role != AgentRole::Generator && role != AgentRole::Editor {
            text.push(section("USER INPUT", t));
        }
    }
    if let Some(attrs) = ctx.attrs {
        text.push(section("ATTRIBUTES", serialize_attributes(attrs).trim_end()));
    }
    if let Some(prev) = ctx.prev_snippet {
        text.push(section("CURRENT SNIPPET", prev));
    }
    if let Some(v) = ctx.verdict {
        text.push(section("EVALUATION", &verdict_text(v, ctx.tau)));
    }
    if let Some(instr) = ctx.instruction {
        text.push(section("INSTRUCTION", instr));
    }
    if let Some(repair) = ctx.repair {
        text.push(section("REPAIR", repair));
    }

    let mut parts = vec![PromptPart::Text(text.join("\n\n"))];
    let wants_original_image = matches!(role, AgentRole::Descriptor | AgentRole::Evaluator | AgentRole::Refiner);
    if let (true, Some(img)) = (wants_original_image, ctx.input_image) {
        parts.push(PromptPart::Text("Original image:".into()));
        parts.push(PromptPart::png(img.to_vec()));
    }
    if role != AgentRole::Descriptor && role != AgentRole::Generator {
        for (view, bytes) in &ctx.renders {
            parts.push(PromptPart::Text(format!("Render, {view} view:")));
            parts.push(PromptPart::png(bytes.to_vec()));
        }
    }
    parts.push(PromptPart::Text(directive(role, ctx)));
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{PromptPart, AgentRole::*};
    use crate::schema::Source;

    fn text_of(parts: &[PromptPart]) -> String {
        parts.iter().filter_map(PromptPart::as_text).collect::<Vec<_>>().join("\n")
    }

    fn attrs() -> AttributeSet {
        let mut a = AttributeSet::new(InputKind::TextOnly);
        a.insert("gender", "male", Source::Text);
        a
    }

    #[test]
    fn generator_scaffold_follows_cot_flag() {
        let schema = ApiSchema::reference();
        let a = attrs();
        let ctx = PromptContext {
            attrs: Some(&a),
            ..Default::default()
        };
        let on = text_of(&assemble_prompt(Generator, &ctx, &PromptOptions::default(), &schema).unwrap());
        for s in CODE_PHASES {
            assert!(on.contains(s));
        }
        assert!(on.contains("'# region RENDER_SNIPPET' and '# endregion'"));
        let off_opts = PromptOptions {
            cot_enabled: false,
            ..Default::default()
        };
        let off = text_of(&assemble_prompt(Generator, &ctx, &off_opts, &schema).unwrap());
        for s in ALL_PHASE_SENTINELS {
            assert!(!off.contains(s));
        }
        assert!(off.contains("'# region RENDER_SNIPPET' and '# endregion'"));
    }

    #[test]
    fn examples_and_manual_are_optional() {
        let schema = ApiSchema::reference();
        let a = attrs();
        let examples = vec![
            FewShotExample { id: "a".into(), body: "my_human = Human.from_preset(\"x\")  # first".into() },
            FewShotExample { id: "b".into(), body: "my_human = Human.from_preset(\"y\")  # second".into() },
        ];
        let ctx = PromptContext {
            attrs: Some(&a),
            examples: &examples,
            ..Default::default()
        };
        let with = text_of(&assemble_prompt(Generator, &ctx, &PromptOptions::default(), &schema).unwrap());
        assert!(with.contains(&examples[0].body) && with.contains(&examples[1].body));
        assert!(with.contains("[API MANUAL]"));
        let none = PromptOptions {
            few_shot_k: 0,
            schema_manual_included: false,
            ..Default::default()
        };
        let without = text_of(&assemble_prompt(Generator, &ctx, &none, &schema).unwrap());
        assert_eq!(without.matches(EXAMPLE_TAG).count(), 0);
        assert!(!without.contains("[API MANUAL]"));
    }

    #[test]
    fn missing_artifacts_are_named() {
        let schema = ApiSchema::reference();
        let e = assemble_prompt(Refiner, &PromptContext::default(), &PromptOptions::default(), &schema).unwrap_err();
        assert_eq!(e, AgentError::MissingArtifact("previous snippet".into()));
        let e = assemble_prompt(Descriptor, &PromptContext::default(), &PromptOptions::default(), &schema).unwrap_err();
        assert!(matches!(e, AgentError::MissingArtifact(_)));
    }

    #[test]
    fn prompts_are_deterministic() {
        let schema = ApiSchema::reference();
        let ctx = PromptContext {
            input_text: Some("A basketball player"),
            input_image: Some(&[1, 2, 3]),
            ..Default::default()
        };
        let a = assemble_prompt(Descriptor, &ctx, &PromptOptions::default(), &schema).unwrap();
        let b = assemble_prompt(Descriptor, &ctx, &PromptOptions::default(), &schema).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|p| matches!(p, PromptPart::Image { .. })));
    }

    #[test]
    fn sections_round_trip() {
        let s = format!("pre\n{}\npost", section("CURRENT SNIPPET", "a\nb"));
        assert_eq!(find_section(&s, "CURRENT SNIPPET"), Some("a\nb"));
        assert_eq!(find_section(&s, "OTHER"), None);
    }
}
