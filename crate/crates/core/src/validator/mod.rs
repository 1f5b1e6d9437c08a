//! Static gate for generated snippets: region extraction, a restricted
//! parser, and schema checks. Nothing here executes snippet content.

mod check;
mod parse;
mod region;
mod trace;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use check::{check_against_schema, ValidationContext};
pub use parse::{
    asset_category, method_spec, parse_snippet, Arg, KeyCollection, Literal, MethodSpec, ParseOutcome, SnippetAst,
    Statement, StatementKind, ALLOWED_IMPORTS, ASSET_SETTERS, METHODS,
};
pub use region::{
    detect_no_changes, extract_region, is_marker_line, wrap_region, Region, RegionError, ANALYSIS_PREFIX,
    NO_CHANGES, REGION_END, REGION_START,
};
pub use trace::{parse_error_trace, RepairHint, OPAQUE, OPAQUE_EXCERPT_LIMIT};

use crate::schema::ApiSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Syntax,
    UnknownPath,
    DomainViolation,
    UnknownPreset,
    UnknownAsset,
    MissingPreset,
    ForbiddenConstruct,
    PresetChanged,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorCode::Syntax => "SYNTAX",
            ErrorCode::UnknownPath => "UNKNOWN_PATH",
            ErrorCode::DomainViolation => "DOMAIN_VIOLATION",
            ErrorCode::UnknownPreset => "UNKNOWN_PRESET",
            ErrorCode::UnknownAsset => "UNKNOWN_ASSET",
            ErrorCode::MissingPreset => "MISSING_PRESET",
            ErrorCode::ForbiddenConstruct => "FORBIDDEN_CONSTRUCT",
            ErrorCode::PresetChanged => "PRESET_CHANGED",
        })
    }
}

/// One finding against a snippet body; `line`/`column` are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub code: ErrorCode,
    pub line: usize,
    pub column: usize,
    pub message: String,
    pub token: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {} {}", self.line, self.column, self.code, self.message)
    }
}

/// Parse errors followed by schema errors for `body`.
pub fn validate_snippet(body: &str, schema: &ApiSchema, context: ValidationContext<'_>) -> Vec<ValidationError> {
    let ParseOutcome { ast, mut errors } = parse_snippet(body);
    errors.extend(check_against_schema(&ast, schema, context));
    errors
}

/// Formats an error list for a repair prompt.
pub fn errors_prompt_text(errors: &[ValidationError]) -> String {
    errors
        .iter()
        .map(|e| format!("- line {}, column {}: {} {} (`{}`)", e.line, e.column, e.code, e.message, e.token))
        .collect::<Vec<_>>()
        .join("\n")
}
