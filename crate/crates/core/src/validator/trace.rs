//! Error traces emitted by the renderer shim.
//!
//! The shim writes `trace.json` on any failure:
//!
//! ```json
//! {"error": "FileNotFoundError", "message": "...", "line": 12, "excerpt": "my_human = ..."}
//! ```
//!
//! `line` is relative to the snippet body, `error` is the exception type name
//! or `plugin_unavailable`. Anything else is treated as opaque text.

use serde::{Deserialize, Serialize};

pub const OPAQUE: &str = "OPAQUE";
pub const OPAQUE_EXCERPT_LIMIT: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairHint {
    pub kind: String,
    pub line: Option<u32>,
    pub message: String,
    pub excerpt: String,
}

impl RepairHint {
    pub fn opaque(excerpt: impl Into<String>) -> Self {
        Self {
            kind: OPAQUE.into(),
            line: None,
            message: String::new(),
            excerpt: excerpt.into(),
        }
    }

    pub fn is_opaque(&self) -> bool {
        self.kind == OPAQUE
    }

    /// Text block appended to repair prompts.
    pub fn prompt_text(&self) -> String {
        let mut out = format!("Renderer error: {}", self.kind);
        if let Some(line) = self.line {
            out.push_str(&format!(" at snippet line {line}"));
        }
        if !self.message.is_empty() {
            out.push_str(&format!("\nMessage: {}", self.message));
        }
        if !self.excerpt.is_empty() {
            out.push_str(&format!("\nExcerpt:\n{}", self.excerpt));
        }
        out
    }
}

#[derive(Deserialize)]
struct ShimTrace {
    error: String,
    #[serde(default)]
    message: String,
    #[serde(default)]
    line: Option<u32>,
    #[serde(default)]
    excerpt: Option<String>,
}

fn truncate(text: &str, limit: usize) -> &str {
    if text.len() <= limit {
        return text;
    }
    let mut end = limit;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}

pub fn parse_error_trace(trace: &str) -> RepairHint {
    match serde_json::from_str::<ShimTrace>(trace.trim()) {
        Ok(t) if !t.error.trim().is_empty() => RepairHint {
            kind: t.error,
            line: t.line,
            excerpt: t.excerpt.unwrap_or_default(),
            message: t.message,
        },
        _ => RepairHint::opaque(truncate(trace, OPAQUE_EXCERPT_LIMIT)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shim_trace_maps_kind_and_line() {
        let hint = parse_error_trace(
            r#"{"error":"NameError","message":"name 'my_humn' is not defined","line":12,"excerpt":"my_humn.age.set(3)"}"#,
        );
        assert_eq!(hint.kind, "NameError");
        assert_eq!(hint.line, Some(12));
        assert!(hint.prompt_text().contains("line 12"));
    }

    #[test]
    fn empty_trace_is_opaque() {
        assert_eq!(parse_error_trace(""), RepairHint::opaque(""));
    }

    #[test]
    fn plain_stderr_is_truncated() {
        let text = "Traceback (most recent call last):\n".repeat(200);
        let hint = parse_error_trace(&text);
        assert!(hint.is_opaque());
        assert_eq!(hint.excerpt.len(), OPAQUE_EXCERPT_LIMIT);
        assert_eq!(hint.excerpt, text[..OPAQUE_EXCERPT_LIMIT]);
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        let text = "é".repeat(2000);
        let hint = parse_error_trace(&text);
        assert!(hint.excerpt.len() <= OPAQUE_EXCERPT_LIMIT);
        assert!(text.starts_with(&hint.excerpt));
    }

    #[test]
    fn json_without_error_field_is_opaque() {
        assert!(parse_error_trace(r#"{"status":"ok"}"#).is_opaque());
    }
}
