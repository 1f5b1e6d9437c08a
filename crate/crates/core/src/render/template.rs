use std::path::Path;

use thiserror::Error;

use crate::validator::{is_marker_line, REGION_END, REGION_START};

/// The line in a scene template that is replaced by the snippet body.
pub const SUBSTITUTION_POINT: &str = "{{RENDER_SNIPPET}}";

const DEFAULT_TEMPLATE: &str = include_str!("../../templates/scene_template.py");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template must contain exactly one `{SUBSTITUTION_POINT}` line inside the snippet region, found {0}")]
    SubstitutionPoint(usize),
    #[error("template has no `{REGION_START}` / `{REGION_END}` pair around the substitution point")]
    MissingRegion,
    #[error("snippet line {line} contains a reserved template marker")]
    ReservedMarker { line: usize },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

/// A scene script with a single snippet substitution point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneTemplate {
    text: String,
}

impl SceneTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, TemplateError> {
        let text = text.into();
        let lines: Vec<&str> = text.lines().collect();
        let points: Vec<usize> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.contains(SUBSTITUTION_POINT))
            .map(|(i, _)| i)
            .collect();
        if points.len() != 1 || lines[points[0]].trim() != SUBSTITUTION_POINT {
            return Err(TemplateError::SubstitutionPoint(points.len()));
        }
        let at = points[0];
        let opened = at > 0 && lines[at - 1].trim() == REGION_START;
        let closed = lines.get(at + 1).is_some_and(|l| l.trim() == REGION_END);
        if !opened || !closed {
            return Err(TemplateError::MissingRegion);
        }
        Ok(Self { text })
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::new(text)
    }

    /// The template shipped with the crate.
    pub fn builtin() -> Self {
        Self::new(DEFAULT_TEMPLATE).expect("bundled template is well formed")
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Substitutes `snippet` verbatim for the placeholder line.
    pub fn compose(&self, snippet: &str) -> Result<String, TemplateError> {
        for (i, line) in snippet.lines().enumerate() {
            if line.contains(SUBSTITUTION_POINT) || is_marker_line(line) {
                return Err(TemplateError::ReservedMarker { line: i + 1 });
            }
        }
        let placeholder = format!("\n{SUBSTITUTION_POINT}\n");
        let body = snippet.strip_suffix('\n').unwrap_or(snippet);
        Ok(self.text.replacen(&placeholder, &format!("\n{body}\n"), 1))
    }
}

/// Composes `snippet` into the built-in template.
pub fn compose_scene_script(snippet: &str) -> Result<String, TemplateError> {
    SceneTemplate::builtin().compose(snippet)
}
