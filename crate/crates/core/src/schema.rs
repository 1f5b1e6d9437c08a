//! The avatar API manual and the shared attribute space.
//!
//! An [`ApiSchema`] is the machine-readable catalogue of presets, attribute
//! paths and their value domains, and asset libraries. Both attribute
//! normalization and snippet validation are checked against it. An
//! [`AttributeSet`] is the schema-normalized avatar description that every
//! agent reads and writes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const REFERENCE_SCHEMA: &str = include_str!("../fixtures/reference_schema.json");

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema integrity error at `{path}`: {reason}")]
    Integrity { path: String, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttributeError {
    #[error("attribute document parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema mismatch: image side validated under `{image}`, text side under `{text}`")]
    SchemaMismatch { image: String, text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PresetTags {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethnicity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresetRef {
    pub path: String,
    #[serde(default)]
    pub tags: PresetTags,
}

/// Value domain of one attribute path. Exactly one kind per attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Enum {
        values: Vec<String>,
    },
    Scalar {
        min: f64,
        max: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<String>,
    },
    AssetRef {
        category: String,
    },
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Enum { values } => write!(f, "one of {{{}}}", values.join(", ")),
            Domain::Scalar { min, max, unit } => match unit {
                Some(u) => write!(f, "[{min}, {max}] {u}"),
                None => write!(f, "[{min}, {max}]"),
            },
            Domain::AssetRef { category } => write!(f, "asset in `{category}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    #[serde(skip)]
    pub path: String,
    pub domain: Domain,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSchema {
    pub version: String,
    #[serde(default)]
    pub presets: Vec<PresetRef>,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttributeSpec>,
    #[serde(default)]
    pub assets: BTreeMap<String, Vec<String>>,
}

impl ApiSchema {
    /// Parses and integrity-checks a schema document.
    pub fn load(source: &[u8]) -> Result<Self, SchemaError> {
        let mut schema: ApiSchema = serde_json::from_slice(source).map_err(|e| SchemaError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        for (path, spec) in schema.attributes.iter_mut() {
            spec.path = path.clone();
        }
        schema.check_integrity()?;
        Ok(schema)
    }

    /// The bundled reference schema mirroring the HumGen3D surface used by
    /// the sample generation code.
    pub fn reference() -> Self {
        Self::load(REFERENCE_SCHEMA.as_bytes()).expect("bundled reference schema is valid")
    }

    fn check_integrity(&self) -> Result<(), SchemaError> {
        if self.version.trim().is_empty() {
            return Err(SchemaError::Integrity {
                path: "version".into(),
                reason: "version must be non-empty".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for preset in &self.presets {
            if !seen.insert(preset.path.as_str()) {
                return Err(SchemaError::Integrity {
                    path: preset.path.clone(),
                    reason: "duplicate preset path".into(),
                });
            }
        }
        for (category, paths) in &self.assets {
            let mut seen = BTreeSet::new();
            for path in paths {
                if !seen.insert(path.as_str()) {
                    return Err(SchemaError::Integrity {
                        path: path.clone(),
                        reason: format!("duplicate asset path in category `{category}`"),
                    });
                }
            }
        }
        for (path, spec) in &self.attributes {
            if path.trim().is_empty() {
                return Err(SchemaError::Integrity {
                    path: path.clone(),
                    reason: "attribute path must be non-empty".into(),
                });
            }
            match &spec.domain {
                Domain::Enum { values } if values.is_empty() => {
                    return Err(SchemaError::Integrity {
                        path: path.clone(),
                        reason: "enum domain is empty".into(),
                    });
                }
                Domain::Scalar { min, max, .. } if min.is_nan() || max.is_nan() || min > max => {
                    return Err(SchemaError::Integrity {
                        path: path.clone(),
                        reason: format!("scalar domain has min {min} > max {max}"),
                    });
                }
                Domain::AssetRef { category } if !self.assets.contains_key(category) => {
                    return Err(SchemaError::Integrity {
                        path: path.clone(),
                        reason: format!("asset category `{category}` is not declared"),
                    });
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn attribute(&self, path: &str) -> Option<&AttributeSpec> {
        self.attributes.get(path)
    }

    pub fn has_preset(&self, path: &str) -> bool {
        self.presets.iter().any(|p| p.path == path)
    }

    pub fn has_asset(&self, category: &str, path: &str) -> bool {
        self.assets
            .get(category)
            .is_some_and(|paths| paths.iter().any(|p| p == path))
    }

    /// Checks one value against the domain registered for `path`.
    pub fn check_value(&self, path: &str, value: &AttributeValue) -> Result<(), ViolationKind> {
        let spec = self.attribute(path).ok_or(ViolationKind::UnknownPath)?;
        let ok = match (&spec.domain, value) {
            (Domain::Enum { values }, AttributeValue::Text(v)) => values.iter().any(|x| x == v),
            (Domain::Scalar { min, max, .. }, AttributeValue::Scalar(v)) => {
                v.is_finite() && *min <= *v && *v <= *max
            }
            (Domain::AssetRef { category }, AttributeValue::Text(v)) => self.has_asset(category, v),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(ViolationKind::OutOfDomain)
        }
    }

    /// Renders the schema as the markdown "API manual" placed in agent prompts.
    pub fn manual_text(&self) -> String {
        let mut out = format!("# Avatar API manual (schema {})\n\n## Presets\n", self.version);
        for preset in &self.presets {
            out.push_str(&format!("- `{}`", preset.path));
            let tags: Vec<&str> = [&preset.tags.gender, &preset.tags.ethnicity, &preset.tags.age_group]
                .into_iter()
                .filter_map(|t| t.as_deref())
                .collect();
            if !tags.is_empty() {
                out.push_str(&format!(" ({})", tags.join(", ")));
            }
            out.push('\n');
        }
        out.push_str("\n## Attributes\n");
        for (path, spec) in &self.attributes {
            out.push_str(&format!("- `{path}`: {}", spec.domain));
            if !spec.description.is_empty() {
                out.push_str(&format!(" -- {}", spec.description));
            }
            out.push('\n');
        }
        out.push_str("\n## Assets\n");
        for (category, paths) in &self.assets {
            out.push_str(&format!("### {category}\n"));
            for path in paths {
                out.push_str(&format!("- `{path}`\n"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttributeValue {
    Scalar(f64),
    Text(String),
}

impl AttributeValue {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            AttributeValue::Text(s) => Some(s),
            AttributeValue::Scalar(_) => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            AttributeValue::Scalar(v) => Some(*v),
            AttributeValue::Text(_) => None,
        }
    }
}

impl fmt::Display for AttributeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::Scalar(v) => write!(f, "{v}"),
            AttributeValue::Text(s) => write!(f, "{s}"),
        }
    }
}

impl From<&str> for AttributeValue {
    fn from(s: &str) -> Self {
        AttributeValue::Text(s.to_string())
    }
}

impl From<f64> for AttributeValue {
    fn from(v: f64) -> Self {
        AttributeValue::Scalar(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Image,
    Text,
    Default,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Portrait,
    FullBody,
    TextOnly,
    Multimodal,
}

impl fmt::Display for InputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputKind::Portrait => "portrait",
            InputKind::FullBody => "full_body",
            InputKind::TextOnly => "text_only",
            InputKind::Multimodal => "multimodal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEntry {
    pub value: AttributeValue,
    pub source: Source,
}

/// The schema-normalized avatar description shared by all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSet {
    pub input_kind: InputKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<String>,
    #[serde(default)]
    pub entries: BTreeMap<String, AttributeEntry>,
}

impl AttributeSet {
    pub fn new(input_kind: InputKind) -> Self {
        Self {
            input_kind,
            schema_version: None,
            entries: BTreeMap::new(),
        }
    }

    pub fn with_schema(mut self, schema: &ApiSchema) -> Self {
        self.schema_version = Some(schema.version.clone());
        self
    }

    pub fn insert(&mut self, path: impl Into<String>, value: impl Into<AttributeValue>, source: Source) {
        self.entries.insert(
            path.into(),
            AttributeEntry {
                value: value.into(),
                source,
            },
        );
    }

    pub fn get(&self, path: &str) -> Option<&AttributeValue> {
        self.entries.get(path).map(|e| &e.value)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownPath,
    OutOfDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub value: AttributeValue,
    pub kind: ViolationKind,
    /// Human-readable domain, empty for unknown paths.
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_attributes(attrs: &AttributeSet, schema: &ApiSchema) -> ValidationReport {
    let violations = attrs
        .entries
        .iter()
        .filter_map(|(path, entry)| {
            schema.check_value(path, &entry.value).err().map(|kind| Violation {
                path: path.clone(),
                value: entry.value.clone(),
                kind,
                domain: schema
                    .attribute(path)
                    .map(|s| s.domain.to_string())
                    .unwrap_or_default(),
            })
        })
        .collect();
    ValidationReport { violations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConflict {
    pub path: String,
    pub image_value: AttributeValue,
    pub text_value: AttributeValue,
    pub winner: AttributeValue,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionReport {
    pub conflicts: Vec<FusionConflict>,
    pub inherited_from_image: Vec<String>,
}

/// Merges image-derived and text-derived attributes. Image values anchor the
/// result; any path the text also claims takes the text value.
pub fn fuse(image: &AttributeSet, text: &AttributeSet) -> Result<(AttributeSet, FusionReport), AttributeError> {
    if let (Some(a), Some(b)) = (&image.schema_version, &text.schema_version) {
        if a != b {
            return Err(AttributeError::SchemaMismatch {
                image: a.clone(),
                text: b.clone(),
            });
        }
    }
    let mut fused = AttributeSet {
        input_kind: InputKind::Multimodal,
        schema_version: image.schema_version.clone().or_else(|| text.schema_version.clone()),
        entries: image.entries.clone(),
    };
    let mut report = FusionReport::default();
    for (path, text_entry) in &text.entries {
        if let Some(image_entry) = image.entries.get(path) {
            if image_entry.value != text_entry.value {
                report.conflicts.push(FusionConflict {
                    path: path.clone(),
                    image_value: image_entry.value.clone(),
                    text_value: text_entry.value.clone(),
                    winner: text_entry.value.clone(),
                });
            }
        }
        fused.entries.insert(path.clone(), text_entry.clone());
    }
    report.inherited_from_image = image
        .entries
        .keys()
        .filter(|p| !text.entries.contains_key(*p))
        .cloned()
        .collect();
    Ok((fused, report))
}

/// Serializes to the attribute document format. Output is canonical: entry
/// order is by path, so the round trip is byte-stable.
pub fn serialize_attributes(attrs: &AttributeSet) -> String {
    let mut out = serde_json::to_string_pretty(attrs).expect("attribute sets always serialize");
    out.push('\n');
    out
}

/// Parses an attribute document. Paths are not checked here; run
/// [`validate_attributes`] for that. A document without a schema version is
/// stamped with `schema`'s version.
pub fn parse_attributes(text: &str, schema: &ApiSchema) -> Result<AttributeSet, AttributeError> {
    let mut attrs: AttributeSet = serde_json::from_str(text).map_err(|e| AttributeError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if attrs.schema_version.is_none() {
        attrs.schema_version = Some(schema.version.clone());
    }
    Ok(attrs)
}
