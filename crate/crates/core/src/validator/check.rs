use crate::schema::{ApiSchema, Domain, ViolationKind};

use super::parse::{method_spec, Literal, SnippetAst, StatementKind};
use super::{ErrorCode, ValidationError};

/// What the snippet is replacing, which decides whether the preset may move.
#[derive(Debug, Clone, Copy)]
pub enum ValidationContext<'a> {
    FreshGeneration,
    /// `preset_flagged` is set when the evaluator's verdict called out the
    /// preset itself as wrong.
    Refinement { prev: &'a SnippetAst, preset_flagged: bool },
    /// `preset_targeted` is set when the user's instruction asks to change
    /// identity-bearing attributes.
    Edit { prev: &'a SnippetAst, preset_targeted: bool },
}

impl ValidationContext<'_> {
    fn locked_preset(&self) -> Option<&str> {
        match self {
            ValidationContext::FreshGeneration => None,
            ValidationContext::Refinement { prev, preset_flagged } => {
                (!preset_flagged).then(|| prev.preset().map(|(p, _)| p)).flatten()
            }
            ValidationContext::Edit { prev, preset_targeted } => {
                (!preset_targeted).then(|| prev.preset().map(|(p, _)| p)).flatten()
            }
        }
    }
}

fn domain_error(
    schema: &ApiSchema,
    path: &str,
    value: &Literal,
    line: usize,
    column: usize,
) -> Option<ValidationError> {
    let spec = schema.attribute(path);
    if let Some(spec) = spec {
        if matches!(spec.domain, Domain::AssetRef { .. }) {
            return Some(ValidationError {
                code: ErrorCode::UnknownPath,
                line,
                column,
                message: format!("`{path}` is an asset slot; use its `.set(...)` method"),
                token: path.to_string(),
            });
        }
    }
    let value = match value {
        Literal::Bool(_) => {
            return Some(ValidationError {
                code: ErrorCode::DomainViolation,
                line,
                column,
                message: format!("`{path}` does not accept a boolean"),
                token: path.to_string(),
            })
        }
        other => other.to_attribute_value(),
    };
    match schema.check_value(path, &value) {
        Ok(()) => None,
        Err(ViolationKind::UnknownPath) => Some(ValidationError {
            code: ErrorCode::UnknownPath,
            line,
            column,
            message: format!("`{path}` is not an attribute of the API"),
            token: path.to_string(),
        }),
        Err(ViolationKind::OutOfDomain) => Some(ValidationError {
            code: ErrorCode::DomainViolation,
            line,
            column,
            message: format!(
                "value {value} for `{path}` is outside {}",
                spec.map(|s| s.domain.to_string()).unwrap_or_default()
            ),
            token: value.to_string(),
        }),
    }
}

/// Checks a parsed snippet against the schema. An empty result means the
/// snippet may be rendered.
pub fn check_against_schema(
    ast: &SnippetAst,
    schema: &ApiSchema,
    context: ValidationContext<'_>,
) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    match ast.preset() {
        None => errors.push(ValidationError {
            code: ErrorCode::MissingPreset,
            line: 1,
            column: 1,
            message: "snippet must start with `my_human = Human.from_preset(...)`".into(),
            token: String::new(),
        }),
        Some((path, stmt)) => {
            if !schema.has_preset(path) {
                errors.push(ValidationError {
                    code: ErrorCode::UnknownPreset,
                    line: stmt.line,
                    column: stmt.column,
                    message: format!("preset `{path}` is not in the API manual"),
                    token: path.to_string(),
                });
            } else if let Some(locked) = context.locked_preset() {
                if locked != path {
                    errors.push(ValidationError {
                        code: ErrorCode::PresetChanged,
                        line: stmt.line,
                        column: stmt.column,
                        message: format!("preset changed from `{locked}` to `{path}` without being flagged"),
                        token: path.to_string(),
                    });
                }
            }
        }
    }

    for stmt in &ast.statements {
        let (line, column) = (stmt.line, stmt.column);
        match &stmt.kind {
            StatementKind::AttrAssign { path, value } => {
                errors.extend(domain_error(schema, path, value, line, column));
            }
            StatementKind::KeyLoop {
                collection,
                name,
                value,
            } => {
                let path = format!("{}.{name}", collection.as_str());
                errors.extend(domain_error(schema, &path, value, line, column));
            }
            StatementKind::MethodCall { target, args } => {
                let Some(method) = method_spec(target) else {
                    errors.push(ValidationError {
                        code: ErrorCode::UnknownPath,
                        line,
                        column,
                        message: format!("`{target}` is not a method of the API"),
                        token: target.clone(),
                    });
                    continue;
                };
                let bad_kw = args.iter().find_map(|a| {
                    a.name
                        .as_deref()
                        .filter(|n| Some(*n) != method.value_keyword && !method.flags.contains(n))
                });
                if let Some(kw) = bad_kw {
                    errors.push(ValidationError {
                        code: ErrorCode::UnknownPath,
                        line,
                        column,
                        message: format!("`{target}` has no parameter `{kw}`"),
                        token: format!("{target}({kw}=)"),
                    });
                    continue;
                }
                let flag_err = args.iter().any(|a| {
                    a.name.as_deref().is_some_and(|n| method.flags.contains(&n))
                        && !matches!(a.value, Literal::Bool(_))
                });
                match method.value_arg(args) {
                    Some(value) if !flag_err => {
                        errors.extend(domain_error(schema, method.attribute, value, line, column))
                    }
                    _ => errors.push(ValidationError {
                        code: ErrorCode::DomainViolation,
                        line,
                        column,
                        message: format!("`{target}` needs one value argument and boolean flags"),
                        token: target.clone(),
                    }),
                }
            }
            StatementKind::AssetSet { category, path, .. } => {
                if !schema.has_asset(category, path) {
                    errors.push(ValidationError {
                        code: ErrorCode::UnknownAsset,
                        line,
                        column,
                        message: format!("`{path}` is not a `{category}` asset"),
                        token: path.clone(),
                    });
                }
            }
            StatementKind::Import { .. }
            | StatementKind::PresetLoad { .. }
            | StatementKind::Comment { .. }
            | StatementKind::Ellipsis => {}
        }
    }
    errors
}
