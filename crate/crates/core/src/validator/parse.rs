//! Line-oriented parser for the restricted snippet language.
//!
//! The accepted language is the closure of the constructs used by HumGen3D
//! generation code: two imports, one preset load, guarded shape-key loops,
//! literal assignments to value channels and calls on the human object with
//! literal arguments. Everything else is reported, never executed.

use serde::{Deserialize, Serialize};

use super::{ErrorCode, ValidationError};

/// `(module, imported names)` pairs that may appear in a snippet.
pub const ALLOWED_IMPORTS: &[(&str, &[&str])] = &[("bpy", &[]), ("HumGen3D", &["Human"])];

/// Asset setters on the human object and the asset category each consumes.
pub const ASSET_SETTERS: &[(&str, &str)] = &[
    ("hair.regular_hair.set", "hair_style"),
    ("hair.face_hair.set", "facial_hair"),
    ("skin.texture.set", "skin_texture"),
    ("clothing.outfit.set", "outfit"),
    ("clothing.footwear.set", "footwear"),
    ("expression.set", "expression"),
];

const DEFAULT_HUMAN_VAR: &str = "my_human";

const FORBIDDEN_KEYWORDS: &[&str] = &[
    "def", "class", "while", "with", "try", "except", "finally", "lambda", "return", "global",
    "nonlocal", "del", "yield", "raise", "assert", "async", "await", "exec", "eval", "open",
    "__import__", "compile", "print", "input",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Literal {
    Int(i64),
    Decimal(f64),
    Str(String),
    Bool(bool),
}

impl Literal {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Literal::Int(i) => Some(*i as f64),
            Literal::Decimal(d) => Some(*d),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Literal::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn to_attribute_value(&self) -> crate::schema::AttributeValue {
        use crate::schema::AttributeValue;
        match self {
            Literal::Int(i) => AttributeValue::Scalar(*i as f64),
            Literal::Decimal(d) => AttributeValue::Scalar(*d),
            Literal::Str(s) => AttributeValue::Text(s.clone()),
            Literal::Bool(b) => AttributeValue::Text(b.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyCollection {
    Body,
    Face,
}

impl KeyCollection {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyCollection::Body => "body",
            KeyCollection::Face => "face",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arg {
    pub name: Option<String>,
    pub value: Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StatementKind {
    Import { module: String, names: Vec<String> },
    PresetLoad { var: String, path: String },
    /// Literal assignment to a dotted channel; `path` has the human variable
    /// and any trailing `.value` removed.
    AttrAssign { path: String, value: Literal },
    /// Call on the human object; `target` is the dotted method path.
    MethodCall { target: String, args: Vec<Arg> },
    KeyLoop {
        collection: KeyCollection,
        name: String,
        value: Literal,
    },
    AssetSet { category: String, target: String, path: String },
    Comment { text: String },
    Ellipsis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    pub line: usize,
    pub column: usize,
    #[serde(flatten)]
    pub kind: StatementKind,
}

impl Statement {
    /// The attribute path and value this statement sets, if any.
    pub fn attribute_binding(&self) -> Option<(String, Literal)> {
        match &self.kind {
            StatementKind::AttrAssign { path, value } => Some((path.clone(), value.clone())),
            StatementKind::KeyLoop {
                collection,
                name,
                value,
            } => Some((format!("{}.{name}", collection.as_str()), value.clone())),
            StatementKind::MethodCall { target, args } => {
                let method = method_spec(target)?;
                method.value_arg(args).map(|v| (method.attribute.to_string(), v.clone()))
            }
            StatementKind::AssetSet { target, path, .. } => Some((
                target.trim_end_matches(".set").to_string(),
                Literal::Str(path.clone()),
            )),
            _ => None,
        }
    }
}

/// A method on the human object that sets one attribute.
#[derive(Debug, Clone, Copy)]
pub struct MethodSpec {
    pub target: &'static str,
    pub attribute: &'static str,
    /// Keyword accepted in place of the first positional argument.
    pub value_keyword: Option<&'static str>,
    /// Extra boolean keywords the method accepts.
    pub flags: &'static [&'static str],
}

impl MethodSpec {
    pub fn value_arg<'a>(&self, args: &'a [Arg]) -> Option<&'a Literal> {
        args.iter()
            .find(|a| a.name.is_none() || a.name.as_deref() == self.value_keyword)
            .map(|a| &a.value)
    }
}

pub const METHODS: &[MethodSpec] = &[
    MethodSpec {
        target: "height.set",
        attribute: "height_cm",
        value_keyword: Some("value_cm"),
        flags: &["realtime"],
    },
    MethodSpec {
        target: "age.set",
        attribute: "age",
        value_keyword: Some("age"),
        flags: &["realtime"],
    },
    MethodSpec {
        target: "hair.set_hair_quality",
        attribute: "hair.quality",
        value_keyword: None,
        flags: &[],
    },
    MethodSpec {
        target: "hair.update_hair_shader_type",
        attribute: "hair.shader_type",
        value_keyword: None,
        flags: &[],
    },
];

pub fn method_spec(target: &str) -> Option<&'static MethodSpec> {
    METHODS.iter().find(|m| m.target == target)
}

pub fn asset_category(target: &str) -> Option<&'static str> {
    ASSET_SETTERS.iter().find(|(t, _)| *t == target).map(|(_, c)| *c)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SnippetAst {
    pub statements: Vec<Statement>,
}

impl SnippetAst {
    pub fn preset(&self) -> Option<(&str, &Statement)> {
        self.statements.iter().find_map(|s| match &s.kind {
            StatementKind::PresetLoad { path, .. } => Some((path.as_str(), s)),
            _ => None,
        })
    }

    /// Final value of each attribute the snippet sets, in path order.
    pub fn attribute_bindings(&self) -> std::collections::BTreeMap<String, Literal> {
        self.statements
            .iter()
            .filter_map(Statement::attribute_binding)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub ast: SnippetAst,
    pub errors: Vec<ValidationError>,
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Dec(f64),
    Str(String),
    LParen,
    RParen,
    Comma,
    Assign,
    EqEq,
    Colon,
    Dot,
    Ellipsis,
    Op(char),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    col: usize,
}

struct LexError {
    col: usize,
    message: String,
}

/// Tokenizes one line. Columns are 1-based character positions.
fn tokenize(line: &str) -> Result<(Vec<Token>, Option<String>), LexError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out: Vec<Token> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '#' {
            let comment: String = chars[i..].iter().collect();
            return Ok((out, Some(comment)));
        }
        let prev_allows_sign = matches!(
            out.last().map(|t| &t.tok),
            None | Some(Tok::Assign | Tok::LParen | Tok::Comma | Tok::EqEq | Tok::Colon)
        );
        let starts_number = c.is_ascii_digit()
            || (c == '.' && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit()) && prev_allows_sign)
            || (c == '-'
                && prev_allows_sign
                && chars
                    .get(i + 1)
                    .is_some_and(|n| n.is_ascii_digit() || *n == '.'));
        if starts_number {
            let start = i;
            i += 1;
            while i < chars.len() {
                let d = chars[i];
                let exp_sign = (d == '+' || d == '-') && matches!(chars[i - 1], 'e' | 'E');
                if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || d == '_' || exp_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            let text: String = chars[start..i].iter().filter(|c| **c != '_').collect();
            let tok = if text.contains(['.', 'e', 'E']) {
                text.parse::<f64>().ok().filter(|v| v.is_finite()).map(Tok::Dec)
            } else {
                text.parse::<i64>().ok().map(Tok::Int)
            };
            match tok {
                Some(tok) => out.push(Token { tok, col }),
                None => {
                    return Err(LexError {
                        col,
                        message: format!("malformed number `{text}`"),
                    })
                }
            }
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let ident: String = chars[start..i].iter().collect();
            let raw = matches!(ident.as_str(), "r" | "R");
            if raw && i < chars.len() && (chars[i] == '"' || chars[i] == '\'') {
                let (s, next) = lex_string(&chars, i, true)?;
                out.push(Token { tok: Tok::Str(s), col });
                i = next;
            } else {
                out.push(Token {
                    tok: Tok::Ident(ident),
                    col,
                });
            }
            continue;
        }
        if c == '"' || c == '\'' {
            let (s, next) = lex_string(&chars, i, false)?;
            out.push(Token { tok: Tok::Str(s), col });
            i = next;
            continue;
        }
        let (tok, width) = match c {
            '(' => (Tok::LParen, 1),
            ')' => (Tok::RParen, 1),
            ',' => (Tok::Comma, 1),
            ':' => (Tok::Colon, 1),
            '=' if chars.get(i + 1) == Some(&'=') => (Tok::EqEq, 2),
            '=' => (Tok::Assign, 1),
            '.' if chars.get(i + 1) == Some(&'.') && chars.get(i + 2) == Some(&'.') => (Tok::Ellipsis, 3),
            '.' => (Tok::Dot, 1),
            other => (Tok::Op(other), 1),
        };
        out.push(Token { tok, col });
        i += width;
    }
    Ok((out, None))
}

fn lex_string(chars: &[char], open: usize, raw: bool) -> Result<(String, usize), LexError> {
    let quote = chars[open];
    let mut s = String::new();
    let mut i = open + 1;
    while i < chars.len() {
        let c = chars[i];
        if c == quote {
            return Ok((s, i + 1));
        }
        if c == '\\' && i + 1 < chars.len() {
            let n = chars[i + 1];
            if raw {
                s.push(c);
                s.push(n);
            } else {
                match n {
                    'n' => s.push('\n'),
                    't' => s.push('\t'),
                    '\\' | '"' | '\'' => s.push(n),
                    other => {
                        s.push('\\');
                        s.push(other);
                    }
                }
            }
            i += 2;
            continue;
        }
        s.push(c);
        i += 1;
    }
    Err(LexError {
        col: open + 1,
        message: "unterminated string literal".into(),
    })
}

// ---------------------------------------------------------------------------
// Parser

struct ForBlock {
    indent: usize,
    var: String,
    collection: KeyCollection,
    has_body: bool,
    header_line: usize,
    guard: Option<GuardBlock>,
}

struct GuardBlock {
    indent: usize,
    name: String,
    has_body: bool,
    header_line: usize,
    header_col: usize,
}

struct Parser {
    human_var: String,
    saw_preset: bool,
    saw_action: bool,
    ast: SnippetAst,
    errors: Vec<ValidationError>,
    block: Option<ForBlock>,
}

fn err(code: ErrorCode, line: usize, column: usize, message: impl Into<String>, token: impl Into<String>) -> ValidationError {
    ValidationError {
        code,
        line,
        column,
        message: message.into(),
        token: token.into(),
    }
}

fn dotted(tokens: &[Token]) -> Option<(Vec<String>, usize)> {
    let mut parts = Vec::new();
    let mut i = 0;
    loop {
        match tokens.get(i).map(|t| &t.tok) {
            Some(Tok::Ident(name)) => parts.push(name.clone()),
            _ => return None,
        }
        i += 1;
        if matches!(tokens.get(i).map(|t| &t.tok), Some(Tok::Dot)) {
            i += 1;
        } else {
            return Some((parts, i));
        }
    }
}

fn literal(tokens: &[Token]) -> Result<Literal, &'static str> {
    match tokens {
        [] => Err("missing value"),
        [t] => match &t.tok {
            Tok::Int(v) => Ok(Literal::Int(*v)),
            Tok::Dec(v) => Ok(Literal::Decimal(*v)),
            Tok::Str(s) => Ok(Literal::Str(s.clone())),
            Tok::Ident(b) if b == "True" => Ok(Literal::Bool(true)),
            Tok::Ident(b) if b == "False" => Ok(Literal::Bool(false)),
            _ => Err("only literal values are allowed"),
        },
        _ => Err("only literal values are allowed, not expressions"),
    }
}

fn token_text(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| match &t.tok {
            Tok::Ident(s) => s.clone(),
            Tok::Int(v) => v.to_string(),
            Tok::Dec(v) => v.to_string(),
            Tok::Str(s) => format!("{s:?}"),
            Tok::LParen => "(".into(),
            Tok::RParen => ")".into(),
            Tok::Comma => ",".into(),
            Tok::Assign => "=".into(),
            Tok::EqEq => "==".into(),
            Tok::Colon => ":".into(),
            Tok::Dot => ".".into(),
            Tok::Ellipsis => "...".into(),
            Tok::Op(c) => c.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses `( args )` where `tokens[0]` is the opening paren. Returns the
/// arguments, or an error code and message.
fn call_args(tokens: &[Token]) -> Result<Vec<Arg>, (ErrorCode, usize, String)> {
    let close = match tokens.last() {
        Some(Token { tok: Tok::RParen, .. }) => tokens.len() - 1,
        _ => {
            let col = tokens.last().map(|t| t.col).unwrap_or(1);
            return Err((ErrorCode::Syntax, col, "unbalanced parentheses in call".into()));
        }
    };
    let inner = &tokens[1..close];
    if inner.iter().any(|t| matches!(t.tok, Tok::LParen | Tok::RParen)) {
        let col = inner
            .iter()
            .find(|t| matches!(t.tok, Tok::LParen | Tok::RParen))
            .map(|t| t.col)
            .unwrap_or(1);
        return Err((ErrorCode::ForbiddenConstruct, col, "nested calls are not allowed".into()));
    }
    let mut args = Vec::new();
    if inner.is_empty() {
        return Ok(args);
    }
    for piece in inner.split(|t| matches!(t.tok, Tok::Comma)) {
        let col = piece.first().map(|t| t.col).unwrap_or(tokens[0].col);
        let (name, value_toks) = match piece {
            [Token { tok: Tok::Ident(n), .. }, Token { tok: Tok::Assign, .. }, rest @ ..] => (Some(n.clone()), rest),
            rest => (None, rest),
        };
        if name.is_none() && args.iter().any(|a: &Arg| a.name.is_some()) {
            return Err((ErrorCode::Syntax, col, "positional argument follows keyword argument".into()));
        }
        match literal(value_toks) {
            Ok(value) => args.push(Arg { name, value }),
            Err(msg) => {
                let code = if value_toks.is_empty() {
                    ErrorCode::Syntax
                } else {
                    ErrorCode::ForbiddenConstruct
                };
                return Err((code, col, msg.into()));
            }
        }
    }
    Ok(args)
}

impl Parser {
    fn new() -> Self {
        Self {
            human_var: DEFAULT_HUMAN_VAR.to_string(),
            saw_preset: false,
            saw_action: false,
            ast: SnippetAst::default(),
            errors: Vec::new(),
            block: None,
        }
    }

    fn push(&mut self, line: usize, column: usize, kind: StatementKind) {
        if !matches!(kind, StatementKind::Comment { .. } | StatementKind::Import { .. }) {
            self.saw_action = true;
        }
        self.ast.statements.push(Statement { line, column, kind });
    }

    fn error(&mut self, e: ValidationError) {
        self.errors.push(e);
    }

    fn close_guard(&mut self) {
        if let Some(block) = &mut self.block {
            if let Some(guard) = block.guard.take() {
                if !guard.has_body {
                    self.errors.push(err(
                        ErrorCode::Syntax,
                        guard.header_line,
                        guard.header_col,
                        "expected an indented block after `if`",
                        guard.name,
                    ));
                }
            }
        }
    }

    fn close_block(&mut self) {
        self.close_guard();
        if let Some(block) = self.block.take() {
            if !block.has_body {
                self.errors.push(err(
                    ErrorCode::Syntax,
                    block.header_line,
                    block.indent + 1,
                    "expected an indented block after `for`",
                    "for",
                ));
            }
        }
    }

    fn line(&mut self, lineno: usize, raw: &str) {
        let indent = raw.chars().take_while(|c| *c == ' ' || *c == '\t').count();
        let (tokens, comment) = match tokenize(raw) {
            Ok(t) => t,
            Err(e) => {
                self.error(err(ErrorCode::Syntax, lineno, e.col, e.message, raw.trim()));
                return;
            }
        };
        if tokens.is_empty() {
            if let Some(text) = comment {
                self.push(lineno, indent + 1, StatementKind::Comment { text });
            }
            return;
        }

        // Leave any block we have dedented out of.
        if let Some(block) = &self.block {
            if indent <= block.indent {
                self.close_block();
            } else if block.guard.as_ref().is_some_and(|g| indent <= g.indent) {
                self.close_guard();
            }
        }

        if let Some(block) = &self.block {
            let in_guard = block.guard.is_some();
            if in_guard {
                self.guard_body(lineno, &tokens, raw);
            } else {
                self.for_body(lineno, indent, &tokens, raw);
            }
            return;
        }

        if indent > 0 {
            self.error(err(ErrorCode::Syntax, lineno, 1, "unexpected indent", raw.trim()));
            return;
        }
        self.top_level(lineno, &tokens, raw);
    }

    fn for_body(&mut self, lineno: usize, indent: usize, tokens: &[Token], raw: &str) {
        let col = tokens[0].col;
        let block = self.block.as_mut().expect("inside for block");
        block.has_body = true;
        let loop_var = block.var.clone();
        match &tokens[0].tok {
            Tok::Ellipsis if tokens.len() == 1 => self.push(lineno, col, StatementKind::Ellipsis),
            Tok::Ident(kw) if kw == "pass" && tokens.len() == 1 => self.push(lineno, col, StatementKind::Ellipsis),
            Tok::Ident(kw) if kw == "if" || kw == "elif" => {
                // if <var>.name == "<name>": [<var>.value = <lit>]
                let guard = match tokens {
                    [_, Token { tok: Tok::Ident(v), .. }, Token { tok: Tok::Dot, .. }, Token { tok: Tok::Ident(n), .. }, Token { tok: Tok::EqEq, .. }, Token { tok: Tok::Str(name), .. }, Token { tok: Tok::Colon, .. }, rest @ ..]
                        if *v == loop_var && n == "name" =>
                    {
                        Some((name.clone(), rest))
                    }
                    _ => None,
                };
                match guard {
                    Some((name, inline)) => {
                        let block = self.block.as_mut().expect("inside for block");
                        block.guard = Some(GuardBlock {
                            indent,
                            name,
                            has_body: false,
                            header_line: lineno,
                            header_col: col,
                        });
                        if !inline.is_empty() {
                            self.guard_body(lineno, inline, raw);
                        }
                    }
                    None => self.error(err(
                        ErrorCode::ForbiddenConstruct,
                        lineno,
                        col,
                        format!("only `if {loop_var}.name == \"...\":` guards are allowed in key loops"),
                        raw.trim(),
                    )),
                }
            }
            _ => self.error(err(
                ErrorCode::ForbiddenConstruct,
                lineno,
                col,
                "key loop bodies may only contain name guards",
                raw.trim(),
            )),
        }
    }

    fn guard_body(&mut self, lineno: usize, tokens: &[Token], raw: &str) {
        let col = tokens[0].col;
        let block = self.block.as_mut().expect("inside for block");
        let collection = block.collection;
        let loop_var = block.var.clone();
        let guard = block.guard.as_mut().expect("inside guard");
        guard.has_body = true;
        let name = guard.name.clone();
        match tokens {
            [Token { tok: Tok::Ellipsis, .. }] => self.push(lineno, col, StatementKind::Ellipsis),
            [Token { tok: Tok::Ident(p), .. }] if p == "pass" => self.push(lineno, col, StatementKind::Ellipsis),
            [Token { tok: Tok::Ident(v), .. }, Token { tok: Tok::Dot, .. }, Token { tok: Tok::Ident(f), .. }, Token { tok: Tok::Assign, .. }, rest @ ..]
                if *v == loop_var && f == "value" =>
            {
                match literal(rest) {
                    Ok(value) => self.push(
                        lineno,
                        col,
                        StatementKind::KeyLoop {
                            collection,
                            name,
                            value,
                        },
                    ),
                    Err(msg) => {
                        let code = if rest.is_empty() {
                            ErrorCode::Syntax
                        } else {
                            ErrorCode::ForbiddenConstruct
                        };
                        let c = rest.first().map(|t| t.col).unwrap_or(col);
                        self.error(err(code, lineno, c, msg, token_text(rest)))
                    }
                }
            }
            _ => self.error(err(
                ErrorCode::ForbiddenConstruct,
                lineno,
                col,
                format!("guarded blocks may only assign `{loop_var}.value`"),
                raw.trim(),
            )),
        }
    }

    fn top_level(&mut self, lineno: usize, tokens: &[Token], raw: &str) {
        let col = tokens[0].col;
        let text = raw.trim();
        match &tokens[0].tok {
            Tok::Ellipsis if tokens.len() == 1 => return self.push(lineno, col, StatementKind::Ellipsis),
            Tok::Ident(kw) if kw == "pass" && tokens.len() == 1 => {
                return self.push(lineno, col, StatementKind::Ellipsis)
            }
            Tok::Ident(kw) if kw == "import" || kw == "from" => return self.import(lineno, tokens, text),
            Tok::Ident(kw) if kw == "for" => return self.for_header(lineno, tokens, text),
            Tok::Ident(kw) if kw == "if" || kw == "elif" || kw == "else" => {
                return self.error(err(
                    ErrorCode::ForbiddenConstruct,
                    lineno,
                    col,
                    "conditionals are only allowed inside key loops",
                    text,
                ))
            }
            Tok::Ident(kw) if FORBIDDEN_KEYWORDS.contains(&kw.as_str()) => {
                return self.error(err(
                    ErrorCode::ForbiddenConstruct,
                    lineno,
                    col,
                    format!("`{kw}` is not allowed in snippets"),
                    kw.clone(),
                ))
            }
            _ => {}
        }

        let Some((path, after)) = dotted(tokens) else {
            return self.error(err(ErrorCode::Syntax, lineno, col, "unrecognized statement", text));
        };
        let rest = &tokens[after..];
        match rest.first().map(|t| &t.tok) {
            Some(Tok::Assign) => self.assignment(lineno, col, &path, &rest[1..], text),
            Some(Tok::LParen) => self.call(lineno, col, &path, rest, text),
            _ => {
                let (code, msg) = if rest.iter().any(|t| matches!(t.tok, Tok::Op(_))) {
                    (ErrorCode::ForbiddenConstruct, "operators are not allowed")
                } else {
                    (ErrorCode::Syntax, "unrecognized statement")
                };
                self.error(err(code, lineno, col, msg, text))
            }
        }
    }

    fn import(&mut self, lineno: usize, tokens: &[Token], text: &str) {
        let col = tokens[0].col;
        let parsed = match tokens {
            [Token { tok: Tok::Ident(kw), .. }, rest @ ..] if kw == "import" => {
                dotted(rest).filter(|(_, n)| *n == rest.len()).map(|(m, _)| (m.join("."), vec![]))
            }
            [Token { tok: Tok::Ident(kw), .. }, rest @ ..] if kw == "from" => match dotted(rest) {
                Some((module, n)) => match &rest[n..] {
                    [Token { tok: Tok::Ident(i), .. }, names @ ..] if i == "import" && !names.is_empty() => {
                        let mut out = Vec::new();
                        let mut ok = true;
                        for (k, t) in names.iter().enumerate() {
                            match (&t.tok, k % 2) {
                                (Tok::Ident(n), 0) => out.push(n.clone()),
                                (Tok::Comma, 1) => {}
                                _ => ok = false,
                            }
                        }
                        ok.then(|| (module.join("."), out))
                    }
                    _ => None,
                },
                None => None,
            },
            _ => None,
        };
        let Some((module, names)) = parsed else {
            return self.error(err(ErrorCode::Syntax, lineno, col, "malformed import", text));
        };
        let allowed = ALLOWED_IMPORTS.iter().any(|(m, allowed_names)| {
            *m == module && names.iter().all(|n| allowed_names.contains(&n.as_str()))
        });
        if allowed {
            self.push(lineno, col, StatementKind::Import { module, names });
        } else {
            self.error(err(
                ErrorCode::ForbiddenConstruct,
                lineno,
                col,
                format!("import of `{module}` is not in the allowlist"),
                text,
            ));
        }
    }

    fn for_header(&mut self, lineno: usize, tokens: &[Token], text: &str) {
        let col = tokens[0].col;
        let header = match tokens {
            [_, Token { tok: Tok::Ident(var), .. }, Token { tok: Tok::Ident(kw_in), .. }, rest @ ..]
                if kw_in == "in" && matches!(rest.last().map(|t| &t.tok), Some(Tok::Colon)) =>
            {
                let path = match dotted(rest) {
                    Some((path, n)) if n + 1 == rest.len() => path,
                    _ => Vec::new(),
                };
                Some((var.clone(), path))
            }
            _ => None,
        };
        let Some((var, path)) = header else {
            return self.error(err(ErrorCode::Syntax, lineno, col, "malformed for loop", text));
        };
        let collection = match path.as_slice() {
            [h, c, k] if *h == self.human_var && k == "keys" && c == "body" => Some(KeyCollection::Body),
            [h, c, k] if *h == self.human_var && k == "keys" && c == "face" => Some(KeyCollection::Face),
            _ => None,
        };
        match collection {
            Some(collection) => {
                self.saw_action = true;
                self.block = Some(ForBlock {
                    indent: 0,
                    var,
                    collection,
                    has_body: false,
                    header_line: lineno,
                    guard: None,
                });
            }
            None => self.error(err(
                ErrorCode::ForbiddenConstruct,
                lineno,
                col,
                format!("loops are only allowed over `{}.body.keys` or `{}.face.keys`", self.human_var, self.human_var),
                text,
            )),
        }
    }

    fn assignment(&mut self, lineno: usize, col: usize, lhs: &[String], rhs: &[Token], text: &str) {
        // <var> = Human.from_preset("<path>")
        if lhs.len() == 1 {
            let preset = match rhs {
                [Token { tok: Tok::Ident(h), .. }, Token { tok: Tok::Dot, .. }, Token { tok: Tok::Ident(m), .. }, call @ ..]
                    if h == "Human" && m == "from_preset" && !call.is_empty() && matches!(call[0].tok, Tok::LParen) =>
                {
                    Some(call_args(call))
                }
                _ => None,
            };
            return match preset {
                Some(Ok(args)) => match args.as_slice() {
                    [Arg { name: None, value: Literal::Str(path) }] => {
                        if self.saw_preset {
                            self.error(err(
                                ErrorCode::ForbiddenConstruct,
                                lineno,
                                col,
                                "only one preset load is allowed",
                                text,
                            ));
                        } else if self.saw_action {
                            self.error(err(
                                ErrorCode::ForbiddenConstruct,
                                lineno,
                                col,
                                "the preset load must precede all other statements",
                                text,
                            ));
                        } else {
                            self.saw_preset = true;
                            self.human_var = lhs[0].clone();
                            self.push(
                                lineno,
                                col,
                                StatementKind::PresetLoad {
                                    var: lhs[0].clone(),
                                    path: path.clone(),
                                },
                            );
                        }
                    }
                    _ => self.error(err(
                        ErrorCode::Syntax,
                        lineno,
                        col,
                        "Human.from_preset takes exactly one string path",
                        text,
                    )),
                },
                Some(Err((code, c, msg))) => self.error(err(code, lineno, c, msg, text)),
                None => self.error(err(
                    ErrorCode::ForbiddenConstruct,
                    lineno,
                    col,
                    "assignments are only allowed to channels of the human object",
                    text,
                )),
            };
        }
        if lhs[0] != self.human_var {
            return self.error(err(
                ErrorCode::ForbiddenConstruct,
                lineno,
                col,
                format!("assignment target must be rooted at `{}`", self.human_var),
                lhs.join("."),
            ));
        }
        let mut path = &lhs[1..];
        if path.len() > 1 && path.last().is_some_and(|p| p == "value") {
            path = &path[..path.len() - 1];
        }
        match literal(rhs) {
            Ok(value) => self.push(
                lineno,
                col,
                StatementKind::AttrAssign {
                    path: path.join("."),
                    value,
                },
            ),
            Err(msg) => {
                let code = if rhs.is_empty() {
                    ErrorCode::Syntax
                } else {
                    ErrorCode::ForbiddenConstruct
                };
                let c = rhs.first().map(|t| t.col).unwrap_or(col);
                self.error(err(code, lineno, c, msg, token_text(rhs)))
            }
        }
    }

    fn call(&mut self, lineno: usize, col: usize, path: &[String], rest: &[Token], text: &str) {
        if path[0] != self.human_var || path.len() < 2 {
            return self.error(err(
                ErrorCode::ForbiddenConstruct,
                lineno,
                col,
                format!("only calls on `{}` are allowed", self.human_var),
                path.join("."),
            ));
        }
        let args = match call_args(rest) {
            Ok(args) => args,
            Err((code, c, msg)) => return self.error(err(code, lineno, c, msg, text)),
        };
        let target = path[1..].join(".");
        if let Some(category) = asset_category(&target) {
            match args.as_slice() {
                [Arg { name: None, value: Literal::Str(asset) }] => self.push(
                    lineno,
                    col,
                    StatementKind::AssetSet {
                        category: category.to_string(),
                        target,
                        path: asset.clone(),
                    },
                ),
                _ => self.error(err(
                    ErrorCode::Syntax,
                    lineno,
                    col,
                    format!("`{target}` takes exactly one asset path string"),
                    text,
                )),
            }
        } else {
            self.push(lineno, col, StatementKind::MethodCall { target, args });
        }
    }
}

/// Parses a snippet body. Parsing is total: every line either contributes a
/// statement or an error, and the body is never executed.
pub fn parse_snippet(body: &str) -> ParseOutcome {
    let mut parser = Parser::new();
    for (idx, raw) in body.lines().enumerate() {
        parser.line(idx + 1, raw);
    }
    parser.close_block();
    ParseOutcome {
        ast: parser.ast,
        errors: parser.errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(body: &str) -> Vec<ErrorCode> {
        parse_snippet(body).errors.iter().map(|e| e.code).collect()
    }

    #[test]
    fn height_call_parses_to_method_call() {
        let out = parse_snippet("my_human.height.set(value_cm=165)");
        assert!(out.errors.is_empty());
        assert_eq!(
            out.ast.statements[0].kind,
            StatementKind::MethodCall {
                target: "height.set".into(),
                args: vec![Arg {
                    name: Some("value_cm".into()),
                    value: Literal::Int(165)
                }],
            }
        );
    }

    #[test]
    fn empty_body_is_empty_ast() {
        let out = parse_snippet("");
        assert!(out.ast.statements.is_empty());
        assert!(out.errors.is_empty());
    }

    #[test]
    fn import_os_is_forbidden_at_its_line() {
        let out = parse_snippet("import bpy\nimport os\n");
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].code, ErrorCode::ForbiddenConstruct);
        assert_eq!(out.errors[0].line, 2);
        assert_eq!(out.errors[0].column, 1);
    }

    #[test]
    fn appendix_sample_parses_fully() {
        let out = parse_snippet(include_str!("../../fixtures/appendix_sample.py"));
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        let kinds: Vec<&StatementKind> = out
            .ast
            .statements
            .iter()
            .map(|s| &s.kind)
            .filter(|k| !matches!(k, StatementKind::Comment { .. }))
            .collect();
        assert!(matches!(kinds[2], StatementKind::PresetLoad { path, .. } if path == "models/female/Hispanic/Tara.json"));
        assert!(kinds.iter().any(|k| matches!(k, StatementKind::KeyLoop { collection: KeyCollection::Body, name, .. } if name == "Neck Length")));
        assert!(kinds.iter().any(|k| matches!(k, StatementKind::KeyLoop { collection: KeyCollection::Face, name, .. } if name == "eye_tilt")));
        assert!(kinds.iter().any(|k| matches!(k, StatementKind::AttrAssign { path, value: Literal::Decimal(v) } if path == "hair.regular_hair.hue" && (*v - 0.55).abs() < 1e-12)));
        assert!(kinds.iter().any(|k| matches!(k, StatementKind::AssetSet { category, .. } if category == "skin_texture")));
    }

    #[test]
    fn forbidden_constructs() {
        for body in [
            "open(\"/etc/passwd\")",
            "eval(\"1\")",
            "exec(\"x\")",
            "print(1)",
            "def f():",
            "while True:",
            "bpy.ops.wm.quit_blender()",
            "x = 5",
            "my_human.age.set(30 + 2)",
            "my_human.hair.regular_hair.hue.value = 0.5 * 2",
            "from os import path",
            "import subprocess",
            "for i in range(3):",
            "my_human.age.set(int(\"3\"))",
        ] {
            assert_eq!(codes(body), vec![ErrorCode::ForbiddenConstruct], "{body}");
        }
    }

    #[test]
    fn syntax_errors() {
        for body in [
            "my_human.age.set(30",
            "my_human.hair.regular_hair.set(\"unterminated)",
            "my_human.hair.regular_hair.hue.value =",
            "    my_human.age.set(30)",
            "1abc",
        ] {
            assert_eq!(codes(body), vec![ErrorCode::Syntax], "{body}");
        }
    }

    #[test]
    fn parsing_continues_after_errors() {
        let out = parse_snippet("import os\nmy_human.age.set(30)\nopen('x')\nmy_human.height.set(value_cm=170)");
        assert_eq!(out.errors.len(), 2);
        assert_eq!(out.ast.statements.len(), 2);
    }

    #[test]
    fn refiner_style_channel_without_value_suffix() {
        let out = parse_snippet("my_human = Human.from_preset(r\"models/male/Asian presets/Asian 3.json\")\nmy_human.hair.regular_hair.redness = -0.3");
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        assert_eq!(
            out.ast.statements[1].kind,
            StatementKind::AttrAssign {
                path: "hair.regular_hair.redness".into(),
                value: Literal::Decimal(-0.3)
            }
        );
    }

    #[test]
    fn preset_must_come_first_and_once() {
        let late = parse_snippet("my_human.age.set(30)\nmy_human = Human.from_preset(\"a.json\")");
        assert_eq!(late.errors[0].code, ErrorCode::ForbiddenConstruct);
        assert!(late.ast.preset().is_none());
        let twice = parse_snippet("h = Human.from_preset(\"a.json\")\nh = Human.from_preset(\"b.json\")");
        assert_eq!(twice.errors.len(), 1);
        assert_eq!(twice.ast.preset().unwrap().0, "a.json");
    }

    #[test]
    fn inline_guard_and_elif() {
        let body = "h = Human.from_preset(\"p\")\nfor k in h.face.keys:\n    if k.name == \"nose_width\": k.value = 0.2\n    elif k.name == \"jaw_width\":\n        k.value = -0.1\n";
        let out = parse_snippet(body);
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        let loops = out
            .ast
            .statements
            .iter()
            .filter(|s| matches!(s.kind, StatementKind::KeyLoop { .. }))
            .count();
        assert_eq!(loops, 2);
    }

    #[test]
    fn unguarded_key_assignment_is_forbidden() {
        let body = "for key in my_human.body.keys:\n    key.value = 1.0\n";
        assert_eq!(codes(body), vec![ErrorCode::ForbiddenConstruct]);
    }

    #[test]
    fn empty_loop_body_is_syntax_error() {
        assert_eq!(codes("for key in my_human.body.keys:\nmy_human.age.set(30)"), vec![ErrorCode::Syntax]);
    }

    #[test]
    fn bindings_cover_every_setter_kind() {
        let out = parse_snippet(include_str!("../../fixtures/appendix_sample.py"));
        let b = out.ast.attribute_bindings();
        assert_eq!(b["height_cm"], Literal::Int(165));
        assert_eq!(b["age"], Literal::Int(32));
        assert_eq!(b["hair.quality"], Literal::Str("high".into()));
        assert_eq!(b["body.Neck Length"], Literal::Decimal(0.5));
        assert_eq!(b["skin.texture"], Literal::Str("textures/female/Default 4K/Female 07.png".into()));
    }
}
