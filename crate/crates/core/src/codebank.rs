//! Verified snippets kept as few-shot examples, retrieved by cosine
//! similarity of attribute fingerprints.
//!
//! Persistence is an append-only `codebank.jsonl`. Readers work on an
//! immutable snapshot; writers are serialized.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::FewShotExample;
use crate::schema::{serialize_attributes, ApiSchema, AttributeSet, AttributeValue};
use crate::similarity::{EmbedInput, EmbeddingProvider};
use crate::validator::{validate_snippet, ValidationContext, ValidationError};

pub const DEFAULT_DIMENSION: usize = 256;
pub const BANK_FILE: &str = "codebank.jsonl";

#[derive(Debug, Error)]
pub enum BankError {
    #[error("snippet rejected: {} validation error(s), first: {}", .0.len(), .0[0])]
    Invalid(Vec<ValidationError>),
    #[error("fingerprint provider {provider}: {message}")]
    Provider { provider: String, message: String },
    #[error("fingerprint has dimension {got}, bank expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeBankEntry {
    pub id: String,
    pub fingerprint: Vec<f64>,
    pub attrs: AttributeSet,
    pub body: String,
    pub created_at: DateTime<Utc>,
    pub session: String,
}

impl CodeBankEntry {
    pub fn example(&self) -> FewShotExample {
        FewShotExample {
            id: self.id.clone(),
            body: self.body.clone(),
        }
    }

    /// Entries fingerprinted from an empty attribute set never match.
    pub fn is_retrievable(&self) -> bool {
        norm(&self.fingerprint) > 0.0
    }
}

fn token(path: &str, value: &AttributeValue) -> String {
    match value {
        AttributeValue::Scalar(v) => format!("{path}={v}"),
        AttributeValue::Text(t) => format!("{path}={t}"),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Hashed bag of `path=value` tokens folded into `dimension` buckets and
/// L2-normalized. The empty set maps to the zero vector.
pub fn fingerprint(attrs: &AttributeSet, dimension: usize) -> Vec<f64> {
    let mut v = vec![0.0; dimension];
    if dimension == 0 {
        return v;
    }
    for (path, entry) in &attrs.entries {
        let digest = Sha256::digest(token(path, &entry.value).as_bytes());
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % dimension as u64;
        v[bucket as usize] += 1.0;
    }
    normalize(v)
}

fn cosine_unit(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The fingerprint scheme a bank uses.
#[derive(Clone)]
pub enum Fingerprinter {
    Hashed { dimension: usize },
    /// Text embedding of the serialized attribute document.
    Provider(Arc<dyn EmbeddingProvider>),
}

impl Fingerprinter {
    pub fn dimension(&self) -> usize {
        match self {
            Fingerprinter::Hashed { dimension } => *dimension,
            Fingerprinter::Provider(p) => p.dimension(),
        }
    }

    pub fn fingerprint(&self, attrs: &AttributeSet) -> Result<Vec<f64>, BankError> {
        let v = match self {
            Fingerprinter::Hashed { dimension } => return Ok(fingerprint(attrs, *dimension)),
            Fingerprinter::Provider(_) if attrs.is_empty() => vec![0.0; self.dimension()],
            Fingerprinter::Provider(p) => {
                let doc = serialize_attributes(attrs);
                p.embed(EmbedInput::Text(&doc)).map_err(|message| BankError::Provider {
                    provider: p.name().to_string(),
                    message,
                })?
            }
        };
        if v.len() != self.dimension() {
            return Err(BankError::Dimension {
                expected: self.dimension(),
                got: v.len(),
            });
        }
        Ok(normalize(v))
    }
}

impl Default for Fingerprinter {
    fn default() -> Self {
        Fingerprinter::Hashed {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

impl std::fmt::Debug for Fingerprinter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fingerprinter::Hashed { dimension } => write!(f, "Hashed({dimension})"),
            Fingerprinter::Provider(p) => write!(f, "Provider({})", p.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PruneReport {
    pub kept: usize,
    /// `(id, reason)` for every removed entry.
    pub removed: Vec<(String, String)>,
}

/// The example bank. Cheap to share behind an `Arc`.
#[derive(Debug)]
pub struct CodeBank {
    schema: Arc<ApiSchema>,
    fingerprinter: Fingerprinter,
    path: Option<PathBuf>,
    snapshot: RwLock<Arc<Vec<CodeBankEntry>>>,
    writer: Mutex<()>,
}

impl CodeBank {
    pub fn in_memory(schema: Arc<ApiSchema>) -> Self {
        Self {
            schema,
            fingerprinter: Fingerprinter::default(),
            path: None,
            snapshot: RwLock::new(Arc::new(Vec::new())),
            writer: Mutex::new(()),
        }
    }

    /// Loads `path` fully, creating nothing until the first insertion. A
    /// torn final line (crash mid-append) is skipped with a warning.
    pub fn open(path: impl Into<PathBuf>, schema: Arc<ApiSchema>) -> Result<Self, BankError> {
        let path = path.into();
        let mut entries = Vec::new();
        match File::open(&path) {
            Ok(file) => {
                let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
                let last = lines.len();
                for (i, line) in lines.iter().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    match serde_json::from_str::<CodeBankEntry>(line) {
                        Ok(e) => entries.push(e),
                        Err(e) if i + 1 == last => {
                            tracing::warn!(path = %path.display(), error = %e, "skipping torn final bank line");
                        }
                        Err(e) => {
                            return Err(BankError::Corrupt {
                                path,
                                line: i + 1,
                                message: e.to_string(),
                            })
                        }
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(Self {
            schema,
            fingerprinter: Fingerprinter::default(),
            path: Some(path),
            snapshot: RwLock::new(Arc::new(entries)),
            writer: Mutex::new(()),
        })
    }

    pub fn with_fingerprinter(mut self, fingerprinter: Fingerprinter) -> Self {
        self.fingerprinter = fingerprinter;
        self
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn snapshot(&self) -> Arc<Vec<CodeBankEntry>> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Revalidates `body` and appends a new entry. Returns its id.
    pub fn add(&self, attrs: &AttributeSet, body: &str, session: &str) -> Result<String, BankError> {
        let errors = validate_snippet(body, &self.schema, ValidationContext::FreshGeneration);
        if !errors.is_empty() {
            return Err(BankError::Invalid(errors));
        }
        let fingerprint = self.fingerprinter.fingerprint(attrs)?;
        let mut hasher = Sha256::new();
        for part in [session.as_bytes(), b"\0", body.as_bytes(), b"\0", serialize_attributes(attrs).as_bytes()] {
            hasher.update(part);
        }
        let entry = CodeBankEntry {
            id: hex::encode(&hasher.finalize()[..8]),
            fingerprint,
            attrs: attrs.clone(),
            body: body.to_string(),
            created_at: Utc::now(),
            session: session.to_string(),
        };
        let id = entry.id.clone();

        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&entry).expect("entries serialize");
            line.push('\n');
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        let mut next = (*self.snapshot()).clone();
        next.push(entry);
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
        Ok(id)
    }

    /// Top `k` entries by descending fingerprint cosine, newest first on
    /// ties. Empty for `k = 0` or an empty query.
    pub fn retrieve(&self, attrs: &AttributeSet, k: usize) -> Result<Vec<CodeBankEntry>, BankError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let query = self.fingerprinter.fingerprint(attrs)?;
        if norm(&query) == 0.0 {
            return Ok(Vec::new());
        }
        let snapshot = self.snapshot();
        let mut scored: Vec<(f64, usize)> = snapshot
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_retrievable() && e.fingerprint.len() == query.len())
            .map(|(i, e)| (cosine_unit(&query, &e.fingerprint), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        Ok(scored.into_iter().take(k).map(|(_, i)| snapshot[i].clone()).collect())
    }

    pub fn examples(&self, attrs: &AttributeSet, k: usize) -> Result<Vec<FewShotExample>, BankError> {
        Ok(self.retrieve(attrs, k)?.iter().map(CodeBankEntry::example).collect())
    }

    /// Drops entries that no longer validate against the current schema,
    /// have a wrong-sized fingerprint, or repeat an earlier snippet body.
    /// Rewrites the file atomically.
    pub fn prune(&self) -> Result<PruneReport, BankError> {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.snapshot();
        let mut seen = std::collections::HashSet::new();
        let mut kept = Vec::new();
        let mut removed = Vec::new();
        for entry in current.iter() {
            let errors = validate_snippet(&entry.body, &self.schema, ValidationContext::FreshGeneration);
            let reason = if let Some(first) = errors.first() {
                Some(format!("invalid: {first}"))
            } else if entry.fingerprint.len() != self.fingerprinter.dimension() {
                Some(format!("fingerprint dimension {}", entry.fingerprint.len()))
            } else if !seen.insert(entry.body.clone()) {
                Some("duplicate body".to_string())
            } else {
                None
            };
            match reason {
                Some(r) => removed.push((entry.id.clone(), r)),
                None => kept.push(entry.clone()),
            }
        }
        if let Some(path) = &self.path {
            let tmp = path.with_extension("jsonl.tmp");
            let mut file = File::create(&tmp)?;
            for entry in &kept {
                writeln!(file, "{}", serde_json::to_string(entry).expect("entries serialize"))?;
            }
            file.sync_all()?;
            fs::rename(&tmp, path)?;
        }
        let report = PruneReport {
            kept: kept.len(),
            removed,
        };
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(kept);
        Ok(report)
    }
}
