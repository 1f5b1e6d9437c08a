//! Write-ahead session log: one JSON record per line, appended and flushed
//! before the loop acts on the step it describes.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::state::Phase;

pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Create,
    Describe,
    Generate,
    Validate,
    Repair,
    Render,
    Evaluate,
    Gate,
    Refine,
    Edit,
    Bank,
    Fail,
    /// A backend request, completion or error.
    Agent,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("steps serialize");
        f.write_str(v.as_str().expect("unit variant"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub ts: DateTime<Utc>,
    pub session: String,
    pub iteration: u32,
    pub step: Step,
    /// Phase entered by this step; bookkeeping records leave it unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_ref: Option<String>,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

enum Sink {
    File { file: Mutex<File>, path: PathBuf, durable: bool },
    Memory(Mutex<Vec<JournalRecord>>),
}

/// Append-only record sink, on disk or in memory.
pub struct Journal {
    sink: Sink,
}

impl fmt::Debug for Journal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.sink {
            Sink::File { path, .. } => write!(f, "Journal({})", path.display()),
            Sink::Memory(_) => f.write_str("Journal(memory)"),
        }
    }
}

impl Journal {
    /// Opens `path` for appending. With `durable`, every record is synced
    /// to disk before `append` returns.
    pub fn open(path: impl Into<PathBuf>, durable: bool) -> io::Result<Self> {
        let path = path.into();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            sink: Sink::File {
                file: Mutex::new(file),
                path,
                durable,
            },
        })
    }

    pub fn memory() -> Self {
        Self {
            sink: Sink::Memory(Mutex::new(Vec::new())),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory(_) => None,
        }
    }

    pub fn append(&self, record: &JournalRecord) -> io::Result<()> {
        match &self.sink {
            Sink::File { file, durable, .. } => {
                let mut line = serde_json::to_string(record).map_err(io::Error::other)?;
                line.push('\n');
                let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
                f.write_all(line.as_bytes())?;
                f.flush()?;
                if *durable {
                    f.sync_data()?;
                }
                Ok(())
            }
            Sink::Memory(records) => {
                records.lock().unwrap_or_else(|e| e.into_inner()).push(record.clone());
                Ok(())
            }
        }
    }

    /// All records so far, re-read from disk for file journals.
    pub fn records(&self) -> Result<Vec<JournalRecord>, ReplayError> {
        match &self.sink {
            Sink::File { path, .. } => Ok(read_log(path)?.0),
            Sink::Memory(records) => Ok(records.lock().unwrap_or_else(|e| e.into_inner()).clone()),
        }
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("log line {line}: illegal transition {from} -> {to}")]
    IllegalTransition { line: usize, from: String, to: Phase },
    #[error("log line {line}: iteration went back from {from} to {to}")]
    IterationRegressed { line: usize, from: u32, to: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Phase and iteration reconstructed from a log.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub phase: Option<Phase>,
    pub iteration: u32,
    pub records: Vec<JournalRecord>,
    /// A partial final line was found and ignored.
    pub torn_tail: bool,
}

/// Parses a log file. Only the final line may be malformed; it is taken to
/// be a write cut short by a crash.
pub fn read_log(path: &Path) -> Result<(Vec<JournalRecord>, bool), ReplayError> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let mut records = Vec::with_capacity(lines.len());
    let mut torn = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            Err(_) if i + 1 == lines.len() => torn = true,
            Err(e) => {
                return Err(ReplayError::Corrupt {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok((records, torn))
}

/// Walks `records`, checking every phase change against the session graph
/// and that step iterations never go backwards. Agent records carry the
/// iteration of the request and are not ordered against steps.
pub fn replay_records(records: Vec<JournalRecord>) -> Result<Replay, ReplayError> {
    let mut phase: Option<Phase> = None;
    let mut iteration = 0;
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        if r.step == Step::Agent {
            continue;
        }
        if r.iteration < iteration {
            return Err(ReplayError::IterationRegressed {
                line,
                from: iteration,
                to: r.iteration,
            });
        }
        iteration = r.iteration;
        if let Some(to) = r.phase {
            let ok = match phase {
                None => to == Phase::Created,
                Some(from) => from.can_transition(to),
            };
            if !ok {
                return Err(ReplayError::IllegalTransition {
                    line,
                    from: phase.map_or("start".to_string(), |p| p.to_string()),
                    to,
                });
            }
            phase = Some(to);
        }
    }
    Ok(Replay {
        phase,
        iteration,
        records,
        torn_tail: false,
    })
}

pub fn replay(path: &Path) -> Result<Replay, ReplayError> {
    let (records, torn) = read_log(path)?;
    let mut r = replay_records(records)?;
    r.torn_tail = torn;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iteration: u32, step: Step, phase: Option<Phase>) -> JournalRecord {
        JournalRecord {
            ts: Utc::now(),
            session: "s".into(),
            iteration,
            step,
            phase,
            payload_ref: None,
            outcome: "ok".into(),
            detail: serde_json::Value::Null,
        }
    }

    #[test]
    fn file_round_trip_with_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(LOG_FILE);
        let j = Journal::open(&path, true).unwrap();
        j.append(&rec(0, Step::Create, Some(Phase::Created))).unwrap();
        j.append(&rec(0, Step::Describe, Some(Phase::Described))).unwrap();
        j.append(&rec(1, Step::Agent, None)).unwrap();
        j.append(&rec(1, Step::Generate, Some(Phase::Drafted))).unwrap();
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"ts\":\"2026")
            .unwrap();
        let r = replay(&path).unwrap();
        assert!(r.torn_tail);
        assert_eq!(r.phase, Some(Phase::Drafted));
        assert_eq!(r.iteration, 1);
        assert_eq!(r.records.len(), 4);
        assert_eq!(r.records[2].step, Step::Agent);
    }

    #[test]
    fn record_shape() {
        let v = serde_json::to_value(rec(2, Step::Render, Some(Phase::Rendered))).unwrap();
        for key in ["ts", "session", "iteration", "step", "phase", "outcome"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["step"], "render");
        assert_eq!(Step::Gate.to_string(), "gate");
    }

    #[test]
    fn illegal_transitions_are_reported() {
        let e = replay_records(vec![
            rec(0, Step::Create, Some(Phase::Created)),
            rec(1, Step::Render, Some(Phase::Rendered)),
        ])
        .unwrap_err();
        assert!(matches!(e, ReplayError::IllegalTransition { line: 2, .. }));
        let e = replay_records(vec![rec(0, Step::Describe, Some(Phase::Described))]).unwrap_err();
        assert!(matches!(e, ReplayError::IllegalTransition { line: 1, .. }));
        let e = replay_records(vec![rec(2, Step::Bank, None), rec(1, Step::Bank, None)]).unwrap_err();
        assert!(replay_records(vec![rec(2, Step::Agent, None), rec(1, Step::Agent, None)]).is_ok());
        assert!(matches!(e, ReplayError::IterationRegressed { line: 2, .. }));
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(LOG_FILE);
        let good = serde_json::to_string(&rec(0, Step::Create, Some(Phase::Created))).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n{good}\n")).unwrap();
        assert!(matches!(replay(&path), Err(ReplayError::Corrupt { line: 2, .. })));
    }
}
