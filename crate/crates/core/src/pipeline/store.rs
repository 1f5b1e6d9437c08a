//! Filesystem layout of sessions:
//!
//! ```text
//! <root>/sessions/<id>/
//!     state.json  outcome.json  log.jsonl  render.log  input.png
//!     iter_<n>.snippet
//!     iter_<n>/{portrait,full_body}.png
//! ```

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::journal::LOG_FILE;
use super::state::{SessionOutcome, SessionState};
use crate::render::View;
use crate::validator::{extract_region, wrap_region};

pub const STATE_FILE: &str = "state.json";
pub const OUTCOME_FILE: &str = "outcome.json";
pub const INPUT_IMAGE_FILE: &str = "input.png";
pub const RENDER_LOG_FILE: &str = "render.log";

/// Session ids are used as directory names, so they are kept to a safe
/// alphabet.
pub fn is_valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

pub fn new_session_id() -> String {
    format!("{}-{:08x}", Utc::now().format("%Y%m%d%H%M%S"), rand::random::<u32>())
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidInput, msg.into())
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir_of(&self, id: &str) -> io::Result<PathBuf> {
        if !is_valid_session_id(id) {
            return Err(invalid(format!("bad session id {id:?}")));
        }
        Ok(self.root.join("sessions").join(id))
    }

    pub fn create(&self, id: &str) -> io::Result<SessionDir> {
        let path = self.dir_of(id)?;
        fs::create_dir(&path)?;
        Ok(SessionDir { path })
    }

    /// `None` when no such session exists.
    pub fn open(&self, id: &str) -> io::Result<Option<SessionDir>> {
        let path = match self.dir_of(id) {
            Ok(p) => p,
            Err(_) => return Ok(None),
        };
        Ok(path.join(STATE_FILE).is_file().then_some(SessionDir { path }))
    }

    pub fn ids(&self) -> io::Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join("sessions"))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(STATE_FILE).is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }
}

/// One session's directory.
#[derive(Debug, Clone)]
pub struct SessionDir {
    path: PathBuf,
}

impl SessionDir {
    /// Uses `path` as a session directory, creating it if needed.
    pub fn at(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn journal_path(&self) -> PathBuf {
        self.path.join(LOG_FILE)
    }

    pub fn iteration_dir(&self, iteration: u32) -> io::Result<PathBuf> {
        let dir = self.path.join(format!("iter_{iteration}"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    pub fn render_rel(iteration: u32, view: View) -> String {
        format!("iter_{iteration}/{}", view.file_name())
    }

    pub fn snippet_rel(iteration: u32) -> String {
        format!("iter_{iteration}.snippet")
    }

    pub fn render_path(&self, iteration: u32, view: View) -> PathBuf {
        self.path.join(Self::render_rel(iteration, view))
    }

    pub fn write_render(&self, iteration: u32, view: View, bytes: &[u8]) -> io::Result<()> {
        self.iteration_dir(iteration)?;
        let path = self.render_path(iteration, view);
        // Headless renders already sit at their final path.
        if fs::read(&path).is_ok_and(|existing| existing == bytes) {
            return Ok(());
        }
        write_atomic(&path, bytes)
    }

    pub fn read_render(&self, iteration: u32, view: View) -> io::Result<Vec<u8>> {
        fs::read(self.render_path(iteration, view))
    }

    /// Stores the body wrapped in region markers.
    pub fn write_snippet(&self, iteration: u32, body: &str) -> io::Result<()> {
        write_atomic(&self.path.join(Self::snippet_rel(iteration)), wrap_region(body).as_bytes())
    }

    pub fn read_snippet(&self, iteration: u32) -> io::Result<String> {
        let text = fs::read_to_string(self.path.join(Self::snippet_rel(iteration)))?;
        extract_region(&text)
            .map(|r| r.body)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
    }

    pub fn write_state(&self, state: &SessionState) -> io::Result<()> {
        write_json(&self.path.join(STATE_FILE), state)
    }

    pub fn read_state(&self) -> io::Result<SessionState> {
        read_json(&self.path.join(STATE_FILE))
    }

    pub fn write_outcome(&self, outcome: &SessionOutcome) -> io::Result<()> {
        write_json(&self.path.join(OUTCOME_FILE), outcome)
    }

    pub fn read_outcome(&self) -> io::Result<SessionOutcome> {
        read_json(&self.path.join(OUTCOME_FILE))
    }

    pub fn write_input_image(&self, bytes: &[u8]) -> io::Result<()> {
        write_atomic(&self.path.join(INPUT_IMAGE_FILE), bytes)
    }

    pub fn read_input_image(&self) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.path.join(INPUT_IMAGE_FILE)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn append_render_log(&self, iteration: u32, text: &str) -> io::Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path.join(RENDER_LOG_FILE))?;
        writeln!(f, "== iteration {iteration}")?;
        f.write_all(text.as_bytes())?;
        if !text.ends_with('\n') {
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> io::Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::state::{InputSpec, VerificationConfig};

    #[test]
    fn ids_are_path_safe() {
        assert!(is_valid_session_id(&new_session_id()));
        for bad in ["", "../x", "a/b", "a b", "..", &"x".repeat(65)] {
            assert!(!is_valid_session_id(bad), "{bad}");
        }
    }

    #[test]
    fn layout_and_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let store = SessionStore::new(tmp.path()).unwrap();
        let dir = store.create("abc").unwrap();
        assert!(store.create("abc").is_err());
        assert!(store.open("abc").unwrap().is_none());

        let state = SessionState::new("abc", InputSpec { text: Some("t".into()), image_sha256: None, kind_override: None }, VerificationConfig::default());
        dir.write_state(&state).unwrap();
        assert_eq!(dir.read_state().unwrap(), state);
        assert_eq!(store.ids().unwrap(), vec!["abc"]);
        assert!(store.open("abc").unwrap().is_some());
        assert!(store.open("../abc").unwrap().is_none());

        dir.write_snippet(2, "my_human.age.set(30)").unwrap();
        let raw = fs::read_to_string(dir.path().join("iter_2.snippet")).unwrap();
        assert!(raw.starts_with("# region RENDER_SNIPPET\n"));
        assert_eq!(dir.read_snippet(2).unwrap(), "my_human.age.set(30)");

        dir.write_render(2, View::Portrait, b"png").unwrap();
        assert_eq!(dir.read_render(2, View::Portrait).unwrap(), b"png");
        assert!(dir.path().join("iter_2/portrait.png").is_file());
        assert!(dir.read_input_image().unwrap().is_none());
        dir.append_render_log(1, "ok").unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(RENDER_LOG_FILE)).unwrap(), "== iteration 1\nok\n");
    }
}
