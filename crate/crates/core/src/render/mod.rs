//! Renderer adapters. A validated snippet is embedded in the scene template
//! and executed by the headless renderer, or synthesized by the mock.

mod headless;
mod mock;
mod template;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use headless::{HeadlessConfig, HeadlessRenderer};
pub use mock::{mock_image_bytes, MockRenderer};
pub use template::{compose_scene_script, SceneTemplate, TemplateError, SUBSTITUTION_POINT};

use crate::validator::{parse_error_trace, RepairHint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Portrait,
    FullBody,
}

impl View {
    pub const ALL: [View; 2] = [View::Portrait, View::FullBody];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Portrait => "portrait",
            View::FullBody => "full_body",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "portrait" => Some(View::Portrait),
            "full_body" => Some(View::FullBody),
            _ => None,
        }
    }

    /// `<view>.png`, the file name both adapters and the session store use.
    pub fn file_name(self) -> String {
        format!("{}.png", self.as_str())
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
}

impl ImageFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            ImageFormat::Png => "image/png",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedImage {
    pub format: ImageFormat,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderResult {
    pub images: BTreeMap<View, RenderedImage>,
    pub duration: Duration,
    pub log_excerpt: String,
}

impl RenderResult {
    pub fn image(&self, view: View) -> Option<&[u8]> {
        self.images.get(&view).map(|i| i.bytes.as_slice())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RequestError {
    #[error("render request has no views")]
    NoViews,
    #[error("render timeout must be positive")]
    ZeroTimeout,
    #[error("resolution must be non-zero")]
    ZeroResolution,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderRequest {
    pub snippet: String,
    pub views: BTreeSet<View>,
    pub resolution: (u32, u32),
    pub seed: u64,
    pub timeout: Duration,
}

impl RenderRequest {
    pub const DEFAULT_RESOLUTION: (u32, u32) = (512, 512);
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

    /// Both views at 512x512, seed 0, 300 s timeout.
    pub fn new(snippet: impl Into<String>) -> Self {
        Self {
            snippet: snippet.into(),
            views: View::ALL.into_iter().collect(),
            resolution: Self::DEFAULT_RESOLUTION,
            seed: 0,
            timeout: Self::DEFAULT_TIMEOUT,
        }
    }

    pub fn validate(&self) -> Result<(), RequestError> {
        if self.views.is_empty() {
            return Err(RequestError::NoViews);
        }
        if self.timeout.is_zero() {
            return Err(RequestError::ZeroTimeout);
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(RequestError::ZeroResolution);
        }
        Ok(())
    }
}

/// A failed render attempt.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("render failed ({}): {}", hint.kind, hint.message)]
pub struct ErrorTrace {
    pub raw: String,
    pub hint: RepairHint,
    pub exit_status: Option<i32>,
    pub timed_out: bool,
}

impl ErrorTrace {
    /// Builds a trace from the renderer's trace document or stderr.
    pub fn from_raw(raw: impl Into<String>, exit_status: Option<i32>, timed_out: bool) -> Self {
        let raw = raw.into();
        Self {
            hint: parse_error_trace(&raw),
            raw,
            exit_status,
            timed_out,
        }
    }

    /// A failure detected by the host rather than reported by the renderer.
    pub fn host(kind: &str, message: impl Into<String>, exit_status: Option<i32>, timed_out: bool) -> Self {
        let message = message.into();
        Self {
            raw: message.clone(),
            hint: RepairHint {
                kind: kind.to_string(),
                line: None,
                message,
                excerpt: String::new(),
            },
            exit_status,
            timed_out,
        }
    }
}

pub trait RenderAdapter: Send + Sync {
    fn name(&self) -> &str;

    /// Renders every requested view. `out_dir` is scratch space the adapter
    /// may write into; images are returned in the result either way.
    fn render(&self, request: &RenderRequest, out_dir: &Path) -> Result<RenderResult, ErrorTrace>;
}

/// Counting semaphore bounding concurrent renderer subprocesses.
#[derive(Debug)]
pub struct RenderSlots {
    capacity: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

pub struct SlotGuard<'a> {
    slots: &'a RenderSlots,
}

impl RenderSlots {
    pub const DEFAULT_CAPACITY: usize = 2;

    pub fn new(capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            capacity: capacity.max(1),
            in_use: Mutex::new(0),
            freed: Condvar::new(),
        })
    }

    /// Process-wide slots with the default capacity.
    pub fn global() -> Arc<Self> {
        static GLOBAL: OnceLock<Arc<RenderSlots>> = OnceLock::new();
        GLOBAL.get_or_init(|| RenderSlots::new(Self::DEFAULT_CAPACITY)).clone()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn in_use(&self) -> usize {
        *self.in_use.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn acquire(&self) -> SlotGuard<'_> {
        let mut n = self.in_use.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.capacity {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        SlotGuard { slots: self }
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.slots.in_use.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.slots.freed.notify_one();
    }
}
