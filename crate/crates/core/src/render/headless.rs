use std::collections::BTreeMap;
use std::fs;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{ErrorTrace, ImageFormat, RenderAdapter, RenderRequest, RenderResult, RenderSlots, RenderedImage, SceneTemplate};

const POLL: Duration = Duration::from_millis(20);
const LOG_TAIL: usize = 4096;

pub const SCENE_FILE: &str = "scene.py";
pub const TRACE_FILE: &str = "trace.json";
pub const LOG_FILE: &str = "render.log";

#[derive(Debug, Clone)]
pub struct HeadlessConfig {
    pub executable: PathBuf,
    pub template: SceneTemplate,
    pub slots: Arc<RenderSlots>,
}

impl HeadlessConfig {
    pub fn new(executable: impl Into<PathBuf>) -> Self {
        Self {
            executable: executable.into(),
            template: SceneTemplate::builtin(),
            slots: RenderSlots::global(),
        }
    }
}

/// Runs the external renderer in background mode on the composed scene.
///
/// Command line:
/// `<exe> --background --python-exit-code 1 --python <out>/scene.py --
/// out_dir=<out> views=portrait,full_body resolution=WxH seed=N`.
/// The renderer runs in its own process group so a timeout can kill it and
/// every child it spawned.
#[derive(Debug, Clone)]
pub struct HeadlessRenderer {
    config: HeadlessConfig,
}

impl HeadlessRenderer {
    pub fn new(config: HeadlessConfig) -> Self {
        Self { config }
    }

    fn args(request: &RenderRequest, out_dir: &Path, script: &Path) -> Vec<String> {
        let views: Vec<&str> = request.views.iter().map(|v| v.as_str()).collect();
        vec![
            "--background".into(),
            "--python-exit-code".into(),
            "1".into(),
            "--python".into(),
            script.display().to_string(),
            "--".into(),
            format!("out_dir={}", out_dir.display()),
            format!("views={}", views.join(",")),
            format!("resolution={}x{}", request.resolution.0, request.resolution.1),
            format!("seed={}", request.seed),
        ]
    }

    fn run(&self, request: &RenderRequest, out_dir: &Path, script: &Path) -> Result<(Option<ExitStatus>, bool), ErrorTrace> {
        let io = |e: std::io::Error| ErrorTrace::host("io", e.to_string(), None, false);
        let log = fs::File::create(out_dir.join(LOG_FILE)).map_err(io)?;
        let log_err = log.try_clone().map_err(io)?;
        let _slot = self.config.slots.acquire();
        let mut child = Command::new(&self.config.executable)
            .args(Self::args(request, out_dir, script))
            .current_dir(out_dir)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log_err)
            .process_group(0)
            .spawn()
            .map_err(|e| {
                ErrorTrace::host(
                    "renderer_unavailable",
                    format!("{}: {e}", self.config.executable.display()),
                    None,
                    false,
                )
            })?;
        let deadline = Instant::now() + request.timeout;
        loop {
            match child.try_wait().map_err(io)? {
                Some(status) => return Ok((Some(status), false)),
                None if Instant::now() >= deadline => {
                    let pgid = child.id() as libc::pid_t;
                    // SAFETY: signalling our own child's process group.
                    unsafe {
                        libc::kill(-pgid, libc::SIGKILL);
                    }
                    let _ = child.kill();
                    let _ = child.wait();
                    tracing::warn!(pgid, "renderer timed out and was killed");
                    return Ok((None, true));
                }
                None => std::thread::sleep(POLL),
            }
        }
    }
}

fn log_tail(out_dir: &Path) -> String {
    let raw = fs::read(out_dir.join(LOG_FILE)).unwrap_or_default();
    let start = raw.len().saturating_sub(LOG_TAIL);
    String::from_utf8_lossy(&raw[start..]).into_owned()
}

impl RenderAdapter for HeadlessRenderer {
    fn name(&self) -> &str {
        "headless"
    }

    fn render(&self, request: &RenderRequest, out_dir: &Path) -> Result<RenderResult, ErrorTrace> {
        request
            .validate()
            .map_err(|e| ErrorTrace::host("invalid_request", e.to_string(), None, false))?;
        let script_text = self
            .config
            .template
            .compose(&request.snippet)
            .map_err(|e| ErrorTrace::host("template_integrity", e.to_string(), None, false))?;
        let io = |e: std::io::Error| ErrorTrace::host("io", e.to_string(), None, false);
        fs::create_dir_all(out_dir).map_err(io)?;
        let out_dir = out_dir.canonicalize().map_err(io)?;
        for stale in [TRACE_FILE.to_string()]
            .into_iter()
            .chain(request.views.iter().map(|v| v.file_name()))
        {
            let _ = fs::remove_file(out_dir.join(stale));
        }
        let script = out_dir.join(SCENE_FILE);
        fs::write(&script, script_text).map_err(io)?;

        let start = Instant::now();
        let (status, timed_out) = self.run(request, &out_dir, &script)?;
        let duration = start.elapsed();
        let tail = log_tail(&out_dir);
        let code = status.and_then(|s| s.code());
        if timed_out {
            return Err(ErrorTrace::host(
                "timeout",
                format!("renderer exceeded {:?} and was killed", request.timeout),
                None,
                true,
            ));
        }
        if let Ok(trace) = fs::read_to_string(out_dir.join(TRACE_FILE)) {
            return Err(ErrorTrace::from_raw(trace, code, false));
        }
        if !status.is_some_and(|s| s.success()) {
            return Err(ErrorTrace::from_raw(tail, code, false));
        }
        let mut images = BTreeMap::new();
        for &view in &request.views {
            let path = out_dir.join(view.file_name());
            let bytes = fs::read(&path).map_err(|e| {
                ErrorTrace::host("missing_output", format!("{}: {e}", path.display()), code, false)
            })?;
            images.insert(
                view,
                RenderedImage {
                    format: ImageFormat::Png,
                    bytes,
                },
            );
        }
        Ok(RenderResult {
            images,
            duration,
            log_excerpt: tail,
        })
    }
}
