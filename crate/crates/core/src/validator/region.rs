//! The region protocol bounding executable snippets inside agent completions.

use thiserror::Error;

pub const REGION_START: &str = "# region RENDER_SNIPPET";
pub const REGION_END: &str = "# endregion";
pub const NO_CHANGES: &str = "# NO_CHANGES";
pub const ANALYSIS_PREFIX: &str = "# ANALYSIS:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegionError {
    #[error("NO_REGION: completion has no balanced `{REGION_START}` / `{REGION_END}` pair")]
    NoRegion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub body: String,
    pub analysis: Vec<String>,
}

/// Splits `text` into lines, each slice keeping its terminator.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |line| {
        let start = offset;
        offset += line.len();
        (start, line)
    })
}

/// Returns the text between the first start marker line and the next end
/// marker line. The newline that terminates the last body line belongs to
/// the framing, so `extract_region(&wrap_region(b))` returns `b` unchanged.
pub fn extract_region(completion: &str) -> Result<Region, RegionError> {
    let mut body_start = None;
    let mut body_end = None;
    for (offset, line) in lines_with_offsets(completion) {
        let trimmed = line.trim();
        match body_start {
            None if trimmed == REGION_START => body_start = Some(offset + line.len()),
            Some(_) if trimmed == REGION_END => {
                body_end = Some(offset);
                break;
            }
            _ => {}
        }
    }
    let (start, end) = match (body_start, body_end) {
        (Some(s), Some(e)) => (s, e),
        _ => return Err(RegionError::NoRegion),
    };
    let mut body = &completion[start..end];
    if let Some(stripped) = body.strip_suffix('\n') {
        body = stripped;
    }

    let mut analysis = Vec::new();
    let mut rest = body;
    loop {
        let (line, tail) = match rest.find('\n') {
            Some(i) => (&rest[..i], &rest[i + 1..]),
            None => (rest, ""),
        };
        match line.trim_start().strip_prefix(ANALYSIS_PREFIX) {
            Some(note) if !rest.is_empty() => {
                analysis.push(note.trim().to_string());
                rest = tail;
            }
            _ => break,
        }
    }
    Ok(Region {
        body: rest.to_string(),
        analysis,
    })
}

pub fn wrap_region(body: &str) -> String {
    format!("{REGION_START}\n{body}\n{REGION_END}\n")
}

/// True iff some line is exactly the NO_CHANGES sentinel after trimming.
pub fn detect_no_changes(completion: &str) -> bool {
    completion.lines().any(|line| line.trim() == NO_CHANGES)
}

/// True if `line` would be read as a region marker.
pub fn is_marker_line(line: &str) -> bool {
    let t = line.trim();
    t == REGION_START || t == REGION_END
}
