//! Offline metrics over (render, reference) pairs: CLIP-style text and image
//! similarity and face-ID similarity, all normalized to [0, 1].

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cosine, embed, face_crop, EmbedInput, Providers, RawCosine, Score, SimilarityError};
use crate::render::View;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// A rendered image, or a render directory holding `<view>.png`.
    pub render: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_text: Option<String>,
}

impl ManifestRow {
    pub fn read_jsonl(path: &Path) -> io::Result<Vec<ManifestRow>> {
        let file = fs::File::open(path)?;
        let mut rows = Vec::new();
        for (idx, line) in io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("manifest line {}: {e}", idx + 1))
            })?;
            rows.push(row);
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetricsOptions {
    /// View used when a manifest row points at a render directory.
    pub view: View,
    pub workers: usize,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            view: View::Portrait,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub render: PathBuf,
    pub clip_text: Option<f64>,
    pub clip_image: Option<f64>,
    pub face_id: Option<f64>,
    #[serde(flatten)]
    pub status: RowStatus,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsMeans {
    pub clip_text: Option<f64>,
    pub clip_image: Option<f64>,
    pub face_id: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub means: MetricsMeans,
    pub failed: usize,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsTable {
    fn from_rows(rows: Vec<MetricsRow>) -> Self {
        let ok = || rows.iter().filter(|r| r.status == RowStatus::Ok);
        let means = MetricsMeans {
            clip_text: mean(ok().map(|r| r.clip_text)),
            clip_image: mean(ok().map(|r| r.clip_image)),
            face_id: mean(ok().map(|r| r.face_id)),
        };
        let failed = rows.iter().filter(|r| r.status != RowStatus::Ok).count();
        Self { rows, means, failed }
    }

    /// CSV with one row per pair and a trailing `mean` row.
    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["render", "clip_text", "clip_image", "face_id", "status"])?;
        for row in &self.rows {
            let status = match &row.status {
                RowStatus::Ok => "ok".to_string(),
                RowStatus::Failed(reason) => format!("failed: {reason}"),
            };
            w.write_record([
                row.render.display().to_string(),
                fmt(row.clip_text),
                fmt(row.clip_image),
                fmt(row.face_id),
                status,
            ])?;
        }
        w.write_record([
            "mean".to_string(),
            fmt(self.means.clip_text),
            fmt(self.means.clip_image),
            fmt(self.means.face_id),
            format!("failed={}", self.failed),
        ])?;
        w.flush()
    }
}

fn normalized(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    let raw = RawCosine::new(cosine(u, v)?).expect("cosine is clamped");
    Ok(Score::from_raw(raw).get())
}

type Scores = (Option<f64>, Option<f64>, Option<f64>);

fn score_row(row: &ManifestRow, base: &Path, providers: &Providers, view: View) -> MetricsRow {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut render_path = resolve(&row.render);
    if render_path.is_dir() {
        render_path = render_path.join(view.file_name());
    }
    let result = (|| -> Result<Scores, String> {
        let render = fs::read(&render_path).map_err(|e| format!("{}: {e}", render_path.display()))?;
        let reference = match &row.ref_image {
            Some(p) => {
                let p = resolve(p);
                Some(fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?)
            }
            None => None,
        };
        let mut clip_text = None;
        let mut clip_image = None;
        let mut face_id = None;
        if let Some(image_p) = &providers.image {
            let render_emb = embed(image_p.as_ref(), EmbedInput::Image(&render)).map_err(|e| e.to_string())?;
            if let Some(reference) = &reference {
                let ref_emb = embed(image_p.as_ref(), EmbedInput::Image(reference)).map_err(|e| e.to_string())?;
                clip_image = Some(normalized(&ref_emb, &render_emb).map_err(|e| e.to_string())?);
            }
            if let (Some(text), Some(text_p)) = (&row.ref_text, &providers.text) {
                let text_emb = embed(text_p.as_ref(), EmbedInput::Text(text)).map_err(|e| e.to_string())?;
                clip_text = Some(normalized(&text_emb, &render_emb).map_err(|e| e.to_string())?);
            }
        }
        if let (Some(reference), Some(face_p)) = (&reference, &providers.face) {
            let a = face_crop(face_p.as_ref(), reference);
            let b = face_crop(face_p.as_ref(), &render);
            let ua = embed(face_p.as_ref(), EmbedInput::Image(&a)).map_err(|e| e.to_string())?;
            let ub = embed(face_p.as_ref(), EmbedInput::Image(&b)).map_err(|e| e.to_string())?;
            face_id = Some(normalized(&ua, &ub).map_err(|e| e.to_string())?);
        }
        Ok((clip_text, clip_image, face_id))
    })();
    match result {
        Ok((clip_text, clip_image, face_id)) => MetricsRow {
            render: row.render.clone(),
            clip_text,
            clip_image,
            face_id,
            status: RowStatus::Ok,
        },
        Err(reason) => MetricsRow {
            render: row.render.clone(),
            clip_text: None,
            clip_image: None,
            face_id: None,
            status: RowStatus::Failed(reason),
        },
    }
}

/// Scores every manifest row. Relative paths resolve against `base`. Failed
/// rows are kept in the table but excluded from the means.
pub fn metrics_harness(rows: &[ManifestRow], base: &Path, providers: &Providers, opts: MetricsOptions) -> MetricsTable {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .expect("thread pool");
    let scored = pool.install(|| {
        rows.par_iter()
            .map(|row| score_row(row, base, providers, opts.view))
            .collect::<Vec<_>>()
    });
    MetricsTable::from_rows(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::mock_image_bytes;

    #[test]
    fn empty_manifest_gives_empty_table() {
        let t = metrics_harness(&[], Path::new("."), &Providers::mock(), MetricsOptions::default());
        assert!(t.rows.is_empty());
        assert_eq!(t.failed, 0);
        assert_eq!(t.means, MetricsMeans::default());
    }

    #[test]
    fn self_pair_scores_one_and_missing_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let png = mock_image_bytes(b"r", View::Portrait, 3, (32, 32));
        fs::write(dir.path().join("a.png"), &png).unwrap();
        let rows = vec![
            ManifestRow {
                render: "a.png".into(),
                ref_image: Some("a.png".into()),
                ref_text: None,
            },
            ManifestRow {
                render: "missing.png".into(),
                ref_image: None,
                ref_text: None,
            },
        ];
        let t = metrics_harness(&rows, dir.path(), &Providers::mock(), MetricsOptions::default());
        assert!((t.rows[0].clip_image.unwrap() - 1.0).abs() < 1e-12);
        assert!((t.rows[0].face_id.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(t.failed, 1);
        assert!((t.means.clip_image.unwrap() - 1.0).abs() < 1e-12);
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("render,clip_text,clip_image,face_id,status\n"));
        assert!(csv.contains("mean,"));
    }

    #[test]
    fn render_directory_uses_selected_view() {
        let dir = tempfile::tempdir().unwrap();
        let iter = dir.path().join("iter_1");
        fs::create_dir(&iter).unwrap();
        let full = mock_image_bytes(b"r", View::FullBody, 3, (32, 64));
        fs::write(iter.join("full_body.png"), &full).unwrap();
        fs::write(dir.path().join("ref.png"), &full).unwrap();
        let rows = vec![ManifestRow {
            render: "iter_1".into(),
            ref_image: Some("ref.png".into()),
            ref_text: None,
        }];
        let portrait = metrics_harness(&rows, dir.path(), &Providers::mock(), MetricsOptions::default());
        assert_eq!(portrait.failed, 1);
        let opts = MetricsOptions {
            view: View::FullBody,
            workers: 1,
        };
        let full_t = metrics_harness(&rows, dir.path(), &Providers::mock(), opts);
        assert_eq!(full_t.failed, 0);
    }
}
