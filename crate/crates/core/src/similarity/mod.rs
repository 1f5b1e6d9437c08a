//! Visual/text encoder contract, cosine scoring and the metrics harness.

mod metrics;
mod provider;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{metrics_harness, ManifestRow, MetricsMeans, MetricsOptions, MetricsRow, MetricsTable, RowStatus};
pub use provider::{center_crop, EmbedInput, EmbeddingKind, EmbeddingProvider, HashEmbeddingProvider, HttpEmbeddingProvider};

use crate::render::{RenderResult, View};
use crate::schema::InputKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine undefined for a zero vector")]
    ZeroVector,
    #[error("vector contains non-finite values")]
    NonFinite,
    #[error("provider `{provider}` failed: {message}")]
    Provider { provider: String, message: String },
    #[error("no {0} embedding provider configured")]
    MissingProvider(EmbeddingKind),
    #[error("embedding scoring needs an original image; {0} inputs are scored by the VLM evaluator")]
    NeedsImage(InputKind),
    #[error("render is missing the `{0}` view")]
    MissingView(View),
}

/// Cosine similarity in [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(SimilarityError::NonFinite);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Raw cosine in [-1, 1]. Deliberately not comparable with [`Score`].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RawCosine(f64);

impl RawCosine {
    pub fn new(value: f64) -> Option<Self> {
        (value.is_finite() && (-1.0..=1.0).contains(&value)).then_some(Self(value))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Normalized similarity in [0, 1]; the only value the gate compares with tau.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Score(f64);

impl Score {
    pub fn new(value: f64) -> Option<Self> {
        (value.is_finite() && (0.0..=1.0).contains(&value)).then_some(Self(value))
    }

    /// The affine map (s_raw + 1) / 2.
    pub fn from_raw(raw: RawCosine) -> Self {
        Self((raw.0 + 1.0) / 2.0)
    }

    /// A percentage rating from the VLM evaluator, clamped to [0, 100].
    pub fn from_percent(percent: u32) -> Self {
        Self(f64::from(percent.min(100)) / 100.0)
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Embedding,
    Vlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubScoreKey {
    Face,
    Hair,
    ClothingColor,
    GarmentType,
}

impl SubScoreKey {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "face" => Some(Self::Face),
            "hair" | "hair_style" | "hairstyle" => Some(Self::Hair),
            "clothing_color" | "clothing_colour" => Some(Self::ClothingColor),
            "garment_type" | "garment" => Some(Self::GarmentType),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_raw: Option<RawCosine>,
    pub s: Score,
    pub mode: ScoreMode,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sub_scores: BTreeMap<SubScoreKey, Score>,
    pub source: String,
    pub iteration: u32,
}

impl SimilarityReport {
    pub fn embedding(raw: RawCosine, provider: &str, iteration: u32) -> Self {
        Self {
            s_raw: Some(raw),
            s: Score::from_raw(raw),
            mode: ScoreMode::Embedding,
            sub_scores: BTreeMap::new(),
            source: provider.to_string(),
            iteration,
        }
    }

    pub fn vlm(s: Score, backend: &str, iteration: u32) -> Self {
        Self {
            s_raw: None,
            s,
            mode: ScoreMode::Vlm,
            sub_scores: BTreeMap::new(),
            source: backend.to_string(),
            iteration,
        }
    }
}

/// The embedding providers available to a session, by kind.
#[derive(Clone, Default)]
pub struct Providers {
    pub face: Option<Arc<dyn EmbeddingProvider>>,
    pub image: Option<Arc<dyn EmbeddingProvider>>,
    pub text: Option<Arc<dyn EmbeddingProvider>>,
}

impl Providers {
    /// Deterministic hash-embedding providers for all three kinds.
    pub fn mock() -> Self {
        Self {
            face: Some(Arc::new(HashEmbeddingProvider::new(EmbeddingKind::Face))),
            image: Some(Arc::new(HashEmbeddingProvider::new(EmbeddingKind::Image))),
            text: Some(Arc::new(HashEmbeddingProvider::new(EmbeddingKind::Text))),
        }
    }

    pub fn get(&self, kind: EmbeddingKind) -> Option<&Arc<dyn EmbeddingProvider>> {
        match kind {
            EmbeddingKind::Face => self.face.as_ref(),
            EmbeddingKind::Image => self.image.as_ref(),
            EmbeddingKind::Text => self.text.as_ref(),
        }
    }
}

impl fmt::Debug for Providers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Providers")
            .field("face", &self.face.as_ref().map(|p| p.name().to_string()))
            .field("image", &self.image.as_ref().map(|p| p.name().to_string()))
            .field("text", &self.text.as_ref().map(|p| p.name().to_string()))
            .finish()
    }
}

fn embed(provider: &dyn EmbeddingProvider, input: EmbedInput<'_>) -> Result<Vec<f64>, SimilarityError> {
    provider.embed(input).map_err(|message| SimilarityError::Provider {
        provider: provider.name().to_string(),
        message,
    })
}

/// Face crop for `image`, from the provider when it can align faces and a
/// center crop otherwise.
fn face_crop(provider: &dyn EmbeddingProvider, image: &[u8]) -> Vec<u8> {
    if let Some(crop) = provider.crop_face(image) {
        return crop;
    }
    tracing::warn!(provider = provider.name(), "no face alignment available; using center crop");
    match center_crop(image) {
        Some(crop) => crop,
        None => {
            tracing::warn!(provider = provider.name(), "face crop failed; embedding the whole image");
            image.to_vec()
        }
    }
}

/// Embedding-mode similarity between the original image and the render.
///
/// Portraits compare face embeddings of the portrait view; full-body inputs
/// compare whole-image embeddings of the full-body view. Text-only and
/// multimodal sessions are scored by the VLM evaluator instead.
pub fn score_render(
    original_image: Option<&[u8]>,
    render: &RenderResult,
    input_kind: InputKind,
    providers: &Providers,
    iteration: u32,
) -> Result<SimilarityReport, SimilarityError> {
    let original = match (input_kind, original_image) {
        (InputKind::Portrait | InputKind::FullBody, Some(img)) => img,
        _ => return Err(SimilarityError::NeedsImage(input_kind)),
    };
    let (kind, view) = if input_kind == InputKind::Portrait {
        (EmbeddingKind::Face, View::Portrait)
    } else {
        (EmbeddingKind::Image, View::FullBody)
    };
    let provider = providers.get(kind).ok_or(SimilarityError::MissingProvider(kind))?;
    let rendered = render.image(view).ok_or(SimilarityError::MissingView(view))?;
    let (a, b) = if kind == EmbeddingKind::Face {
        (face_crop(provider.as_ref(), original), face_crop(provider.as_ref(), rendered))
    } else {
        (original.to_vec(), rendered.to_vec())
    };
    let u = embed(provider.as_ref(), EmbedInput::Image(&a))?;
    let v = embed(provider.as_ref(), EmbedInput::Image(&b))?;
    let raw = RawCosine::new(cosine(&u, &v)?).expect("cosine is clamped to [-1, 1]");
    Ok(SimilarityReport::embedding(raw, provider.name(), iteration))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{ImageFormat, RenderedImage};
    use proptest::prelude::*;
    use std::time::Duration;

    struct Fixed {
        vectors: std::sync::Mutex<Vec<Vec<f64>>>,
    }

    impl EmbeddingProvider for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn kind(&self) -> EmbeddingKind {
            EmbeddingKind::Image
        }
        fn dimension(&self) -> usize {
            2
        }
        fn embed(&self, _input: EmbedInput<'_>) -> Result<Vec<f64>, String> {
            Ok(self.vectors.lock().unwrap().remove(0))
        }
    }

    fn render_with(view: View, bytes: Vec<u8>) -> RenderResult {
        let mut images = BTreeMap::new();
        images.insert(
            view,
            RenderedImage {
                format: ImageFormat::Png,
                bytes,
            },
        );
        RenderResult {
            images,
            duration: Duration::ZERO,
            log_excerpt: String::new(),
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 1 / sqrt(2), computed by hand: dot = 1, norms 1 and sqrt(2).
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(SimilarityError::DimensionMismatch { left: 1, right: 2 })
        );
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), Err(SimilarityError::ZeroVector));
        assert_eq!(cosine(&[f64::NAN, 0.0], &[1.0, 2.0]), Err(SimilarityError::NonFinite));
    }

    #[test]
    fn normalization_endpoints() {
        for (raw, s) in [(-1.0, 0.0), (0.0, 0.5), (1.0, 1.0)] {
            assert_eq!(Score::from_raw(RawCosine::new(raw).unwrap()).get(), s);
        }
        assert!(RawCosine::new(1.5).is_none());
        assert!(Score::new(-0.1).is_none());
        assert_eq!(Score::from_percent(95).get(), 0.95);
    }

    #[test]
    fn identical_portrait_scores_one() {
        let img = crate::render::mock_image_bytes(b"seed", View::Portrait, 7, (64, 64));
        let render = render_with(View::Portrait, img.clone());
        let report = score_render(Some(&img), &render, InputKind::Portrait, &Providers::mock(), 1).unwrap();
        assert!((report.s.get() - 1.0).abs() < 1e-12);
        assert_eq!(report.mode, ScoreMode::Embedding);
    }

    #[test]
    fn orthogonal_vectors_score_half() {
        let providers = Providers {
            image: Some(Arc::new(Fixed {
                vectors: std::sync::Mutex::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            })),
            ..Providers::default()
        };
        let render = render_with(View::FullBody, vec![1, 2, 3]);
        let report = score_render(Some(&[9, 9]), &render, InputKind::FullBody, &providers, 2).unwrap();
        assert_eq!(report.s.get(), 0.5);
        assert_eq!(report.s_raw.unwrap().get(), 0.0);
        assert_eq!(report.iteration, 2);
    }

    #[test]
    fn text_only_needs_vlm() {
        let render = render_with(View::Portrait, vec![]);
        assert!(matches!(
            score_render(None, &render, InputKind::TextOnly, &Providers::mock(), 1),
            Err(SimilarityError::NeedsImage(InputKind::TextOnly))
        ));
    }

    #[test]
    fn mock_scoring_is_deterministic() {
        let a = crate::render::mock_image_bytes(b"a", View::FullBody, 1, (48, 96));
        let b = crate::render::mock_image_bytes(b"b", View::FullBody, 1, (48, 96));
        let render = render_with(View::FullBody, b);
        let r1 = score_render(Some(&a), &render, InputKind::FullBody, &Providers::mock(), 1).unwrap();
        let r2 = score_render(Some(&a), &render, InputKind::FullBody, &Providers::mock(), 1).unwrap();
        assert_eq!(r1, r2);
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..16).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant((u, v) in (1usize..16).prop_flat_map(|n| (
            prop::collection::vec(-100.0f64..100.0, n), prop::collection::vec(-100.0f64..100.0, n))),
            a in 0.01f64..100.0, b in 0.01f64..100.0) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let base = cosine(&u, &v).unwrap();
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((cosine(&su, &sv).unwrap() - base).abs() < 1e-9);
            prop_assert!((cosine(&v, &u).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn cosine_self_is_one(v in nonzero_vec()) {
            prop_assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn normalization_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
            let sa = Score::from_raw(RawCosine::new(a).unwrap()).get();
            let sb = Score::from_raw(RawCosine::new(b).unwrap()).get();
            prop_assert!((0.0..=1.0).contains(&sa));
            if a < b { prop_assert!(sa < sb); }
        }
    }
}
