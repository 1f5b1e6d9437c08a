use std::fmt;
use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Face,
    Image,
    Text,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Face => "face",
            EmbeddingKind::Image => "image",
            EmbeddingKind::Text => "text",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum EmbedInput<'a> {
    Image(&'a [u8]),
    Text(&'a str),
}

/// An encoder mapping images or text into a fixed-dimension vector space.
///
/// Implementations must tolerate concurrent `embed` calls.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> EmbeddingKind;
    fn dimension(&self) -> usize;
    fn embed(&self, input: EmbedInput<'_>) -> Result<Vec<f64>, String>;

    /// Aligned face crop, for providers that can detect faces.
    fn crop_face(&self, _image: &[u8]) -> Option<Vec<u8>> {
        None
    }
}

/// Center square covering half of the shorter side, re-encoded as PNG.
pub fn center_crop(image: &[u8]) -> Option<Vec<u8>> {
    let img = image::load_from_memory(image).ok()?;
    let side = img.width().min(img.height()) / 2;
    if side == 0 {
        return None;
    }
    let x = (img.width() - side) / 2;
    let y = (img.height() - side) / 2;
    let crop = img.crop_imm(x, y, side, side);
    let mut out = Cursor::new(Vec::new());
    crop.write_to(&mut out, image::ImageFormat::Png).ok()?;
    Some(out.into_inner())
}

const GRID: u32 = 8;
const HASH_DIM: usize = (GRID * GRID * 3) as usize;

fn bucket(token: &[u8], dim: usize) -> usize {
    let digest = Sha256::digest(token);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(head) % dim as u64) as usize
}

/// Deterministic stand-in encoder. Images are embedded as an 8x8 grid of
/// mean RGB values (a raw-pixel embedding, so identical images map to
/// identical vectors); undecodable bytes and text are hashed into buckets.
#[derive(Debug, Clone)]
pub struct HashEmbeddingProvider {
    kind: EmbeddingKind,
    name: String,
}

impl HashEmbeddingProvider {
    pub fn new(kind: EmbeddingKind) -> Self {
        Self {
            kind,
            name: format!("hash-embedding/{kind}"),
        }
    }

    fn embed_pixels(image: &[u8]) -> Option<Vec<f64>> {
        let img = image::load_from_memory(image).ok()?;
        let small = img.resize_exact(GRID, GRID, image::imageops::FilterType::Triangle).to_rgb8();
        Some(
            small
                .pixels()
                .flat_map(|p| p.0)
                .map(|c| f64::from(c) / 255.0 + 1e-3)
                .collect(),
        )
    }

    fn embed_bytes(bytes: &[u8]) -> Vec<f64> {
        let mut v = vec![0.0; HASH_DIM];
        for chunk in bytes.chunks(16) {
            v[bucket(chunk, HASH_DIM)] += 1.0;
        }
        v[bucket(b"__bias__", HASH_DIM)] += 1e-3;
        v
    }

    fn embed_text(text: &str) -> Vec<f64> {
        let mut v = vec![0.0; HASH_DIM];
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            v[bucket(word.to_lowercase().as_bytes(), HASH_DIM)] += 1.0;
        }
        v[bucket(b"__bias__", HASH_DIM)] += 1e-3;
        v
    }
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    fn dimension(&self) -> usize {
        HASH_DIM
    }

    fn embed(&self, input: EmbedInput<'_>) -> Result<Vec<f64>, String> {
        Ok(match input {
            EmbedInput::Image(bytes) => Self::embed_pixels(bytes).unwrap_or_else(|| Self::embed_bytes(bytes)),
            EmbedInput::Text(text) => Self::embed_text(text),
        })
    }

    fn crop_face(&self, image: &[u8]) -> Option<Vec<u8>> {
        (self.kind == EmbeddingKind::Face).then(|| center_crop(image)).flatten()
    }
}

/// Remote embedding endpoint speaking the common `/embeddings` JSON shape:
/// request `{"model", "input"}` with images sent as data URLs, response
/// `{"data": [{"embedding": [...]}]}`.
pub struct HttpEmbeddingProvider {
    name: String,
    kind: EmbeddingKind,
    dimension: usize,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpEmbeddingProvider {
    pub fn new(
        kind: EmbeddingKind,
        base_url: &str,
        model: &str,
        dimension: usize,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            name: format!("http/{model}"),
            kind,
            dimension,
            endpoint: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
            client,
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, input: EmbedInput<'_>) -> Result<Vec<f64>, String> {
        let payload = match input {
            EmbedInput::Text(t) => t.to_string(),
            EmbedInput::Image(bytes) => format!(
                "data:image/png;base64,{}",
                base64::engine::general_purpose::STANDARD.encode(bytes)
            ),
        };
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "model": self.model, "input": payload }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}: {}", resp.text().unwrap_or_default()));
        }
        let body: EmbeddingResponse = resp.json().map_err(|e| e.to_string())?;
        let vector = body
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| "response has no embedding".to_string())?;
        if vector.len() != self.dimension {
            return Err(format!("expected dimension {}, got {}", self.dimension, vector.len()));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err("embedding contains non-finite values".into());
        }
        Ok(vector)
    }
}
