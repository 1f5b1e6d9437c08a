use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ErrorTrace, ImageFormat, RenderAdapter, RenderRequest, RenderResult, RenderedImage, View};

const BLOCKS: u32 = 4;

/// PNG whose pixels depend only on (sha256(snippet), view, seed, size).
///
/// The image is a 4x4 grid of flat colors with a vertical shading ramp, so
/// downscaled embeddings of it are stable.
pub fn mock_image_bytes(snippet: &[u8], view: View, seed: u64, (width, height): (u32, u32)) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update(Sha256::digest(snippet));
    hasher.update(view.as_str().as_bytes());
    hasher.update(seed.to_le_bytes());
    hasher.update(width.to_le_bytes());
    hasher.update(height.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
    let palette: Vec<[u8; 3]> = (0..BLOCKS * BLOCKS).map(|_| rng.random()).collect();
    let img = image::RgbImage::from_fn(width, height, |x, y| {
        let bx = x * BLOCKS / width;
        let by = y * BLOCKS / height;
        let shade = 0.75 + 0.25 * (y as f64 / height.max(1) as f64);
        let c = palette[(by * BLOCKS + bx) as usize];
        image::Rgb(c.map(|v| (f64::from(v) * shade) as u8))
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

/// Deterministic renderer for tests and `--mock` runs. Never fails.
#[derive(Debug, Clone, Default)]
pub struct MockRenderer;

impl RenderAdapter for MockRenderer {
    fn name(&self) -> &str {
        "mock"
    }

    fn render(&self, request: &RenderRequest, _out_dir: &Path) -> Result<RenderResult, ErrorTrace> {
        request
            .validate()
            .map_err(|e| ErrorTrace::host("invalid_request", e.to_string(), None, false))?;
        let start = Instant::now();
        let images: BTreeMap<View, RenderedImage> = request
            .views
            .iter()
            .map(|&view| {
                let bytes = mock_image_bytes(request.snippet.as_bytes(), view, request.seed, request.resolution);
                (
                    view,
                    RenderedImage {
                        format: ImageFormat::Png,
                        bytes,
                    },
                )
            })
            .collect();
        Ok(RenderResult {
            log_excerpt: format!("mock render of {} view(s)", images.len()),
            images,
            duration: start.elapsed(),
        })
    }
}
