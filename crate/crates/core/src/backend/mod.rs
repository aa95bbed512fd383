//! Model backends: inpainting, embedding and promptable segmentation.
//!
//! The pipeline talks to each backend through a trait so that the HTTP
//! client in [`http`] and the deterministic mocks in [`mock`] are
//! interchangeable.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::error::{BackendKind, Error, Result};
use crate::imaging::{BitMask, RasterImage, Rect};

pub mod http;
pub mod mock;
pub mod wire;

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRequest {
    pub base_crop: RasterImage,
    pub mask: BitMask,
    pub reference: RasterImage,
    pub seed: u64,
}

impl InpaintRequest {
    pub fn new(base_crop: RasterImage, mask: BitMask, reference: RasterImage, seed: u64) -> Result<Self> {
        if base_crop.dimensions() != mask.dimensions() {
            return Err(Error::Geometry(format!(
                "inpaint mask {}x{} does not match crop {}x{}",
                mask.width(),
                mask.height(),
                base_crop.width(),
                base_crop.height()
            )));
        }
        Ok(InpaintRequest {
            base_crop,
            mask,
            reference,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintResponse {
    pub image: RasterImage,
    pub backend_id: String,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRequest {
    pub image: RasterImage,
    pub prompt_box: Rect,
    pub hint_mask: Option<BitMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentResponse {
    pub mask: BitMask,
    pub confidence: f64,
}

#[async_trait]
pub trait Inpainter: Send + Sync {
    async fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintResponse>;
}

#[async_trait]
pub trait Embedder: Send + Sync {
    async fn embed(&self, image: &RasterImage) -> Result<Vec<f64>>;
}

#[async_trait]
pub trait Segmenter: Send + Sync {
    async fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse>;
}

/// The three backends a generation run needs.
#[derive(Clone)]
pub struct Backends {
    pub inpainter: Arc<dyn Inpainter>,
    pub embedder: Arc<dyn Embedder>,
    pub segmenter: Arc<dyn Segmenter>,
}

impl Backends {
    pub fn new(inpainter: Arc<dyn Inpainter>, embedder: Arc<dyn Embedder>, segmenter: Arc<dyn Segmenter>) -> Self {
        Backends {
            inpainter,
            embedder,
            segmenter,
        }
    }

    /// Stamp inpainter, histogram embedder and luminance segmenter.
    pub fn mock() -> Self {
        Backends::new(
            Arc::new(mock::StampInpainter::default()),
            Arc::new(mock::HistogramEmbedder),
            Arc::new(mock::LuminanceSegmenter::default()),
        )
    }

    /// HTTP clients for all three kinds, one connection budget each.
    pub fn http(inpaint: BackendConfig, embed: BackendConfig, segment: BackendConfig) -> Result<Self> {
        Ok(Backends::new(
            Arc::new(http::HttpBackend::new(BackendKind::Inpaint, inpaint)?),
            Arc::new(http::HttpBackend::new(BackendKind::Embed, embed)?),
            Arc::new(http::HttpBackend::new(BackendKind::Segment, segment)?),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Sent as `Authorization: Bearer <token>` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token: Option<String>,
}

fn default_timeout_ms() -> u64 {
    120_000
}

fn default_max_retries() -> u32 {
    2
}

fn default_max_in_flight() -> usize {
    4
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        BackendConfig {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            max_in_flight: default_max_in_flight(),
            bearer_token: None,
        }
    }

    /// Apply the `INPAINT_URL` / `EMBED_URL` / `SEGMENT_URL` override for
    /// `kind`, if set.
    pub fn with_env_override(mut self, kind: BackendKind) -> Self {
        if let Ok(url) = std::env::var(kind.env_var()) {
            if !url.is_empty() {
                self.endpoint = url;
            }
        }
        self
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config("backend timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(Error::Config(format!(
                "backend endpoint must be an http(s) URL, got {:?}",
                self.endpoint
            )));
        }
        Ok(())
    }
}

/// Cosine similarity of two equal-length, nonzero vectors, clamped to
/// [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Protocol {
            backend: BackendKind::Embed,
            message: format!("embedding dimensions differ: {} vs {}", u.len(), v.len()),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::Numeric(
            "cosine similarity of a zero or non-finite vector".into(),
        ));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 4.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-6);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::Protocol { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::new("http://localhost:9000").validate().is_ok());
        let mut c = BackendConfig::new("http://localhost:9000");
        c.max_in_flight = 0;
        assert!(c.validate().is_err());
        c.max_in_flight = 1;
        c.timeout_ms = 0;
        assert!(c.validate().is_err());
        assert!(BackendConfig::new("localhost").validate().is_err());
    }

    #[test]
    fn inpaint_request_checks_mask_size() {
        let img = RasterImage::filled(4, 4, [0; 3]).unwrap();
        let mask = BitMask::empty(4, 3).unwrap();
        assert!(InpaintRequest::new(img.clone(), mask, img, 0).is_err());
    }

    proptest! {
        #[test]
        fn cosine_in_range(u in proptest::collection::vec(-10.0f64..10.0, 1..16), seed in any::<u64>()) {
            let v: Vec<f64> = u.iter().enumerate().map(|(i, x)| x * ((seed >> (i % 60)) & 7) as f64 - 1.0).collect();
            if let Ok(c) = cosine(&u, &v) {
                prop_assert!((-1.0..=1.0).contains(&c));
                prop_assert!((c - cosine(&v, &u).unwrap()).abs() < 1e-12);
            }
        }
    }
}
