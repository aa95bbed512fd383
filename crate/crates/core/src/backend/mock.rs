//! Deterministic stand-ins for the model backends.
//!
//! Each mock is a pure function of its request, seed included, so a whole
//! pipeline run driven by mocks is reproducible byte for byte.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;

use super::{Embedder, InpaintRequest, InpaintResponse, Inpainter, SegmentRequest, SegmentResponse, Segmenter};
use crate::error::{Error, Result};
use crate::imaging::{BitMask, RasterImage};

/// Pastes the reference, scaled to the mask's bounding box, wherever the
/// mask is set. Stamped pixels get a seed-dependent tint of up to `jitter`
/// levels per channel so different seeds give different variations.
#[derive(Debug, Clone)]
pub struct StampInpainter {
    pub jitter: u8,
}

impl Default for StampInpainter {
    fn default() -> Self {
        StampInpainter { jitter: 24 }
    }
}

impl StampInpainter {
    pub fn render(&self, req: &InpaintRequest) -> Result<RasterImage> {
        let mut out = req.base_crop.clone();
        let Some(bbox) = req.mask.bbox() else {
            return Ok(out);
        };
        let stamp = req.reference.resize_nearest(bbox.w, bbox.h)?;
        let span = self.jitter as u64 + 1;
        let tint = [
            (req.seed % span) as u8,
            ((req.seed >> 16) % span) as u8,
            ((req.seed >> 32) % span) as u8,
        ];
        for y in 0..bbox.h {
            for x in 0..bbox.w {
                if req.mask.get(bbox.x + x, bbox.y + y) {
                    let p = stamp.pixel(x, y);
                    let tinted = [
                        p[0].saturating_add(tint[0]),
                        p[1].saturating_add(tint[1]),
                        p[2].saturating_add(tint[2]),
                    ];
                    out.set_pixel(bbox.x + x, bbox.y + y, tinted);
                }
            }
        }
        Ok(out)
    }
}

#[async_trait]
impl Inpainter for StampInpainter {
    async fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintResponse> {
        Ok(InpaintResponse {
            image: self.render(req)?,
            backend_id: "mock-stamp".into(),
            latency: Duration::ZERO,
        })
    }
}

/// 64-bin RGB histogram (4 levels per channel), L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HistogramEmbedder;

impl HistogramEmbedder {
    pub const DIM: usize = 64;

    pub fn histogram(image: &RasterImage) -> Vec<f64> {
        let mut bins = vec![0.0; Self::DIM];
        for px in image.as_bytes().chunks_exact(3) {
            let bin = ((px[0] >> 6) as usize) << 4 | ((px[1] >> 6) as usize) << 2 | (px[2] >> 6) as usize;
            bins[bin] += 1.0;
        }
        let norm = bins.iter().map(|v| v * v).sum::<f64>().sqrt();
        bins.iter_mut().for_each(|v| *v /= norm);
        bins
    }
}

#[async_trait]
impl Embedder for HistogramEmbedder {
    async fn embed(&self, image: &RasterImage) -> Result<Vec<f64>> {
        Ok(Self::histogram(image))
    }
}

/// Selects pixels inside the prompt box whose luma differs from the median
/// luma of the box border by more than `threshold`. Confidence is the
/// selected fraction of the box.
#[derive(Debug, Clone)]
pub struct LuminanceSegmenter {
    pub threshold: u8,
}

impl Default for LuminanceSegmenter {
    fn default() -> Self {
        LuminanceSegmenter { threshold: 32 }
    }
}

impl LuminanceSegmenter {
    pub fn run(&self, req: &SegmentRequest) -> Result<SegmentResponse> {
        let (w, h) = req.image.dimensions();
        let b = req.prompt_box;
        if !b.fits(w, h) {
            return Err(Error::OutOfBounds {
                rect: b,
                width: w,
                height: h,
            });
        }
        let mut border = Vec::new();
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                if x == b.x || y == b.y || x == b.x + b.w - 1 || y == b.y + b.h - 1 {
                    border.push(req.image.luminance(x, y));
                }
            }
        }
        border.sort_unstable();
        let median = border[border.len() / 2] as i32;
        let mask = BitMask::from_fn(w, h, |x, y| {
            b.contains_point(x, y) && (req.image.luminance(x, y) as i32 - median).abs() > self.threshold as i32
        })?;
        let confidence = mask.count_ones() as f64 / b.area() as f64;
        Ok(SegmentResponse { mask, confidence })
    }
}

#[async_trait]
impl Segmenter for LuminanceSegmenter {
    async fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse> {
        self.run(req)
    }
}

/// Embedder driven by a closure, for rigging similarity scores in tests.
pub struct FnEmbedder<F>(pub F);

#[async_trait]
impl<F> Embedder for FnEmbedder<F>
where
    F: Fn(&RasterImage) -> Vec<f64> + Send + Sync,
{
    async fn embed(&self, image: &RasterImage) -> Result<Vec<f64>> {
        Ok((self.0)(image))
    }
}

/// Segmenter driven by a closure.
pub struct FnSegmenter<F>(pub F);

#[async_trait]
impl<F> Segmenter for FnSegmenter<F>
where
    F: Fn(&SegmentRequest) -> BitMask + Send + Sync,
{
    async fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse> {
        Ok(SegmentResponse {
            mask: (self.0)(req),
            confidence: 1.0,
        })
    }
}

/// Embedder that places every reference on one axis and every other image
/// on an orthogonal one, so all candidate similarities are exactly 0.
pub fn orthogonal_embedder(
    references: Vec<RasterImage>,
) -> FnEmbedder<impl Fn(&RasterImage) -> Vec<f64> + Send + Sync> {
    FnEmbedder(move |img: &RasterImage| {
        if references.contains(img) {
            vec![1.0, 0.0]
        } else {
            vec![0.0, 1.0]
        }
    })
}

/// Wraps a backend and records call counts and peak concurrency.
pub struct Counting<T> {
    inner: T,
    delay: Duration,
    stats: Arc<CallStats>,
}

#[derive(Debug, Default)]
pub struct CallStats {
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl CallStats {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl<T> Counting<T> {
    pub fn new(inner: T) -> Self {
        Counting {
            inner,
            delay: Duration::ZERO,
            stats: Arc::default(),
        }
    }

    /// Hold each call open for `delay` so overlapping calls are observable.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn stats(&self) -> Arc<CallStats> {
        Arc::clone(&self.stats)
    }

    async fn track<R>(&self, fut: impl std::future::Future<Output = R>) -> R {
        self.stats.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.stats.peak.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        let out = fut.await;
        self.stats.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

#[async_trait]
impl<T: Inpainter> Inpainter for Counting<T> {
    async fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintResponse> {
        self.track(self.inner.inpaint(req)).await
    }
}

#[async_trait]
impl<T: Embedder> Embedder for Counting<T> {
    async fn embed(&self, image: &RasterImage) -> Result<Vec<f64>> {
        self.track(self.inner.embed(image)).await
    }
}

#[async_trait]
impl<T: Segmenter> Segmenter for Counting<T> {
    async fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse> {
        self.track(self.inner.segment(req)).await
    }
}
