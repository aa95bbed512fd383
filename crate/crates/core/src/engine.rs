//! Per-region variation generation, similarity filtering and mask
//! refinement.

use std::sync::atomic::{AtomicUsize, Ordering};

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};

use crate::backend::{cosine, Backends, InpaintRequest, SegmentRequest, Segmenter};
use crate::error::{Error, Result};
use crate::imaging::{dilate, BitMask, RasterImage, RunSeed};
use crate::regions::RegionSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Variations kept per region.
    pub variations_per_region: usize,
    /// Minimum cosine similarity between generated object and reference.
    pub similarity_threshold: f64,
    /// Inpainting calls allowed per variation before keeping the best.
    pub max_attempts: usize,
    /// Refined masks may extend this far past the placement mask.
    pub dilation_radius: u32,
    /// Refined masks smaller than this fraction of the placement area are
    /// replaced by the placement mask.
    pub min_refined_fraction: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            variations_per_region: 4,
            similarity_threshold: 0.75,
            max_attempts: 5,
            dilation_radius: 5,
            min_refined_fraction: 0.2,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variations_per_region == 0 {
            return Err(Error::Config("variations_per_region must be at least 1".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.similarity_threshold) {
            return Err(Error::Config(format!(
                "similarity_threshold {} outside [-1, 1]",
                self.similarity_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.min_refined_fraction) {
            return Err(Error::Config(format!(
                "min_refined_fraction {} outside [0, 1]",
                self.min_refined_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationFlag {
    /// No attempt reached the threshold; the best-scoring one was kept.
    BelowThreshold,
    /// Segmentation came back too small; the placement mask was used.
    MaskFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variation {
    pub region_index: usize,
    pub variation_index: usize,
    /// Generated crop, same size as the region window.
    pub image: RasterImage,
    /// Crop-local object mask.
    pub refined_mask: BitMask,
    pub similarity: f64,
    /// Reference the first attempt was conditioned on.
    pub reference_index: usize,
    /// Reference the kept candidate was conditioned on.
    pub kept_reference_index: usize,
    pub attempts_used: usize,
    pub flags: Vec<VariationFlag>,
}

impl Variation {
    pub fn has_flag(&self, flag: VariationFlag) -> bool {
        self.flags.contains(&flag)
    }
}

/// Reference used on `attempt` of variation `variation` with `k` references.
pub fn reference_for(variation: usize, attempt: usize, k: usize) -> usize {
    (variation + attempt) % k
}

fn wrap(region: usize, variation: usize, attempt: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Generation {
        region,
        variation,
        attempt,
        source: Box::new(e),
    }
}

/// Produce the `variations_per_region` variations for one region.
///
/// Every attempt inpaints with a freshly derived seed and the next
/// reference in round-robin order; the first candidate whose object area
/// scores at least the threshold is kept, otherwise the best one is kept
/// and flagged. The kept candidate's mask is then refined.
pub async fn generate_region_variations(
    region: &RegionSpec,
    base: &RasterImage,
    references: &[RasterImage],
    cfg: &GenerationConfig,
    backends: &Backends,
    seed: RunSeed,
) -> Result<Vec<Variation>> {
    generate_with_progress(region, base, references, cfg, backends, seed, &|| {}).await
}

async fn generate_with_progress(
    region: &RegionSpec,
    base: &RasterImage,
    references: &[RasterImage],
    cfg: &GenerationConfig,
    backends: &Backends,
    seed: RunSeed,
    on_variation: &(dyn Fn() + Send + Sync),
) -> Result<Vec<Variation>> {
    if references.is_empty() {
        return Err(Error::Config("at least one reference image is required".into()));
    }
    cfg.validate()?;
    let base_crop = base.crop(&region.rect)?;
    let ref_vectors = try_join_all(references.iter().map(|r| backends.embedder.embed(r))).await?;

    let tasks = (0..cfg.variations_per_region).map(|l| {
        let base_crop = &base_crop;
        let ref_vectors = &ref_vectors;
        async move {
            let v = generate_one(region, base_crop, references, ref_vectors, cfg, backends, seed, l).await?;
            on_variation();
            Ok::<_, Error>(v)
        }
    });
    try_join_all(tasks).await
}

#[allow(clippy::too_many_arguments)]
async fn generate_one(
    region: &RegionSpec,
    base_crop: &RasterImage,
    references: &[RasterImage],
    ref_vectors: &[Vec<f64>],
    cfg: &GenerationConfig,
    backends: &Backends,
    seed: RunSeed,
    l: usize,
) -> Result<Variation> {
    let n = region.index;
    let k = references.len();
    let object_box = region.object_box();
    // (candidate, similarity, reference, attempt)
    let mut best: Option<(RasterImage, f64, usize, usize)> = None;
    let mut attempts_used = 0;
    for a in 0..cfg.max_attempts {
        let r = reference_for(l, a, k);
        let req = InpaintRequest::new(
            base_crop.clone(),
            region.region_mask.clone(),
            references[r].clone(),
            seed.derive(n, l, a),
        )
        .map_err(wrap(n, l, a))?;
        attempts_used += 1;
        let resp = backends.inpainter.inpaint(&req).await.map_err(wrap(n, l, a))?;
        if resp.image.dimensions() != base_crop.dimensions() {
            return Err(wrap(n, l, a)(Error::Protocol {
                backend: crate::BackendKind::Inpaint,
                message: format!(
                    "candidate is {}x{}, region is {}x{}",
                    resp.image.width(),
                    resp.image.height(),
                    base_crop.width(),
                    base_crop.height()
                ),
            }));
        }
        let object = resp.image.crop(&object_box).map_err(wrap(n, l, a))?;
        let vector = backends.embedder.embed(&object).await.map_err(wrap(n, l, a))?;
        let similarity = cosine(&vector, &ref_vectors[r]).map_err(wrap(n, l, a))?;
        let accepted = similarity >= cfg.similarity_threshold;
        if best.as_ref().is_none_or(|b| similarity > b.1) || accepted {
            best = Some((resp.image, similarity, r, a));
        }
        if accepted {
            break;
        }
    }
    let (image, similarity, kept_ref, kept_attempt) = best.expect("max_attempts >= 1");
    let mut flags = Vec::new();
    if similarity < cfg.similarity_threshold {
        flags.push(VariationFlag::BelowThreshold);
    }
    let (refined_mask, refine_flags) = refine_mask(&image, region, cfg, backends.segmenter.as_ref())
        .await
        .map_err(wrap(n, l, kept_attempt))?;
    flags.extend(refine_flags);
    flags.sort();
    Ok(Variation {
        region_index: n,
        variation_index: l,
        image,
        refined_mask,
        similarity,
        reference_index: reference_for(l, 0, k),
        kept_reference_index: kept_ref,
        attempts_used,
        flags,
    })
}

/// Generate variations for every region, concurrently. `on_progress` is
/// called with the running count of finished variations. Output is ordered
/// by region, then variation, regardless of completion order.
pub async fn generate_all(
    regions: &[RegionSpec],
    base: &RasterImage,
    references: &[RasterImage],
    cfg: &GenerationConfig,
    backends: &Backends,
    seed: RunSeed,
    on_progress: &(dyn Fn(usize) + Send + Sync),
) -> Result<Vec<Vec<Variation>>> {
    let done = AtomicUsize::new(0);
    let tick = || on_progress(done.fetch_add(1, Ordering::SeqCst) + 1);
    try_join_all(
        regions
            .iter()
            .map(|r| generate_with_progress(r, base, references, cfg, backends, seed, &tick)),
    )
    .await
}

/// Segment the candidate inside the placement box and clip the result to
/// the dilated placement mask. Falls back to the placement mask when too
/// little survives.
pub async fn refine_mask(
    candidate: &RasterImage,
    region: &RegionSpec,
    cfg: &GenerationConfig,
    segmenter: &dyn Segmenter,
) -> Result<(BitMask, Vec<VariationFlag>)> {
    let placement = &region.region_mask;
    if candidate.dimensions() != placement.dimensions() {
        return Err(Error::Geometry(format!(
            "candidate {}x{} does not match region window {}x{}",
            candidate.width(),
            candidate.height(),
            placement.width(),
            placement.height()
        )));
    }
    let resp = segmenter
        .segment(&SegmentRequest {
            image: candidate.clone(),
            prompt_box: region.object_box(),
            hint_mask: Some(placement.clone()),
        })
        .await?;
    if resp.mask.dimensions() != candidate.dimensions() {
        return Err(Error::Protocol {
            backend: crate::BackendKind::Segment,
            message: "segmentation mask does not match the candidate size".into(),
        });
    }
    let refined = resp.mask.intersection(&dilate(placement, cfg.dilation_radius))?;
    let floor = cfg.min_refined_fraction * placement.count_ones() as f64;
    if (refined.count_ones() as f64) < floor {
        Ok((placement.clone(), vec![VariationFlag::MaskFallback]))
    } else {
        Ok((refined, Vec::new()))
    }
}

/// Paste `candidate` into `base` over the region window, taking candidate
/// pixels only where the placement mask is set.
pub fn composite_region(base: &RasterImage, region: &RegionSpec, candidate: &RasterImage) -> Result<RasterImage> {
    if candidate.dimensions() != (region.rect.w, region.rect.h) {
        return Err(Error::Geometry(format!(
            "candidate {}x{} does not match region window {}",
            candidate.width(),
            candidate.height(),
            region.rect
        )));
    }
    let mut out = base.clone();
    out.paste_masked(candidate, &region.region_mask, region.rect.x, region.rect.y)?;
    Ok(out)
}
