//! One generation run over a single base image, and its on-disk form.

use std::path::Path;

use augment_core::backend::Backends;
use augment_core::combine::{
    count_combinations, enumerate_keys, realize, sample_keys_where, AugmentedSample, CombinationKey,
};
use augment_core::dataset::GeneratedSample;
use augment_core::engine::{composite_region, generate_all, GenerationConfig, Variation, VariationFlag};
use augment_core::{extract_regions, BitMask, CoverageBand, Error, RasterImage, Rect, RegionSpec, Result, RunSeed};
use serde::{Deserialize, Serialize};

pub const PREVIEW_MAX_EDGE: u32 = 512;

/// Regions that take part in generation, renumbered from zero so that key
/// bit `n` is the `n`-th of them. Infeasible regions are skipped unless
/// `include_infeasible` is set.
pub fn generation_regions(all: &[RegionSpec], include_infeasible: bool) -> Vec<RegionSpec> {
    all.iter()
        .filter(|r| include_infeasible || r.feasible)
        .enumerate()
        .map(|(i, r)| RegionSpec { index: i, ..r.clone() })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseRun {
    pub base_id: String,
    pub seed: u64,
    pub base: RasterImage,
    pub regions: Vec<RegionSpec>,
    pub variations: Vec<Vec<Variation>>,
}

/// Extract regions from `placement`, then generate variations for each.
#[allow(clippy::too_many_arguments)]
pub async fn run_base(
    base_id: &str,
    base: &RasterImage,
    placement: &BitMask,
    references: &[RasterImage],
    cfg: &GenerationConfig,
    band: CoverageBand,
    backends: &Backends,
    seed: u64,
    include_infeasible: bool,
    on_progress: &(dyn Fn(usize) + Send + Sync),
) -> Result<BaseRun> {
    let all = extract_regions(base, placement, band)?;
    let regions = generation_regions(&all, include_infeasible);
    let skipped = all.len() - regions.len();
    if skipped > 0 {
        log::warn!("{base_id}: skipping {skipped} infeasible region(s)");
    }
    let variations = generate_all(
        &regions,
        base,
        references,
        cfg,
        backends,
        RunSeed::new(seed),
        on_progress,
    )
    .await?;
    Ok(BaseRun {
        base_id: base_id.to_string(),
        seed,
        base: base.clone(),
        regions,
        variations,
    })
}

impl BaseRun {
    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn variations_per_region(&self) -> usize {
        self.variations.first().map_or(0, Vec::len)
    }

    pub fn combination_count(&self) -> Result<u64> {
        if self.regions.is_empty() {
            return Ok(0);
        }
        count_combinations(self.region_count(), self.variations_per_region())
    }

    pub fn all_keys(&self) -> Result<Vec<CombinationKey>> {
        if self.regions.is_empty() {
            return Ok(Vec::new());
        }
        Ok(enumerate_keys(self.region_count(), self.variations_per_region())?.collect())
    }

    /// Up to `count` distinct keys not rejected by `allowed`.
    pub fn sample_keys(
        &self,
        count: usize,
        seed: u64,
        allowed: impl Fn(&CombinationKey) -> bool,
    ) -> Result<Vec<CombinationKey>> {
        if self.regions.is_empty() {
            return Ok(Vec::new());
        }
        sample_keys_where(self.region_count(), self.variations_per_region(), count, seed, allowed)
    }

    pub fn realize(&self, key: &CombinationKey) -> Result<AugmentedSample> {
        realize(&self.base, &self.regions, &self.variations, key)
    }

    pub fn generated(&self, key: &CombinationKey) -> Result<GeneratedSample> {
        Ok(GeneratedSample {
            base_id: self.base_id.clone(),
            seed: self.seed,
            region_count: self.region_count(),
            sample: self.realize(key)?,
        })
    }

    pub fn variation(&self, region: usize, variation: usize) -> Result<&Variation> {
        self.variations
            .get(region)
            .and_then(|v| v.get(variation))
            .ok_or_else(|| Error::Validation(format!("no variation {variation} for region {region}")))
    }

    /// The base with one variation composited in, shrunk to fit a
    /// `PREVIEW_MAX_EDGE` square.
    pub fn preview(&self, region: usize, variation: usize) -> Result<RasterImage> {
        let v = self.variation(region, variation)?;
        let full = composite_region(&self.base, &self.regions[region], &v.image)?;
        downscale(&full, PREVIEW_MAX_EDGE)
    }
}

/// Nearest-neighbour shrink so that neither side exceeds `max_edge`.
pub fn downscale(image: &RasterImage, max_edge: u32) -> Result<RasterImage> {
    let (w, h) = image.dimensions();
    let longest = w.max(h);
    if longest <= max_edge {
        return Ok(image.clone());
    }
    let scale = |v: u32| ((v as u64 * max_edge as u64 / longest as u64) as u32).max(1);
    image.resize_nearest(scale(w), scale(h))
}

pub const RUN_FILE: &str = "run.json";
const RUN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RegionRecord {
    rect: Rect,
    coverage: f64,
    feasible: bool,
    mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VariationRecord {
    image: String,
    mask: String,
    similarity: f64,
    reference_index: usize,
    kept_reference_index: usize,
    attempts_used: usize,
    #[serde(default)]
    flags: Vec<VariationFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BaseRunRecord {
    base_id: String,
    seed: u64,
    image: String,
    regions: Vec<RegionRecord>,
    variations: Vec<Vec<VariationRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunFile {
    version: u32,
    generation: GenerationConfig,
    bases: Vec<BaseRunRecord>,
}

/// Write runs under `dir/runs/<base_id>/` and index them in `dir/run.json`.
pub fn save_runs(dir: &Path, generation: &GenerationConfig, runs: &[BaseRun]) -> Result<()> {
    let mut bases = Vec::new();
    for run in runs {
        let sub = format!("runs/{}", run.base_id);
        let abs = dir.join(&sub);
        std::fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
        let image = format!("{sub}/base.png");
        run.base.save(&dir.join(&image))?;
        let mut regions = Vec::new();
        for r in &run.regions {
            let mask = format!("{sub}/region_{}.png", r.index);
            r.region_mask.save(&dir.join(&mask))?;
            regions.push(RegionRecord {
                rect: r.rect,
                coverage: r.coverage,
                feasible: r.feasible,
                mask,
            });
        }
        let mut variations = Vec::new();
        for per_region in &run.variations {
            let mut row = Vec::new();
            for v in per_region {
                let stem = format!("{sub}/r{}_v{}", v.region_index, v.variation_index);
                let (image, mask) = (format!("{stem}.png"), format!("{stem}_mask.png"));
                v.image.save(&dir.join(&image))?;
                v.refined_mask.save(&dir.join(&mask))?;
                row.push(VariationRecord {
                    image,
                    mask,
                    similarity: v.similarity,
                    reference_index: v.reference_index,
                    kept_reference_index: v.kept_reference_index,
                    attempts_used: v.attempts_used,
                    flags: v.flags.clone(),
                });
            }
            variations.push(row);
        }
        bases.push(BaseRunRecord {
            base_id: run.base_id.clone(),
            seed: run.seed,
            image,
            regions,
            variations,
        });
    }
    let file = RunFile {
        version: RUN_VERSION,
        generation: generation.clone(),
        bases,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    let path = dir.join(RUN_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_runs(dir: &Path) -> Result<(GenerationConfig, Vec<BaseRun>)> {
    let path = dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: RunFile = serde_json::from_str(&text)?;
    if file.version != RUN_VERSION {
        return Err(Error::SchemaVersion {
            found: file.version,
            expected: RUN_VERSION,
        });
    }
    let mut runs = Vec::new();
    for b in file.bases {
        let base = RasterImage::load(&dir.join(&b.image))?;
        let regions = b
            .regions
            .iter()
            .enumerate()
            .map(|(index, r)| {
                Ok(RegionSpec {
                    index,
                    rect: r.rect,
                    region_mask: BitMask::load(&dir.join(&r.mask))?,
                    coverage: r.coverage,
                    feasible: r.feasible,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let variations = b
            .variations
            .iter()
            .enumerate()
            .map(|(n, row)| {
                row.iter()
                    .enumerate()
                    .map(|(l, v)| {
                        Ok(Variation {
                            region_index: n,
                            variation_index: l,
                            image: RasterImage::load(&dir.join(&v.image))?,
                            refined_mask: BitMask::load(&dir.join(&v.mask))?,
                            similarity: v.similarity,
                            reference_index: v.reference_index,
                            kept_reference_index: v.kept_reference_index,
                            attempts_used: v.attempts_used,
                            flags: v.flags.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if variations.len() != regions.len() {
            return Err(Error::Validation(format!(
                "{}: {} regions but {} variation lists",
                b.base_id,
                regions.len(),
                variations.len()
            )));
        }
        runs.push(BaseRun {
            base_id: b.base_id,
            seed: b.seed,
            base,
            regions,
            variations,
        });
    }
    Ok((file.generation, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downscale_keeps_aspect() {
        let img = RasterImage::filled(1024, 300, [1, 2, 3]).unwrap();
        assert_eq!(downscale(&img, 512).unwrap().dimensions(), (512, 150));
        let small = RasterImage::filled(40, 30, [0; 3]).unwrap();
        assert_eq!(downscale(&small, 512).unwrap(), small);
        let thin = RasterImage::filled(2000, 1, [0; 3]).unwrap();
        assert_eq!(downscale(&thin, 512).unwrap().dimensions(), (512, 1));
    }

    #[test]
    fn infeasible_regions_are_dropped_and_renumbered() {
        let base = RasterImage::filled(100, 100, [0; 3]).unwrap();
        // A 3x3 speck (infeasible) above a 20x20 square.
        let mask = BitMask::from_fn(100, 100, |x, y| {
            (x < 3 && y < 3) || ((40..60).contains(&x) && (60..80).contains(&y))
        })
        .unwrap();
        let all = extract_regions(&base, &mask, CoverageBand::default()).unwrap();
        assert_eq!(all.len(), 2);
        assert!(!all[0].feasible && all[1].feasible);
        let used = generation_regions(&all, false);
        assert_eq!(used.len(), 1);
        assert_eq!(used[0].index, 0);
        assert_eq!(used[0].rect, all[1].rect);
        assert_eq!(generation_regions(&all, true).len(), 2);
    }
}
