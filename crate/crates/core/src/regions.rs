//! Splitting a placement mask into independent crop regions.
//!
//! Each 8-connected component of the placement mask becomes one region. Its
//! crop window starts at the component's bounding box and grows by the same
//! margin on every side (clamped to the image) until the component covers
//! close to the middle of the target band. Windows of different regions
//! never overlap; where growth would make them collide, both margins are
//! walked back toward the bounding boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{mask_coverage, BitMask, RasterImage, Rect};

/// Components with fewer pixels than this are kept but never feasible.
pub const MIN_COMPONENT_PIXELS: u64 = 16;

/// Inclusive coverage band a region should fall into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageBand {
    pub low: f64,
    pub high: f64,
}

impl Default for CoverageBand {
    fn default() -> Self {
        CoverageBand { low: 0.15, high: 0.30 }
    }
}

impl CoverageBand {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low > 0.0 && low < high && high <= 1.0) {
            return Err(Error::Config(format!(
                "coverage band must satisfy 0 < low < high <= 1, got [{low}, {high}]"
            )));
        }
        Ok(CoverageBand { low, high })
    }

    pub fn midpoint(&self) -> f64 {
        (self.low + self.high) / 2.0
    }

    pub fn contains(&self, coverage: f64) -> bool {
        coverage >= self.low && coverage <= self.high
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub index: usize,
    /// Crop window in base-image coordinates.
    pub rect: Rect,
    /// Crop-local placement mask for this region.
    pub region_mask: BitMask,
    pub coverage: f64,
    pub feasible: bool,
}

impl RegionSpec {
    /// Bounding box of the placement pixels, in crop-local coordinates.
    pub fn object_box(&self) -> Rect {
        self.region_mask
            .bbox()
            .expect("regions are built from non-empty components")
    }
}

/// A connected group of placement pixels with its bounding box.
struct Component {
    bbox: Rect,
    pixels: Vec<(u32, u32)>,
}

/// Label 8-connected components, ordered by the first pixel hit in a
/// raster scan.
fn label_components(mask: &BitMask) -> Vec<Component> {
    let (w, h) = mask.dimensions();
    let mut seen = vec![false; (w * h) as usize];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if !mask.get(x, y) || seen[i] {
                continue;
            }
            seen[i] = true;
            stack.push((x, y));
            let mut pixels = Vec::new();
            while let Some((cx, cy)) = stack.pop() {
                pixels.push((cx, cy));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        let j = (ny * w + nx) as usize;
                        if mask.get(nx, ny) && !seen[j] {
                            seen[j] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            out.push(Component {
                bbox: bbox_of(&pixels),
                pixels,
            });
        }
    }
    out
}

fn bbox_of(pixels: &[(u32, u32)]) -> Rect {
    let x0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
    let y0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
    let x1 = pixels.iter().map(|p| p.0).max().unwrap_or(0);
    let y1 = pixels.iter().map(|p| p.1).max().unwrap_or(0);
    Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1)
}

/// Merge components whose bounding boxes intersect until all boxes are
/// pairwise disjoint. Non-overlapping windows are impossible otherwise.
fn merge_overlapping(mut comps: Vec<Component>) -> Vec<Component> {
    loop {
        let mut merged = false;
        'outer: for i in 0..comps.len() {
            for j in i + 1..comps.len() {
                if comps[i].bbox.intersects(&comps[j].bbox) {
                    let other = comps.remove(j);
                    comps[i].pixels.extend(other.pixels);
                    comps[i].bbox = bbox_of(&comps[i].pixels);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            return comps;
        }
    }
}

/// `bbox` grown by `margin` on every side, clamped to the canvas.
fn grow(bbox: &Rect, margin: u32, width: u32, height: u32) -> Rect {
    let x0 = bbox.x.saturating_sub(margin);
    let y0 = bbox.y.saturating_sub(margin);
    let x1 = (bbox.right() + margin as u64).min(width as u64) as u32;
    let y1 = (bbox.bottom() + margin as u64).min(height as u64) as u32;
    Rect::new(x0, y0, x1 - x0, y1 - y0)
}

/// Margin whose window puts coverage closest to the band midpoint, or the
/// margin of the largest window when the band is unreachable.
fn choose_margin(bbox: &Rect, count: u64, band: &CoverageBand, width: u32, height: u32) -> u32 {
    let mid = band.midpoint();
    let mut best: Option<(f64, u32)> = None;
    let mut closest = (f64::INFINITY, 0u32);
    let mut margin = 0u32;
    loop {
        let rect = grow(bbox, margin, width, height);
        let coverage = count as f64 / rect.area() as f64;
        let dist = (coverage - mid).abs();
        if band.contains(coverage) && best.is_none_or(|(d, _)| dist < d) {
            best = Some((dist, margin));
        }
        if dist < closest.0 {
            closest = (dist, margin);
        }
        let saturated = rect == Rect::new(0, 0, width, height);
        if coverage < band.low || saturated {
            return match best {
                Some((_, m)) => m,
                // Image too small to dilute the component into the band.
                None if saturated && coverage > band.high => margin,
                // Already too sparse in its own box, or a single step
                // jumped across the band.
                None => closest.1,
            };
        }
        margin += 1;
    }
}

/// Derive the crop regions for a base image and its placement mask.
pub fn extract_regions(base: &RasterImage, placement_mask: &BitMask, band: CoverageBand) -> Result<Vec<RegionSpec>> {
    if base.dimensions() != placement_mask.dimensions() {
        return Err(Error::Geometry(format!(
            "placement mask {}x{} does not match base image {}x{}",
            placement_mask.width(),
            placement_mask.height(),
            base.width(),
            base.height()
        )));
    }
    let band = CoverageBand::new(band.low, band.high)?;
    let (w, h) = base.dimensions();

    let mut comps = merge_overlapping(label_components(placement_mask));
    comps.sort_by_key(|c| (c.bbox.y, c.bbox.x));

    let mut margins: Vec<u32> = comps
        .iter()
        .map(|c| choose_margin(&c.bbox, c.pixels.len() as u64, &band, w, h))
        .collect();

    // Walk margins back until no two windows overlap. At margin zero the
    // windows are the bounding boxes, which are disjoint after merging.
    loop {
        let rects: Vec<Rect> = comps
            .iter()
            .zip(&margins)
            .map(|(c, &m)| grow(&c.bbox, m, w, h))
            .collect();
        let mut shrink = vec![false; comps.len()];
        for i in 0..rects.len() {
            for j in i + 1..rects.len() {
                if rects[i].intersects(&rects[j]) {
                    shrink[i] = true;
                    shrink[j] = true;
                }
            }
        }
        if !shrink.iter().any(|&s| s) {
            break;
        }
        for (m, s) in margins.iter_mut().zip(shrink) {
            if s && *m > 0 {
                *m -= 1;
            }
        }
    }

    comps
        .iter()
        .zip(margins)
        .enumerate()
        .map(|(index, (comp, margin))| {
            let rect = grow(&comp.bbox, margin, w, h);
            let mut region_mask = BitMask::empty(rect.w, rect.h)?;
            for &(x, y) in &comp.pixels {
                region_mask.set(x - rect.x, y - rect.y, true);
            }
            let coverage = mask_coverage(&region_mask);
            let feasible = band.contains(coverage) && comp.pixels.len() as u64 >= MIN_COMPONENT_PIXELS;
            Ok(RegionSpec {
                index,
                rect,
                region_mask,
                coverage,
                feasible,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base(w: u32, h: u32) -> RasterImage {
        RasterImage::filled(w, h, [40, 80, 40]).unwrap()
    }

    fn square(w: u32, h: u32, x: u32, y: u32, s: u32) -> BitMask {
        BitMask::from_rect(w, h, &Rect::new(x, y, s, s)).unwrap()
    }

    /// Flood-fill oracle: count 8-connected components by repeated
    /// neighbourhood relaxation of labels.
    fn oracle_component_count(m: &BitMask) -> usize {
        let (w, h) = m.dimensions();
        let mut label: Vec<Option<usize>> = (0..(w * h) as usize).map(|i| m.bits()[i].then_some(i)).collect();
        loop {
            let mut changed = false;
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let i = (y * w as i64 + x) as usize;
                    let Some(mut l) = label[i] else { continue };
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (nx, ny) = (x + dx, y + dy);
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            if let Some(o) = label[(ny * w as i64 + nx) as usize] {
                                l = l.min(o);
                            }
                        }
                    }
                    if Some(l) != label[i] {
                        label[i] = Some(l);
                        changed = true;
                    }
                }
            }
            if !changed {
                let mut ls: Vec<usize> = label.iter().flatten().copied().collect();
                ls.sort();
                ls.dedup();
                return ls.len();
            }
        }
    }

    fn reassemble(regions: &[RegionSpec], w: u32, h: u32) -> BitMask {
        let mut out = BitMask::empty(w, h).unwrap();
        for r in regions {
            out.union_at(&r.region_mask, r.rect.x, r.rect.y).unwrap();
        }
        out
    }

    #[test]
    fn centered_square_expands_to_midpoint() {
        let m = square(100, 100, 40, 40, 20);
        let regions = extract_regions(&base(100, 100), &m, CoverageBand::default()).unwrap();
        assert_eq!(regions.len(), 1);
        let r = &regions[0];
        assert_eq!(r.region_mask.count_ones(), 400);
        // 400 / 0.225 = 1777.8; symmetric margins give 42x42 = 1764.
        assert_eq!(r.rect, Rect::new(29, 29, 42, 42));
        assert!((r.coverage - 400.0 / 1764.0).abs() < 1e-12);
        assert!(r.feasible);
    }

    #[test]
    fn empty_mask_yields_no_regions() {
        let m = BitMask::empty(32, 32).unwrap();
        assert!(extract_regions(&base(32, 32), &m, CoverageBand::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn size_mismatch_is_a_geometry_error() {
        let m = BitMask::empty(31, 32).unwrap();
        assert!(matches!(
            extract_regions(&base(32, 32), &m, CoverageBand::default()),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn bad_band_rejected() {
        let m = BitMask::empty(8, 8).unwrap();
        for (lo, hi) in [(0.0, 0.3), (0.3, 0.3), (0.2, 1.5)] {
            assert!(extract_regions(&base(8, 8), &m, CoverageBand { low: lo, high: hi }).is_err());
        }
    }

    #[test]
    fn two_far_components_are_ordered_and_disjoint() {
        let mut m = square(200, 120, 150, 10, 10);
        m.union_at(&BitMask::full(12, 12).unwrap(), 20, 80).unwrap();
        let regions = extract_regions(&base(200, 120), &m, CoverageBand::default()).unwrap();
        assert_eq!(oracle_component_count(&m), 2);
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].index, 0);
        assert_eq!(regions[1].index, 1);
        // Ordered by (top, left) of the component box.
        assert!(regions[0].rect.contains_rect(&Rect::new(150, 10, 10, 10)));
        assert!(regions[1].rect.contains_rect(&Rect::new(20, 80, 12, 12)));
        assert!(!regions[0].rect.intersects(&regions[1].rect));
        assert!(regions.iter().all(|r| r.feasible));
    }

    #[test]
    fn close_components_shrink_apart() {
        // Two 10x10 squares 4 px apart; unconstrained windows would overlap.
        let mut m = square(80, 40, 20, 15, 10);
        m.union_at(&BitMask::full(10, 10).unwrap(), 34, 15).unwrap();
        let regions = extract_regions(&base(80, 40), &m, CoverageBand::default()).unwrap();
        assert_eq!(regions.len(), 2);
        assert!(!regions[0].rect.intersects(&regions[1].rect));
        assert_eq!(reassemble(&regions, 80, 40), m);
        for r in &regions {
            assert_eq!(r.feasible, CoverageBand::default().contains(r.coverage));
        }
    }

    #[test]
    fn oversized_blob_is_infeasible() {
        // 50x50 blob on a 64x64 image: the full image only reaches 61%.
        let m = square(64, 64, 7, 7, 50);
        let regions = extract_regions(&base(64, 64), &m, CoverageBand::default()).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].rect, Rect::new(0, 0, 64, 64));
        assert!(!regions[0].feasible);
        assert!(regions[0].coverage > 0.30);
    }

    #[test]
    fn tiny_component_kept_but_flagged() {
        let m = square(64, 64, 30, 30, 3);
        let regions = extract_regions(&base(64, 64), &m, CoverageBand::default()).unwrap();
        assert_eq!(regions.len(), 1);
        assert!(!regions[0].feasible);
        assert!(CoverageBand::default().contains(regions[0].coverage));
    }

    #[test]
    fn sparse_component_cannot_gain_coverage() {
        // A thin diagonal line is below the band already in its own box.
        let m = BitMask::from_fn(64, 64, |x, y| x == y && (10..40).contains(&x)).unwrap();
        let regions = extract_regions(&base(64, 64), &m, CoverageBand::default()).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].rect, Rect::new(10, 10, 30, 30));
        assert!(!regions[0].feasible);
    }

    #[test]
    fn nested_components_merge_into_one_region() {
        // A hollow ring around a dot: the boxes overlap so they share a window.
        let m = BitMask::from_fn(40, 40, |x, y| {
            let ring =
                (10..30).contains(&x) && (10..30).contains(&y) && !((12..28).contains(&x) && (12..28).contains(&y));
            ring || (x == 20 && y == 20)
        })
        .unwrap();
        assert_eq!(oracle_component_count(&m), 2);
        let regions = extract_regions(&base(40, 40), &m, CoverageBand::default()).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(reassemble(&regions, 40, 40), m);
    }

    fn arb_mask() -> impl Strategy<Value = BitMask> {
        (
            8u32..40,
            8u32..40,
            proptest::collection::vec((0u32..40, 0u32..40, 1u32..8), 0..5),
        )
            .prop_map(|(w, h, blobs)| {
                BitMask::from_fn(w, h, |x, y| {
                    blobs
                        .iter()
                        .any(|&(bx, by, s)| x >= bx % w && x < bx % w + s && y >= by % h && y < by % h + s)
                })
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn region_invariants(m in arb_mask()) {
            let (w, h) = m.dimensions();
            let band = CoverageBand::default();
            let regions = extract_regions(&base(w, h), &m, band).unwrap();
            let again = extract_regions(&base(w, h), &m, band).unwrap();
            prop_assert_eq!(&regions, &again);
            prop_assert_eq!(reassemble(&regions, w, h), m.clone());
            prop_assert!(regions.len() <= oracle_component_count(&m));
            for (i, r) in regions.iter().enumerate() {
                prop_assert_eq!(r.index, i);
                prop_assert!(r.rect.fits(w, h));
                prop_assert_eq!(r.region_mask.dimensions(), (r.rect.w, r.rect.h));
                prop_assert_eq!(r.coverage, mask_coverage(&r.region_mask));
                if r.feasible {
                    prop_assert!(band.contains(r.coverage));
                }
                for other in &regions[i + 1..] {
                    prop_assert!(!r.rect.intersects(&other.rect));
                }
            }
        }
    }
}
