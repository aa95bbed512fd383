//! Combining per-region variations into full augmented samples.
//!
//! A [`CombinationKey`] selects a non-empty subset of the N regions (as an
//! N-bit mask) and, for each selected region, one of its L variations. With
//! k regions selected there are L^k choices, so the whole space has
//! sum_k C(N, k) L^k = (L + 1)^N - 1 keys.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{composite_region, Variation};
use crate::error::{Error, Result};
use crate::imaging::{BitMask, RasterImage, Rect};
use crate::regions::RegionSpec;

/// Largest supported region count; bits live in a `u64`.
pub const MAX_REGIONS: usize = 63;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CombinationKey {
    bits: u64,
    choices: Vec<u32>,
}

impl CombinationKey {
    pub fn new(bits: u64, choices: Vec<u32>) -> Result<Self> {
        if bits == 0 {
            return Err(Error::Validation("combination key selects no region".into()));
        }
        if choices.len() != bits.count_ones() as usize {
            return Err(Error::Validation(format!(
                "combination key {bits:#b} selects {} regions but lists {} choices",
                bits.count_ones(),
                choices.len()
            )));
        }
        Ok(CombinationKey { bits, choices })
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn choices(&self) -> &[u32] {
        &self.choices
    }

    pub fn includes(&self, region: usize) -> bool {
        region < 64 && self.bits >> region & 1 == 1
    }

    /// `(region, variation)` pairs in ascending region order.
    pub fn selections(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..64)
            .filter(|&n| self.includes(n))
            .zip(self.choices.iter().map(|&c| c as usize))
    }

    /// Check the key against a space of `n` regions with `l` variations each.
    pub fn validate(&self, n: usize, l: usize) -> Result<()> {
        if n < 64 && self.bits >> n != 0 {
            return Err(Error::Validation(format!(
                "key {self} selects a region beyond the {n} available"
            )));
        }
        if let Some(&c) = self.choices.iter().find(|&&c| c as usize >= l) {
            return Err(Error::Validation(format!(
                "key {self} chooses variation {c} but only {l} exist"
            )));
        }
        Ok(())
    }
}

/// `0b<bits>:<choice>,<choice>,...`, bit n being region n and choices
/// listed for set bits in ascending region order.
impl fmt::Display for CombinationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#b}:", self.bits)?;
        for (i, c) in self.choices.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for CombinationKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("malformed combination key {s:?}"));
        let (bits, choices) = s.split_once(':').ok_or_else(bad)?;
        let bits = bits.strip_prefix("0b").ok_or_else(bad)?;
        let bits = u64::from_str_radix(bits, 2).map_err(|_| bad())?;
        let choices = if choices.is_empty() {
            Vec::new()
        } else {
            choices
                .split(',')
                .map(|c| c.parse::<u32>().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        CombinationKey::new(bits, choices)
    }
}

impl Serialize for CombinationKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CombinationKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

const fn binomial_sum(n: u32, l: u128) -> u128 {
    let mut total = 0;
    let mut k = 1;
    while k <= n {
        // C(n, k) via the multiplicative formula
        let mut c: u128 = 1;
        let mut i = 0;
        while i < k {
            c = c * (n - i) as u128 / (i + 1) as u128;
            i += 1;
        }
        total += c * l.pow(k);
        k += 1;
    }
    total
}

// The summed form and the closed form (L+1)^N - 1 must agree.
const _: () = {
    let mut n = 1;
    while n <= 8 {
        let mut l = 1;
        while l <= 6 {
            assert!(binomial_sum(n, l) == (l + 1).pow(n) - 1);
            l += 1;
        }
        n += 1;
    }
};

fn check_space(n: usize, l: usize) -> Result<()> {
    if n == 0 || l == 0 {
        return Err(Error::Validation(format!(
            "combination space needs N >= 1 and L >= 1, got N={n}, L={l}"
        )));
    }
    if n > MAX_REGIONS {
        return Err(Error::Validation(format!(
            "at most {MAX_REGIONS} regions are supported, got {n}"
        )));
    }
    Ok(())
}

/// Number of distinct keys for `n` regions with `l` variations each:
/// the sum over k of C(n, k) * l^k.
pub fn count_combinations(n: usize, l: usize) -> Result<u64> {
    check_space(n, l)?;
    let overflow = || Error::Overflow(format!("combination count for N={n}, L={l} exceeds u64"));
    let mut total: u64 = 0;
    let mut binom: u64 = 1;
    for k in 1..=n as u64 {
        // C(n, k) = C(n, k-1) * (n - k + 1) / k, exact in u128.
        binom = u64::try_from(binom as u128 * (n as u64 - k + 1) as u128 / k as u128).map_err(|_| overflow())?;
        let power = (l as u64).checked_pow(k as u32).ok_or_else(overflow)?;
        let term = binom.checked_mul(power).ok_or_else(overflow)?;
        total = total.checked_add(term).ok_or_else(overflow)?;
    }
    Ok(total)
}

/// All keys in canonical order: region bits ascending as an integer, then
/// choices as an odometer with the lowest selected region turning fastest.
pub fn enumerate_keys(n: usize, l: usize) -> Result<KeyIter> {
    check_space(n, l)?;
    Ok(KeyIter {
        last_bits: (1u64 << n) - 1,
        l: l as u32,
        bits: 1,
        choices: vec![0],
        done: false,
    })
}

pub struct KeyIter {
    last_bits: u64,
    l: u32,
    bits: u64,
    choices: Vec<u32>,
    done: bool,
}

impl Iterator for KeyIter {
    type Item = CombinationKey;

    fn next(&mut self) -> Option<CombinationKey> {
        if self.done {
            return None;
        }
        let key = CombinationKey {
            bits: self.bits,
            choices: self.choices.clone(),
        };
        // Advance the odometer; on rollover move to the next bit pattern.
        let mut carried = true;
        for c in self.choices.iter_mut() {
            *c += 1;
            if *c < self.l {
                carried = false;
                break;
            }
            *c = 0;
        }
        if carried {
            if self.bits == self.last_bits {
                self.done = true;
            } else {
                self.bits += 1;
                self.choices = vec![0; self.bits.count_ones() as usize];
            }
        }
        Some(key)
    }
}

/// Draw one key uniformly from the space by picking a base-(L+1) digit per
/// region (0 = excluded, d = variation d-1) and rejecting the all-zero
/// vector.
pub fn draw_key<R: Rng + ?Sized>(rng: &mut R, n: usize, l: usize) -> CombinationKey {
    loop {
        let mut bits = 0u64;
        let mut choices = Vec::new();
        for region in 0..n {
            let digit = rng.random_range(0..=l as u32);
            if digit > 0 {
                bits |= 1 << region;
                choices.push(digit - 1);
            }
        }
        if bits != 0 {
            return CombinationKey { bits, choices };
        }
    }
}

/// `count` distinct keys drawn uniformly without replacement, reproducible
/// for a given seed. Returns the full enumeration when `count` covers the
/// whole space.
pub fn sample_keys(n: usize, l: usize, count: usize, seed: u64) -> Result<Vec<CombinationKey>> {
    sample_keys_where(n, l, count, seed, |_| true)
}

/// Spaces up to this size are enumerated before filtered sampling so an
/// exclusion-heavy space cannot stall rejection sampling.
const FILTER_ENUMERATION_LIMIT: u64 = 1 << 20;

/// Like [`sample_keys`] but only over keys for which `allowed` holds.
pub fn sample_keys_where(
    n: usize,
    l: usize,
    count: usize,
    seed: u64,
    allowed: impl Fn(&CombinationKey) -> bool,
) -> Result<Vec<CombinationKey>> {
    if count == 0 {
        return Err(Error::Validation("sample count must be at least 1".into()));
    }
    let total = count_combinations(n, l).unwrap_or(u64::MAX);
    let mut budget = None;
    if total <= FILTER_ENUMERATION_LIMIT {
        let available = enumerate_keys(n, l)?.filter(|k| allowed(k)).count();
        if count >= available {
            return Ok(enumerate_keys(n, l)?.filter(|k| allowed(k)).collect());
        }
    } else {
        // Give up after a generous number of consecutive rejections.
        budget = Some(count.saturating_mul(1000).max(100_000));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut misses = 0usize;
    while out.len() < count {
        let key = draw_key(&mut rng, n, l);
        if allowed(&key) && seen.insert(key.clone()) {
            out.push(key);
            misses = 0;
        } else {
            misses += 1;
            if budget.is_some_and(|b| misses > b) {
                log::warn!("key sampling stopped at {} of {count} keys", out.len());
                break;
            }
        }
    }
    Ok(out)
}

/// One composited output: image, object mask and the key that built it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub image: RasterImage,
    pub mask: BitMask,
    pub key: CombinationKey,
    pub region_scores: Vec<f64>,
}

/// Composite the variations selected by `key` onto `base`.
pub fn realize(
    base: &RasterImage,
    regions: &[RegionSpec],
    variations: &[Vec<Variation>],
    key: &CombinationKey,
) -> Result<AugmentedSample> {
    if variations.len() != regions.len() {
        return Err(Error::Validation(format!(
            "{} regions but {} variation lists",
            regions.len(),
            variations.len()
        )));
    }
    let l = variations.first().map_or(0, Vec::len);
    if variations.iter().any(|v| v.len() != l) {
        return Err(Error::Validation("regions have different variation counts".into()));
    }
    key.validate(regions.len(), l)?;
    let mut image = base.clone();
    let mut mask = BitMask::empty(base.width(), base.height())?;
    let mut region_scores = Vec::new();
    for (n, c) in key.selections() {
        let region = &regions[n];
        let var = &variations[n][c];
        image = composite_region(&image, region, &var.image)?;
        mask.union_at(&var.refined_mask, region.rect.x, region.rect.y)?;
        region_scores.push(var.similarity);
    }
    Ok(AugmentedSample {
        image,
        mask,
        key: key.clone(),
        region_scores,
    })
}

/// Output of the copy-paste baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PastedSample {
    pub image: RasterImage,
    pub mask: BitMask,
}

/// Naive copy-paste: each instance is scaled (nearest neighbour) to its
/// placement rect and its masked pixels overwrite the base.
pub fn copy_paste_augment(
    base: &RasterImage,
    base_mask: &BitMask,
    instances: &[(RasterImage, BitMask)],
    placements: &[Rect],
) -> Result<PastedSample> {
    if base.dimensions() != base_mask.dimensions() {
        return Err(Error::Geometry("base mask does not match base image".into()));
    }
    if instances.len() != placements.len() {
        return Err(Error::Validation(format!(
            "{} instances but {} placements",
            instances.len(),
            placements.len()
        )));
    }
    let mut image = base.clone();
    let mut mask = base_mask.clone();
    for (i, ((inst, inst_mask), rect)) in instances.iter().zip(placements).enumerate() {
        if inst.dimensions() != inst_mask.dimensions() {
            return Err(Error::Geometry(format!("instance {i}: mask does not match image")));
        }
        if !rect.fits(base.width(), base.height()) {
            return Err(Error::BoxOutOfBounds {
                index: i,
                rect: *rect,
                width: base.width(),
                height: base.height(),
            });
        }
        let scaled = inst.resize_nearest(rect.w, rect.h)?;
        let scaled_mask = inst_mask.resize_nearest(rect.w, rect.h)?;
        image.paste_masked(&scaled, &scaled_mask, rect.x, rect.y)?;
        mask.union_at(&scaled_mask, rect.x, rect.y)?;
    }
    Ok(PastedSample { image, mask })
}

/// Random placements for copy-paste: each instance keeps its size (shrunk
/// to fit if larger than the base) at a uniformly drawn position.
pub fn random_placements(base_width: u32, base_height: u32, instance_sizes: &[(u32, u32)], seed: u64) -> Vec<Rect> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    instance_sizes
        .iter()
        .map(|&(w, h)| {
            let (w, h) = (w.min(base_width), h.min(base_height));
            let x = rng.random_range(0..=base_width - w);
            let y = rng.random_range(0..=base_height - h);
            Rect::new(x, y, w, h)
        })
        .collect()
}
