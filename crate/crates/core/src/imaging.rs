//! Raster images, binary masks, rectangles and seed derivation.
//!
//! Images are 8-bit RGB, row-major. Masks hold one logical bit per pixel and
//! are serialized as single-channel PNGs with 0 for unmasked and 255 for
//! masked pixels.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle. `x`/`y` are the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    /// Exclusive right edge.
    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// True when the rect is non-degenerate and lies fully inside a
    /// `width`x`height` canvas.
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width as u64 && self.bottom() <= height as u64
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x && (x as u64) < self.right() && y >= self.y && (y as u64) < self.bottom()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        (self.x as u64) < other.right()
            && (other.x as u64) < self.right()
            && (self.y as u64) < other.bottom()
            && (other.y as u64) < self.bottom()
    }

    fn check(&self, width: u32, height: u32) -> Result<()> {
        if self.fits(width, height) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                rect: *self,
                width,
                height,
            })
        }
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rect({}, {}, {}x{})", self.x, self.y, self.w, self.h)
    }
}

/// 8-bit RGB image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

fn check_dims(width: u32, height: u32) -> Result<usize> {
    if width == 0 || height == 0 {
        return Err(Error::Geometry(format!(
            "image dimensions must be at least 1x1, got {width}x{height}"
        )));
    }
    Ok(width as usize * height as usize)
}

impl RasterImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        let pixels = check_dims(width, height)?;
        if data.len() != pixels * 3 {
            return Err(Error::Geometry(format!(
                "expected {} bytes for {width}x{height} RGB, got {}",
                pixels * 3,
                data.len()
            )));
        }
        Ok(RasterImage { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let pixels = check_dims(width, height)?;
        Ok(RasterImage {
            width,
            height,
            data: rgb.repeat(pixels),
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Result<Self> {
        let pixels = check_dims(width, height)?;
        let mut data = Vec::with_capacity(pixels * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Ok(RasterImage { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Integer BT.601 luma.
    pub fn luminance(&self, x: u32, y: u32) -> u8 {
        let [r, g, b] = self.pixel(x, y);
        ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
    }

    /// Copy of the pixels inside `rect`.
    pub fn crop(&self, rect: &Rect) -> Result<RasterImage> {
        rect.check(self.width, self.height)?;
        let row = rect.w as usize * 3;
        let mut data = Vec::with_capacity(row * rect.h as usize);
        for y in rect.y..rect.y + rect.h {
            let o = self.offset(rect.x, y);
            data.extend_from_slice(&self.data[o..o + row]);
        }
        Ok(RasterImage {
            width: rect.w,
            height: rect.h,
            data,
        })
    }

    /// Overwrite the area at (`x`, `y`) with `patch`.
    pub fn paste(&mut self, patch: &RasterImage, x: u32, y: u32) -> Result<()> {
        Rect::new(x, y, patch.width, patch.height).check(self.width, self.height)?;
        let row = patch.width as usize * 3;
        for py in 0..patch.height {
            let dst = self.offset(x, y + py);
            let src = patch.offset(0, py);
            self.data[dst..dst + row].copy_from_slice(&patch.data[src..src + row]);
        }
        Ok(())
    }

    /// Per-pixel select: take `patch` where `mask` is set, keep `self`
    /// elsewhere. `patch` and `mask` share dimensions and are placed at
    /// (`x`, `y`).
    pub fn paste_masked(&mut self, patch: &RasterImage, mask: &BitMask, x: u32, y: u32) -> Result<()> {
        if patch.dimensions() != mask.dimensions() {
            return Err(Error::Geometry(format!(
                "patch {}x{} and mask {}x{} differ",
                patch.width, patch.height, mask.width, mask.height
            )));
        }
        Rect::new(x, y, patch.width, patch.height).check(self.width, self.height)?;
        for py in 0..patch.height {
            for px in 0..patch.width {
                if mask.get(px, py) {
                    self.set_pixel(x + px, y + py, patch.pixel(px, py));
                }
            }
        }
        Ok(())
    }

    /// Nearest-neighbour resample. Identity when the size is unchanged.
    pub fn resize_nearest(&self, width: u32, height: u32) -> Result<RasterImage> {
        check_dims(width, height)?;
        if (width, height) == self.dimensions() {
            return Ok(self.clone());
        }
        let (sw, sh) = (self.width as u64, self.height as u64);
        RasterImage::from_fn(width, height, |x, y| {
            let sx = (x as u64 * sw / width as u64) as u32;
            let sy = (y as u64 * sh / height as u64) as u32;
            self.pixel(sx, sy)
        })
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let img = RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        RasterImage::new(w, h, img.into_raw())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }
}

/// Binary mask, one logical bit per pixel; `true` means masked.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BitMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count_ones())
            .finish()
    }
}

impl BitMask {
    pub fn empty(width: u32, height: u32) -> Result<Self> {
        let pixels = check_dims(width, height)?;
        Ok(BitMask {
            width,
            height,
            bits: vec![false; pixels],
        })
    }

    pub fn full(width: u32, height: u32) -> Result<Self> {
        let pixels = check_dims(width, height)?;
        Ok(BitMask {
            width,
            height,
            bits: vec![true; pixels],
        })
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        let pixels = check_dims(width, height)?;
        if bits.len() != pixels {
            return Err(Error::Geometry(format!(
                "expected {pixels} bits for {width}x{height} mask, got {}",
                bits.len()
            )));
        }
        Ok(BitMask { width, height, bits })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Result<Self> {
        let pixels = check_dims(width, height)?;
        let mut bits = Vec::with_capacity(pixels);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Ok(BitMask { width, height, bits })
    }

    /// A `width`x`height` mask with exactly `rect` set.
    pub fn from_rect(width: u32, height: u32, rect: &Rect) -> Result<Self> {
        rect.check(width, height)?;
        Self::from_fn(width, height, |x, y| rect.contains_point(x, y))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        self.bits[i] = value;
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn pixel_count(&self) -> u64 {
        self.bits.len() as u64
    }

    /// Tight bounding box of the set bits, `None` for an empty mask.
    pub fn bbox(&self) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != u32::MAX).then(|| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn crop(&self, rect: &Rect) -> Result<BitMask> {
        rect.check(self.width, self.height)?;
        Self::from_fn(rect.w, rect.h, |x, y| self.get(rect.x + x, rect.y + y))
    }

    /// OR `other` into `self` with its top-left at (`x`, `y`).
    pub fn union_at(&mut self, other: &BitMask, x: u32, y: u32) -> Result<()> {
        Rect::new(x, y, other.width, other.height).check(self.width, self.height)?;
        for oy in 0..other.height {
            for ox in 0..other.width {
                if other.get(ox, oy) {
                    self.set(x + ox, y + oy, true);
                }
            }
        }
        Ok(())
    }

    /// Embed this mask into an otherwise empty canvas at (`x`, `y`).
    pub fn place(&self, canvas_width: u32, canvas_height: u32, x: u32, y: u32) -> Result<BitMask> {
        let mut out = BitMask::empty(canvas_width, canvas_height)?;
        out.union_at(self, x, y)?;
        Ok(out)
    }

    fn same_dims(&self, other: &BitMask) -> Result<()> {
        if self.dimensions() != other.dimensions() {
            return Err(Error::Geometry(format!(
                "mask {}x{} and mask {}x{} differ",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection(&self, other: &BitMask) -> Result<BitMask> {
        self.same_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(BitMask { bits, ..*self })
    }

    pub fn union(&self, other: &BitMask) -> Result<BitMask> {
        self.same_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(BitMask { bits, ..*self })
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.dimensions() == other.dimensions() && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Nearest-neighbour resample.
    pub fn resize_nearest(&self, width: u32, height: u32) -> Result<BitMask> {
        check_dims(width, height)?;
        if (width, height) == self.dimensions() {
            return Ok(self.clone());
        }
        let (sw, sh) = (self.width as u64, self.height as u64);
        BitMask::from_fn(width, height, |x, y| {
            self.get(
                (x as u64 * sw / width as u64) as u32,
                (y as u64 * sh / height as u64) as u32,
            )
        })
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let raw = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let img = GrayImage::from_raw(self.width, self.height, raw).expect("bit count checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Decode a grayscale PNG. Any nonzero byte counts as masked; values
    /// other than 0 and 255 are accepted with a warning.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let (w, h) = img.dimensions();
        let raw = img.into_raw();
        let odd = raw.iter().filter(|&&v| v != 0 && v != 255).count();
        if odd > 0 {
            log::warn!("mask has {odd} pixels that are neither 0 nor 255; treating them as masked");
        }
        BitMask::from_bits(w, h, raw.into_iter().map(|v| v != 0).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }
}

pub fn crop(image: &RasterImage, rect: &Rect) -> Result<RasterImage> {
    image.crop(rect)
}

/// Fraction of set bits.
pub fn mask_coverage(mask: &BitMask) -> f64 {
    mask.count_ones() as f64 / mask.pixel_count() as f64
}

/// Dilation with a square structuring element: an output bit is set iff
/// some input bit lies within Chebyshev distance `radius`.
pub fn dilate(mask: &BitMask, radius: u32) -> BitMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width as usize, mask.height as usize);
    let r = radius as usize;
    // The square element is separable: a horizontal pass then a vertical one.
    let horizontal = running_or(&mask.bits, w, h, r, true);
    let bits = running_or(&horizontal, w, h, r, false);
    BitMask {
        width: mask.width,
        height: mask.height,
        bits,
    }
}

fn running_or(src: &[bool], w: usize, h: usize, r: usize, along_rows: bool) -> Vec<bool> {
    let (lines, len) = if along_rows { (h, w) } else { (w, h) };
    let at = |line: usize, i: usize| if along_rows { line * w + i } else { i * w + line };
    let mut out = vec![false; src.len()];
    for line in 0..lines {
        // `last` is the most recent set position seen from the left;
        // `next` is the nearest set position at or after the cursor.
        let mut last: Option<usize> = None;
        let mut next: Option<usize> = None;
        for i in 0..len {
            if src[at(line, i)] {
                last = Some(i);
            }
            if next.is_none_or(|n| n < i) {
                next = (i..len.min(i + r + 1)).find(|&j| src[at(line, j)]);
            }
            let left = last.is_some_and(|p| i - p <= r);
            let right = next.is_some_and(|n| n - i <= r);
            out[at(line, i)] = left || right;
        }
    }
    out
}

/// Root seed for a generation run. Per-call seeds are derived by mixing the
/// root with (region, variation, attempt) so they are reproducible without
/// shared state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunSeed {
    pub root: u64,
}

impl RunSeed {
    pub const fn new(root: u64) -> Self {
        RunSeed { root }
    }

    pub fn derive(&self, region: usize, variation: usize, attempt: usize) -> u64 {
        let mut h = splitmix64(self.root);
        for part in [region as u64, variation as u64, attempt as u64] {
            h = splitmix64(h ^ part.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
        h
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
