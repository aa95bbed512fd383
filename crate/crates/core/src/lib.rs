pub mod backend;
pub mod combine;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod regions;

pub use error::{BackendKind, Error, Result};
pub use imaging::{crop, dilate, mask_coverage, BitMask, RasterImage, Rect, RunSeed};
pub use regions::{extract_regions, CoverageBand, RegionSpec};
