//! On-disk dataset model.
//!
//! A task directory holds `task.json` (the manifest) next to `images/`,
//! `masks/` and `refs/`. All paths inside the manifest are relative to the
//! manifest's directory and use forward slashes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::combine::{AugmentedSample, CombinationKey, PastedSample};
use crate::engine::GenerationConfig;
use crate::error::{Error, Result};
use crate::imaging::{BitMask, RasterImage, Rect};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "task.json";
pub const DEFAULT_SUPPORT_SIZE: usize = 5;
pub const DEFAULT_BASE_POOL_SIZE: usize = 10;

type Extra = BTreeMap<String, Value>;

/// One annotated example of the novel class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportExample {
    pub image: String,
    pub mask: String,
}

/// A scene objects get painted into, with an optional placement mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseEntry {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub class_name: String,
    pub support: Vec<SupportExample>,
    #[serde(default)]
    pub base_pool: Vec<BaseEntry>,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Annotated,
    Generated,
    CopyPaste,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combination_key: Option<CombinationKey>,
    /// Base-pool entry a generated sample was painted into.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_id: Option<String>,
    /// Run seed the sample's variations were generated with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of regions of the base image the key selects from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_count: Option<usize>,
    /// Similarity of each selected region, in key order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
    #[serde(flatten)]
    pub extra: Extra,
}

/// A human rejection recorded against one variation or one key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tombstone {
    pub base_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<CombinationKey>,
}

impl Tombstone {
    /// True when `key` is excluded by this tombstone.
    pub fn excludes(&self, key: &CombinationKey) -> bool {
        if let Some(k) = &self.key {
            return k == key;
        }
        match (self.region, self.variation) {
            (Some(n), Some(l)) => key.selections().any(|s| s == (n, l)),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tombstones: Vec<Tombstone>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl Provenance {
    pub fn for_run(seed: u64, cfg: &GenerationConfig) -> Self {
        Provenance {
            seed: Some(seed),
            config_hash: Some(config_hash(cfg)),
            generation: Some(cfg.clone()),
            ..Default::default()
        }
    }
}

/// SHA-256 of the config's JSON form, hex encoded.
pub fn config_hash(cfg: &GenerationConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub task: FewShotTask,
    #[serde(default)]
    pub samples: Vec<SampleRecord>,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(flatten)]
    pub extra: Extra,
}

fn resolve(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

fn image_dims(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

fn check_pair(root: &Path, owner: &str, image: &str, mask: &str) -> Result<()> {
    for rel in [image, mask] {
        if !resolve(root, rel).is_file() {
            return Err(Error::Validation(format!("{owner}: missing file {rel}")));
        }
    }
    let di = image_dims(&resolve(root, image))?;
    let dm = image_dims(&resolve(root, mask))?;
    if di != dm {
        return Err(Error::Validation(format!(
            "{owner}: image {}x{} and mask {}x{} differ",
            di.0, di.1, dm.0, dm.1
        )));
    }
    Ok(())
}

impl FewShotTask {
    pub fn new(class_name: impl Into<String>) -> Self {
        FewShotTask {
            class_name: class_name.into(),
            support: Vec::new(),
            base_pool: Vec::new(),
            extra: Extra::new(),
        }
    }

    pub fn validate(&self, root: &Path) -> Result<()> {
        if self.support.is_empty() {
            return Err(Error::Validation(format!(
                "task {:?} has an empty support set",
                self.class_name
            )));
        }
        for (i, s) in self.support.iter().enumerate() {
            check_pair(root, &format!("support[{i}]"), &s.image, &s.mask)?;
        }
        let mut ids = BTreeSet::new();
        for b in &self.base_pool {
            if !ids.insert(b.id.as_str()) {
                return Err(Error::Validation(format!("duplicate base image id {:?}", b.id)));
            }
            match &b.placement_mask {
                Some(m) => check_pair(root, &format!("base {:?}", b.id), &b.image, m)?,
                None if !resolve(root, &b.image).is_file() => {
                    return Err(Error::Validation(format!("base {:?}: missing file {}", b.id, b.image)))
                }
                None => {}
            }
        }
        Ok(())
    }

    pub fn load_support(&self, root: &Path) -> Result<Vec<(RasterImage, BitMask)>> {
        self.support
            .iter()
            .map(|s| {
                Ok((
                    RasterImage::load(&resolve(root, &s.image))?,
                    BitMask::load(&resolve(root, &s.mask))?,
                ))
            })
            .collect()
    }

    /// Reference images: each support image cropped to its object's
    /// bounding box (the whole image when the mask is empty).
    pub fn references(&self, root: &Path) -> Result<Vec<RasterImage>> {
        self.load_support(root)?
            .into_iter()
            .map(|(img, mask)| reference_patch(&img, &mask))
            .collect()
    }

    pub fn base(&self, id: &str) -> Result<&BaseEntry> {
        self.base_pool
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| Error::Validation(format!("unknown base image {id:?}")))
    }
}

pub fn reference_patch(image: &RasterImage, mask: &BitMask) -> Result<RasterImage> {
    if image.dimensions() != mask.dimensions() {
        return Err(Error::Geometry("support mask does not match its image".into()));
    }
    match mask.bbox() {
        Some(b) => image.crop(&b),
        None => Ok(image.clone()),
    }
}

impl DatasetManifest {
    pub fn new(task: FewShotTask) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            task,
            samples: Vec::new(),
            provenance: Provenance::default(),
            extra: Extra::new(),
        }
    }

    /// Structural checks that need no file access.
    pub fn check_records(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut dups = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                dups.insert(s.id.as_str());
            }
        }
        if !dups.is_empty() {
            let list: Vec<&str> = dups.into_iter().collect();
            return Err(Error::Validation(format!("duplicate sample ids: {}", list.join(", "))));
        }
        for s in &self.samples {
            match (&s.origin, &s.combination_key) {
                (Origin::Generated, None) => {
                    return Err(Error::Validation(format!(
                        "record {:?}: generated sample without a combination key",
                        s.id
                    )))
                }
                (_, Some(key)) => {
                    let n = s
                        .region_count
                        .ok_or_else(|| Error::Validation(format!("record {:?}: key without region_count", s.id)))?;
                    // Variation counts are not recorded per base; only the
                    // region selection is checked here.
                    key.validate(n, usize::MAX)
                        .map_err(|e| Error::Validation(format!("record {:?}: {e}", s.id)))?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Full validation against the files under `root`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::SchemaVersion {
                found: self.version,
                expected: MANIFEST_VERSION,
            });
        }
        self.check_records()?;
        for s in &self.samples {
            check_pair(root, &format!("record {:?}", s.id), &s.image_path, &s.mask_path)?;
        }
        self.task.validate(root)
    }

    pub fn generated(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.origin == Origin::Generated)
    }

    pub fn is_excluded(&self, base_id: &str, seed: u64, key: &CombinationKey) -> bool {
        self.provenance
            .tombstones
            .iter()
            .any(|t| t.base_id == base_id && t.seed == seed && t.excludes(key))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn manifest_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Parse a manifest without touching the files it references.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = manifest_file(path);
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let raw: Value = serde_json::from_str(&text)?;
    let version = raw.get("version").and_then(Value::as_u64).unwrap_or(0) as u32;
    if version != MANIFEST_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

/// Load and fully validate a manifest. `path` may be the manifest file or
/// its task directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest = read_manifest(path)?;
    let file = manifest_file(path);
    let root = file.parent().unwrap_or(Path::new("."));
    manifest.validate(root)?;
    Ok(manifest)
}

/// Write the manifest as pretty JSON, replacing any previous file
/// atomically.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let file = manifest_file(path);
    let tmp = file.with_extension("json.tmp");
    std::fs::write(&tmp, manifest.to_json()?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &file).map_err(|e| Error::io(&file, e))
}

/// Self-supervised training example built from one detection box.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Source image with the box blanked to black.
    pub masked_base: RasterImage,
    /// Patch inside the box.
    pub reference: RasterImage,
    /// The box as a filled mask.
    pub mask: BitMask,
    /// The untouched source image.
    pub target: RasterImage,
    pub rect: Rect,
}

pub fn extract_training_pairs(image: &RasterImage, boxes: &[Rect]) -> Result<Vec<TrainingPair>> {
    let (w, h) = image.dimensions();
    boxes
        .iter()
        .enumerate()
        .map(|(index, rect)| {
            if !rect.fits(w, h) {
                return Err(Error::BoxOutOfBounds {
                    index,
                    rect: *rect,
                    width: w,
                    height: h,
                });
            }
            let mut masked_base = image.clone();
            masked_base.paste(&RasterImage::filled(rect.w, rect.h, [0, 0, 0])?, rect.x, rect.y)?;
            Ok(TrainingPair {
                masked_base,
                reference: image.crop(rect)?,
                mask: BitMask::from_rect(w, h, rect)?,
                target: image.clone(),
                rect: *rect,
            })
        })
        .collect()
}

/// Parse a boxes sidecar: one `image_id x y w h` line per box. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_boxes(text: &str) -> Result<BTreeMap<String, Vec<Rect>>> {
    let mut out: BTreeMap<String, Vec<Rect>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || {
            Error::Validation(format!(
                "boxes line {}: expected `image_id x y w h`, got {line:?}",
                lineno + 1
            ))
        };
        if fields.len() != 5 {
            return Err(bad());
        }
        let nums: Vec<u32> = fields[1..]
            .iter()
            .map(|f| f.parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if nums[2] == 0 || nums[3] == 0 {
            return Err(bad());
        }
        out.entry(fields[0].to_string())
            .or_default()
            .push(Rect::new(nums[0], nums[1], nums[2], nums[3]));
    }
    Ok(out)
}

/// A generated sample ready for export.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub base_id: String,
    pub seed: u64,
    pub region_count: usize,
    pub sample: AugmentedSample,
}

/// Stable record id for a generated sample.
pub fn generated_id(base_id: &str, seed: u64, key: &CombinationKey) -> String {
    let choices: Vec<String> = key.choices().iter().map(u32::to_string).collect();
    format!("gen_{base_id}_{seed:x}_{:b}_{}", key.bits(), choices.join("-"))
}

fn ensure_layout(out_dir: &Path) -> Result<()> {
    for sub in ["images", "masks", "refs"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

fn write_pair(out_dir: &Path, stem: &str, image: &RasterImage, mask: &BitMask) -> Result<(String, String)> {
    if image.dimensions() != mask.dimensions() {
        return Err(Error::Geometry(format!(
            "{stem}: image {}x{} and mask {}x{} differ",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let image_path = format!("images/{stem}.png");
    let mask_path = format!("masks/{stem}.png");
    image.save(&out_dir.join(&image_path))?;
    mask.save(&out_dir.join(&mask_path))?;
    Ok((image_path, mask_path))
}

/// Copy the task's inputs into `out_dir` and start a manifest listing the
/// annotated support samples.
fn export_task(task: &FewShotTask, source_root: &Path, out_dir: &Path) -> Result<DatasetManifest> {
    task.validate(source_root)?;
    ensure_layout(out_dir)?;
    let mut new_task = FewShotTask {
        class_name: task.class_name.clone(),
        support: Vec::new(),
        base_pool: Vec::new(),
        extra: task.extra.clone(),
    };
    let mut samples = Vec::new();
    for (i, (img, mask)) in task.load_support(source_root)?.into_iter().enumerate() {
        let stem = format!("support_{i:03}");
        let (image_path, mask_path) = write_pair(out_dir, &stem, &img, &mask)?;
        reference_patch(&img, &mask)?.save(&out_dir.join(format!("refs/ref_{i:03}.png")))?;
        new_task.support.push(SupportExample {
            image: image_path.clone(),
            mask: mask_path.clone(),
        });
        samples.push(SampleRecord {
            id: stem,
            image_path,
            mask_path,
            origin: Origin::Annotated,
            combination_key: None,
            base_id: None,
            seed: None,
            region_count: None,
            scores: Vec::new(),
            extra: Extra::new(),
        });
    }
    for b in &task.base_pool {
        let image = format!("refs/base_{}.png", b.id);
        RasterImage::load(&resolve(source_root, &b.image))?.save(&out_dir.join(&image))?;
        let placement_mask = match &b.placement_mask {
            Some(m) => {
                let rel = format!("refs/base_{}_placement.png", b.id);
                BitMask::load(&resolve(source_root, m))?.save(&out_dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        new_task.base_pool.push(BaseEntry {
            id: b.id.clone(),
            image,
            placement_mask,
        });
    }
    let mut manifest = DatasetManifest::new(new_task);
    manifest.samples = samples;
    Ok(manifest)
}

/// Write a self-contained augmented dataset: the support samples first,
/// then every generated sample, and the manifest describing them.
pub fn export_augmented(
    task: &FewShotTask,
    source_root: &Path,
    out_dir: &Path,
    samples: &[GeneratedSample],
    provenance: Provenance,
) -> Result<DatasetManifest> {
    let mut manifest = export_task(task, source_root, out_dir)?;
    manifest.provenance = provenance;
    for s in samples {
        append_generated(&mut manifest, out_dir, s)?;
    }
    manifest.check_records()?;
    save_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

/// Write one generated sample and add its record. Returns `None` without
/// touching anything when a record for the same base, seed and key exists.
pub fn append_generated(
    manifest: &mut DatasetManifest,
    root: &Path,
    s: &GeneratedSample,
) -> Result<Option<SampleRecord>> {
    let id = generated_id(&s.base_id, s.seed, &s.sample.key);
    if manifest.samples.iter().any(|r| r.id == id) {
        return Ok(None);
    }
    s.sample.key.validate(s.region_count, usize::MAX)?;
    ensure_layout(root)?;
    let (image_path, mask_path) = write_pair(root, &id, &s.sample.image, &s.sample.mask)?;
    let record = SampleRecord {
        id,
        image_path,
        mask_path,
        origin: Origin::Generated,
        combination_key: Some(s.sample.key.clone()),
        base_id: Some(s.base_id.clone()),
        seed: Some(s.seed),
        region_count: Some(s.region_count),
        scores: s.sample.region_scores.clone(),
        extra: Extra::new(),
    };
    manifest.samples.push(record.clone());
    Ok(Some(record))
}

/// Export copy-paste baseline samples alongside the support set.
pub fn export_copy_paste(
    task: &FewShotTask,
    source_root: &Path,
    out_dir: &Path,
    samples: &[PastedSample],
    provenance: Provenance,
) -> Result<DatasetManifest> {
    let mut manifest = export_task(task, source_root, out_dir)?;
    manifest.provenance = provenance;
    for (i, s) in samples.iter().enumerate() {
        let id = format!("copy_paste_{i:05}");
        let (image_path, mask_path) = write_pair(out_dir, &id, &s.image, &s.mask)?;
        manifest.samples.push(SampleRecord {
            id,
            image_path,
            mask_path,
            origin: Origin::CopyPaste,
            combination_key: None,
            base_id: None,
            seed: None,
            region_count: None,
            scores: Vec::new(),
            extra: Extra::new(),
        });
    }
    save_manifest(&manifest, out_dir)?;
    Ok(manifest)
}
