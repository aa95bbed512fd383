//! Binary IoU evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::imaging::BitMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn between(pred: &BitMask, gt: &BitMask) -> Result<Self> {
        if pred.dimensions() != gt.dimensions() {
            return Err(Error::Geometry(format!(
                "prediction {}x{} and ground truth {}x{} differ",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        let (mut intersection, mut union) = (0, 0);
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            intersection += (p && g) as u64;
            union += (p || g) as u64;
        }
        Ok(IouCounts { intersection, union })
    }

    /// 1.0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &BitMask, gt: &BitMask) -> Result<f64> {
    Ok(IouCounts::between(pred, gt)?.iou())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageIou {
    pub id: String,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
    /// Both masks empty; IoU defined as 1.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub both_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub class_name: String,
    pub per_image: Vec<ImageIou>,
    /// Summed intersection over summed union.
    pub aggregate_iou: f64,
    /// Unweighted mean of per-image IoUs, for comparison.
    pub mean_iou: f64,
    /// Samples with no prediction, scored as empty masks.
    pub missing: Vec<String>,
}

/// Score `(id, prediction)` pairs against `(id, ground truth)` pairs.
/// Ground-truth ids without a prediction count as empty predictions.
pub fn evaluate_masks(
    class_name: &str,
    predictions: &[(String, BitMask)],
    ground_truth: &[(String, BitMask)],
) -> Result<IouReport> {
    let gt_ids: BTreeSet<&str> = ground_truth.iter().map(|(id, _)| id.as_str()).collect();
    let mut preds: BTreeMap<&str, &BitMask> = BTreeMap::new();
    for (id, mask) in predictions {
        if !gt_ids.contains(id.as_str()) {
            return Err(Error::Validation(format!("prediction for unknown sample {id:?}")));
        }
        if preds.insert(id, mask).is_some() {
            return Err(Error::Validation(format!("duplicate prediction for {id:?}")));
        }
    }
    let mut per_image = Vec::with_capacity(ground_truth.len());
    let mut missing = Vec::new();
    let (mut inter, mut uni) = (0u64, 0u64);
    for (id, gt) in ground_truth {
        let counts = match preds.get(id.as_str()) {
            Some(p) => IouCounts::between(p, gt)?,
            None => {
                missing.push(id.clone());
                IouCounts::between(&BitMask::empty(gt.width(), gt.height())?, gt)?
            }
        };
        inter += counts.intersection;
        uni += counts.union;
        per_image.push(ImageIou {
            id: id.clone(),
            intersection: counts.intersection,
            union: counts.union,
            iou: counts.iou(),
            both_empty: counts.union == 0,
        });
    }
    let aggregate_iou = IouCounts {
        intersection: inter,
        union: uni,
    }
    .iou();
    let mean_iou = if per_image.is_empty() {
        1.0
    } else {
        per_image.iter().map(|r| r.iou).sum::<f64>() / per_image.len() as f64
    };
    Ok(IouReport {
        class_name: class_name.to_string(),
        per_image,
        aggregate_iou,
        mean_iou,
        missing,
    })
}

/// Evaluate predictions against every sample listed in `manifest`, whose
/// paths are resolved against `root`.
pub fn evaluate(predictions: &[(String, BitMask)], manifest: &DatasetManifest, root: &Path) -> Result<IouReport> {
    let gt = manifest
        .samples
        .iter()
        .map(|s| Ok((s.id.clone(), BitMask::load(&root.join(&s.mask_path))?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_masks(&manifest.task.class_name, predictions, &gt)
}

/// Plain-text table with one row per method and one column per class,
/// values as IoU percentages. Missing cells print as `-`.
pub fn render_table(rows: &[(String, Vec<IouReport>)]) -> String {
    let mut classes: Vec<&str> = Vec::new();
    for (_, reports) in rows {
        for r in reports {
            if !classes.contains(&r.class_name.as_str()) {
                classes.push(&r.class_name);
            }
        }
    }
    let method_w = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max("Method".len());
    let col_w: Vec<usize> = classes.iter().map(|c| c.len().max(6)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<method_w$}", "Method");
    for (c, w) in classes.iter().zip(&col_w) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    let rule = method_w + col_w.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for (method, reports) in rows {
        let _ = write!(out, "{method:<method_w$}");
        for (c, w) in classes.iter().zip(&col_w) {
            match reports.iter().find(|r| r.class_name == *c) {
                Some(r) => {
                    let _ = write!(out, "  {:>w$.2}", r.aggregate_iou * 100.0);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
