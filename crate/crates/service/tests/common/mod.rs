#![allow(dead_code)]

use std::path::Path;

use augment_core::dataset::{save_manifest, BaseEntry, DatasetManifest, FewShotTask, SupportExample};
use augment_core::{BitMask, RasterImage, Rect};

pub fn textured(w: u32, h: u32, salt: u32) -> RasterImage {
    RasterImage::from_fn(w, h, |x, y| {
        let v = (x.wrapping_mul(7) ^ y.wrapping_mul(13)).wrapping_add(salt);
        [40 + (v % 40) as u8, 90 + (v % 30) as u8, 60 + (x % 20) as u8]
    })
    .unwrap()
}

/// Two 16x16 squares far enough apart that their windows never touch.
pub fn two_blobs(w: u32, h: u32) -> BitMask {
    let a = Rect::new(20, 20, 16, 16);
    let b = Rect::new(w - 40, h - 40, 16, 16);
    BitMask::from_fn(w, h, |x, y| a.contains_point(x, y) || b.contains_point(x, y)).unwrap()
}

/// A task directory with `k` support examples of a red object and one
/// base image `harbour` of `w`x`h` carrying `placement`.
pub fn write_task(dir: &Path, k: usize, w: u32, h: u32, placement: Option<&BitMask>) -> DatasetManifest {
    std::fs::create_dir_all(dir.join("src")).unwrap();
    let mut task = FewShotTask::new("boat");
    for i in 0..k {
        let obj = Rect::new(12 + i as u32, 12, 24, 20);
        let img = RasterImage::from_fn(48, 48, |x, y| {
            if obj.contains_point(x, y) {
                [200, 30 + (i * 10) as u8, 20]
            } else {
                [30, 80, 140]
            }
        })
        .unwrap();
        img.save(&dir.join(format!("src/support_{i}.png"))).unwrap();
        BitMask::from_rect(48, 48, &obj)
            .unwrap()
            .save(&dir.join(format!("src/support_{i}_mask.png")))
            .unwrap();
        task.support.push(SupportExample {
            image: format!("src/support_{i}.png"),
            mask: format!("src/support_{i}_mask.png"),
        });
    }
    textured(w, h, 3).save(&dir.join("src/harbour.png")).unwrap();
    let placement_mask = placement.map(|m| {
        m.save(&dir.join("src/harbour_mask.png")).unwrap();
        "src/harbour_mask.png".to_string()
    });
    task.base_pool.push(BaseEntry {
        id: "harbour".into(),
        image: "src/harbour.png".into(),
        placement_mask,
    });
    let manifest = DatasetManifest::new(task);
    save_manifest(&manifest, dir).unwrap();
    manifest
}
