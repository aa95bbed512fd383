//! Acceptance suite. Runs every criterion with mock backends and prints one
//! PASS/FAIL line each; exits non-zero if any fails.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use augment_core::backend::mock::{
    orthogonal_embedder, FnSegmenter, HistogramEmbedder, LuminanceSegmenter, StampInpainter,
};
use augment_core::backend::{Backends, InpaintRequest, InpaintResponse, Inpainter, SegmentRequest};
use augment_core::combine::{count_combinations, enumerate_keys, sample_keys, CombinationKey};
use augment_core::dataset::{extract_training_pairs, load_manifest};
use augment_core::engine::{generate_region_variations, refine_mask, GenerationConfig, VariationFlag};
use augment_core::eval::iou;
use augment_core::{dilate, extract_regions, BitMask, CoverageBand, RasterImage, Rect, RunSeed};
use augment_service::api::{router, AppState};
use augment_service::config::Settings;
use augment_service::pipeline::{generation_regions, run_base, BaseRun};
use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

const COUNT_BUDGET: Duration = Duration::from_secs(1);
const E2E_BUDGET: Duration = Duration::from_secs(10);
const SAMPLE_BUDGET: Duration = Duration::from_secs(1);
const RANDOM_PIPELINES: usize = 50;
const IOU_PAIRS: usize = 1000;
const PAIR_CASES: usize = 100;
const DILATION: u32 = 5;
const FALLBACK_FRACTION: f64 = 0.2;
const MAX_ATTEMPTS: usize = 5;
const SCALE_KEYS: usize = 1000;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Every assignment of a digit in 0..=L to each region, minus the all-zero
/// one; digit d > 0 selects variation d - 1.
fn brute_force_keys(n: usize, l: usize) -> BTreeSet<CombinationKey> {
    let mut out = BTreeSet::new();
    let total = (l + 1).pow(n as u32);
    for code in 1..total {
        let (mut bits, mut choices, mut c) = (0u64, Vec::new(), code);
        for region in 0..n {
            let d = c % (l + 1);
            c /= l + 1;
            if d > 0 {
                bits |= 1 << region;
                choices.push((d - 1) as u32);
            }
        }
        out.insert(CombinationKey::new(bits, choices).unwrap());
    }
    out
}

fn count_identity() -> Outcome {
    let started = Instant::now();
    for n in 1..=4usize {
        for l in 1..=3usize {
            let listed: Vec<CombinationKey> = enumerate_keys(n, l).map_err(|e| e.to_string())?.collect();
            let set: BTreeSet<CombinationKey> = listed.iter().cloned().collect();
            let sum: u64 = (1..=n as u64)
                .map(|k| binomial(n as u64, k) * (l as u64).pow(k as u32))
                .sum();
            let closed = (l as u64 + 1).pow(n as u32) - 1;
            let counted = count_combinations(n, l).map_err(|e| e.to_string())?;
            ensure!(listed.len() == set.len(), "N={n} L={l}: enumeration repeats keys");
            ensure!(
                set == brute_force_keys(n, l),
                "N={n} L={l}: enumeration differs from brute force"
            );
            ensure!(
                set.len() as u64 == sum && sum == closed && counted == closed,
                "N={n} L={l}: |keys|={} sum={sum} closed={closed} count={counted}",
                set.len()
            );
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < COUNT_BUDGET, "took {elapsed:?}");
    Ok(format!("N 1..4 x L 1..3 exact, {elapsed:.2?}"))
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> Value {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    serde_json::from_slice(&bytes).unwrap_or(Value::Null)
}

/// Generate with L=2, K=1 on a two-blob mask, then accept every key.
/// Returns (variations, combinations, realized keys).
async fn e2e_once(root: &Path) -> Result<(usize, u64, usize), String> {
    let blobs = common::two_blobs(128, 128);
    common::write_task(&root.join("boats"), 1, 128, 128, Some(&blobs));
    let app = router(Arc::new(AppState::new(root, Settings::default(), Backends::mock())));
    let session = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"task_id": "boats", "base_id": "harbour", "seed": 2024, "config": {"variations_per_region": 2}})),
    )
    .await;
    let sid = session["id"].as_str().ok_or(format!("no session: {session}"))?;
    let job = call(&app, "POST", &format!("/sessions/{sid}/generate"), None).await;
    let jid = job["id"].as_str().ok_or(format!("no job: {job}"))?.to_string();
    let job = loop {
        let j = call(&app, "GET", &format!("/jobs/{jid}"), None).await;
        match j["state"].as_str() {
            Some("done") => break j,
            Some("failed") => return Err(format!("job failed: {}", j["error"])),
            _ => tokio::time::sleep(Duration::from_millis(5)).await,
        }
    };
    let variations = job["results"]["variations"].as_array().map_or(0, Vec::len);
    let combinations = job["results"]["combinations"].as_u64().unwrap_or(0);
    let keys = call(&app, "GET", &format!("/jobs/{jid}/keys?count=1000"), None).await;
    let keys = keys["keys"].as_array().cloned().unwrap_or_default();
    let mut realized = 0;
    for k in &keys {
        let out = call(
            &app,
            "POST",
            &format!("/jobs/{jid}/decisions"),
            Some(json!({"key": k, "accept": true})),
        )
        .await;
        if out["applied"] == true {
            realized += 1;
        } else {
            return Err(format!("key {k} not realized: {out}"));
        }
    }
    Ok((variations, combinations, realized))
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

async fn end_to_end() -> Outcome {
    let started = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = e2e_once(a.path()).await?;
    let second = e2e_once(b.path()).await?;
    let elapsed = started.elapsed();
    ensure!(first == (4, 8, 8), "variations/combinations/realized = {first:?}");
    ensure!(second == first, "rerun gave {second:?}");
    let manifest = load_manifest(&a.path().join("boats")).map_err(|e| e.to_string())?;
    let keys: HashSet<_> = manifest.generated().map(|r| r.combination_key.clone()).collect();
    ensure!(keys.len() == 8, "manifest holds {} distinct keys", keys.len());
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    ensure!(ta.len() == tb.len(), "file counts differ");
    for ((pa, da), (pb, db)) in ta.iter().zip(&tb) {
        ensure!(pa == pb && da == db, "{pa} differs between runs");
    }
    ensure!(elapsed < E2E_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "4 variations, 8 combinations, {} files byte-identical across reruns, {elapsed:.2?}",
        ta.len()
    ))
}

struct RandomRun {
    placement: BitMask,
    run: BaseRun,
    cfg: GenerationConfig,
    segmenter: LuminanceSegmenter,
}

fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32) -> BitMask {
    let blobs: Vec<Rect> = (0..rng.random_range(1..=3))
        .map(|_| {
            let bw = rng.random_range(3..=w / 3);
            let bh = rng.random_range(3..=h / 3);
            Rect::new(rng.random_range(0..=w - bw), rng.random_range(0..=h - bh), bw, bh)
        })
        .collect();
    BitMask::from_fn(w, h, |x, y| blobs.iter().any(|b| b.contains_point(x, y))).unwrap()
}

async fn random_runs() -> Vec<RandomRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let mut out = Vec::new();
    for i in 0..RANDOM_PIPELINES {
        let (w, h) = (rng.random_range(48..=160), rng.random_range(48..=160));
        let base = common::textured(w, h, i as u32);
        let placement = random_mask(&mut rng, w, h);
        let refs: Vec<RasterImage> = (0..rng.random_range(1..=3))
            .map(|k| {
                let c = [rng.random(), rng.random(), rng.random()];
                RasterImage::from_fn(rng.random_range(4..=24), rng.random_range(4..=24), |x, y| {
                    if (x + y + k) % 3 == 0 {
                        [c[0], c[1], 255 - c[2]]
                    } else {
                        c
                    }
                })
                .unwrap()
            })
            .collect();
        let cfg = GenerationConfig {
            variations_per_region: rng.random_range(1..=3),
            similarity_threshold: rng.random_range(-0.2..=0.95),
            max_attempts: rng.random_range(1..=3),
            dilation_radius: DILATION,
            min_refined_fraction: FALLBACK_FRACTION,
        };
        let segmenter = LuminanceSegmenter {
            threshold: rng.random_range(4..=64),
        };
        let backends = Backends::new(
            Arc::new(StampInpainter {
                jitter: rng.random_range(0..=60),
            }),
            Arc::new(HistogramEmbedder),
            Arc::new(segmenter.clone()),
        );
        let run = run_base(
            &format!("b{i}"),
            &base,
            &placement,
            &refs,
            &cfg,
            CoverageBand::default(),
            &backends,
            rng.random(),
            true,
            &|_| {},
        )
        .await
        .unwrap();
        out.push(RandomRun {
            placement,
            run,
            cfg,
            segmenter,
        });
    }
    out
}

fn unmasked_preservation(runs: &[RandomRun]) -> Outcome {
    let mut checked = 0usize;
    for (i, r) in runs.iter().enumerate() {
        let keys = if r.run.combination_count().unwrap() <= 64 {
            r.run.all_keys().unwrap()
        } else {
            r.run.sample_keys(64, i as u64, |_| true).unwrap()
        };
        for key in keys {
            let sample = r.run.realize(&key).map_err(|e| e.to_string())?;
            let (w, h) = r.run.base.dimensions();
            for y in 0..h {
                for x in 0..w {
                    if !r.placement.get(x, y) {
                        ensure!(
                            sample.image.pixel(x, y) == r.run.base.pixel(x, y),
                            "pipeline {i}, key {key}: pixel ({x}, {y}) changed"
                        );
                    }
                }
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{} pipelines, {checked} composited samples, 0 unmasked pixels changed",
        runs.len()
    ))
}

fn coverage_heuristic() -> Outcome {
    let band = CoverageBand::default();
    let (mut feasible, mut flagged) = (0, 0);
    // Oversized blobs cannot reach the band inside a 256x256 image.
    for s in (8..=64u32).chain([160, 200, 240]) {
        let placements = [(128 - s / 2, 128 - s / 2), (0, 0), (256 - s, 100.min(256 - s))];
        for (x, y) in placements {
            let mask = BitMask::from_rect(256, 256, &Rect::new(x, y, s, s)).unwrap();
            let base = RasterImage::filled(256, 256, [0; 3]).unwrap();
            let regions = extract_regions(&base, &mask, band).map_err(|e| e.to_string())?;
            ensure!(
                regions.len() == 1,
                "blob {s}x{s} at ({x},{y}) gave {} regions",
                regions.len()
            );
            let r = &regions[0];
            let recomputed = r.region_mask.count_ones() as f64 / r.rect.area() as f64;
            ensure!(
                recomputed == r.coverage,
                "blob {s}: stated coverage {} vs {recomputed}",
                r.coverage
            );
            ensure!(
                r.region_mask.count_ones() == (s * s) as u64,
                "blob {s}: window lost pixels"
            );
            if r.feasible {
                ensure!(
                    (0.15..=0.30).contains(&r.coverage),
                    "blob {s} at ({x},{y}): feasible with coverage {}",
                    r.coverage
                );
                feasible += 1;
            } else {
                ensure!(
                    generation_regions(&regions, false).is_empty(),
                    "infeasible blob {s} would be generated into"
                );
                flagged += 1;
            }
        }
    }
    ensure!(flagged > 0, "no blob was flagged infeasible");
    Ok(format!(
        "{feasible} feasible in [0.15, 0.30], {flagged} flagged infeasible"
    ))
}

async fn mask_containment(runs: &[RandomRun]) -> Outcome {
    let mut variations = 0;
    let mut fallbacks = 0;
    for (i, r) in runs.iter().enumerate() {
        for (region, per_region) in r.run.regions.iter().zip(&r.run.variations) {
            let halo = dilate(&region.region_mask, r.cfg.dilation_radius);
            for v in per_region {
                ensure!(
                    v.refined_mask.is_subset_of(&halo),
                    "pipeline {i}: refined mask leaves the dilated region"
                );
                // The mock segmenter is pure, so rerunning it reproduces what
                // the engine saw.
                let req = SegmentRequest {
                    image: v.image.clone(),
                    prompt_box: region.object_box(),
                    hint_mask: Some(region.region_mask.clone()),
                };
                let seg = r.segmenter.run(&req).map_err(|e| e.to_string())?.mask;
                let kept = seg.intersection(&halo).unwrap().count_ones() as f64;
                let expect_fallback = kept < FALLBACK_FRACTION * region.region_mask.count_ones() as f64;
                ensure!(
                    v.has_flag(VariationFlag::MaskFallback) == expect_fallback,
                    "pipeline {i}: fallback flag {} but kept area {kept}",
                    v.has_flag(VariationFlag::MaskFallback)
                );
                if expect_fallback {
                    ensure!(
                        v.refined_mask == region.region_mask,
                        "pipeline {i}: fallback is not the region mask"
                    );
                    fallbacks += 1;
                }
                variations += 1;
            }
        }
    }
    // Rigged segmenter: sweep the kept area across the fallback boundary.
    let region_mask = BitMask::from_rect(40, 40, &Rect::new(10, 10, 20, 10)).unwrap();
    let region = augment_core::RegionSpec {
        index: 0,
        rect: Rect::new(0, 0, 40, 40),
        coverage: 200.0 / 1600.0,
        region_mask: region_mask.clone(),
        feasible: false,
    };
    let cfg = GenerationConfig::default();
    let candidate = RasterImage::filled(40, 40, [9; 3]).unwrap();
    let mut boundary_cases = 0;
    for kept in 30..=50u32 {
        // The first `kept` region pixels in raster order, plus a row the
        // dilated region never reaches.
        let seg = FnSegmenter(move |_: &SegmentRequest| {
            BitMask::from_fn(40, 40, |x, y| {
                let inside = (10..30).contains(&x) && (10..20).contains(&y) && (y - 10) * 20 + (x - 10) < kept;
                inside || y == 39
            })
            .unwrap()
        });
        let (mask, flags) = refine_mask(&candidate, &region, &cfg, &seg)
            .await
            .map_err(|e| e.to_string())?;
        let fallback = flags.contains(&VariationFlag::MaskFallback);
        ensure!(fallback == (kept < 40), "kept {kept}: fallback {fallback}");
        ensure!(
            mask.is_subset_of(&dilate(&region_mask, cfg.dilation_radius)),
            "kept {kept}: mask escapes halo"
        );
        ensure!(
            fallback || mask.count_ones() == kept as u64,
            "kept {kept}: refined area {}",
            mask.count_ones()
        );
        boundary_cases += 1;
    }
    Ok(format!(
        "{variations} variations contained ({fallbacks} fallbacks, all exact), {boundary_cases} rigged boundary cases exact"
    ))
}

/// Inpainter that records the seed of every request.
struct SeedLog {
    inner: StampInpainter,
    seeds: Mutex<Vec<u64>>,
}

#[async_trait]
impl Inpainter for SeedLog {
    async fn inpaint(&self, req: &InpaintRequest) -> augment_core::Result<InpaintResponse> {
        self.seeds.lock().unwrap().push(req.seed);
        self.inner.inpaint(req).await
    }
}

async fn regeneration_bound() -> Outcome {
    let base = common::textured(96, 96, 7);
    let mask = common::two_blobs(96, 96);
    let regions = extract_regions(&base, &mask, CoverageBand::default()).unwrap();
    let refs = vec![
        RasterImage::filled(10, 10, [220, 20, 20]).unwrap(),
        RasterImage::filled(6, 9, [20, 220, 20]).unwrap(),
    ];
    let log = Arc::new(SeedLog {
        inner: StampInpainter::default(),
        seeds: Mutex::new(Vec::new()),
    });
    let backends = Backends::new(
        log.clone(),
        Arc::new(orthogonal_embedder(refs.clone())),
        Arc::new(LuminanceSegmenter::default()),
    );
    let cfg = GenerationConfig {
        variations_per_region: 3,
        similarity_threshold: 0.5,
        max_attempts: MAX_ATTEMPTS,
        ..Default::default()
    };
    let seed = RunSeed::new(77);
    let mut total = 0;
    for region in &regions {
        let vars = generate_region_variations(region, &base, &refs, &cfg, &backends, seed)
            .await
            .map_err(|e| e.to_string())?;
        for v in &vars {
            ensure!(v.attempts_used == MAX_ATTEMPTS, "attempts_used {}", v.attempts_used);
            ensure!(
                v.has_flag(VariationFlag::BelowThreshold),
                "variation not flagged below_threshold"
            );
            total += 1;
        }
    }
    let seeds = log.seeds.lock().unwrap().clone();
    ensure!(
        seeds.len() == total * MAX_ATTEMPTS,
        "{} inpaint calls for {total} variations",
        seeds.len()
    );
    for region in &regions {
        for l in 0..cfg.variations_per_region {
            let calls = (0..MAX_ATTEMPTS)
                .filter(|&a| seeds.contains(&seed.derive(region.index, l, a)))
                .count();
            ensure!(
                calls == MAX_ATTEMPTS,
                "region {} variation {l}: {calls} distinct attempts",
                region.index
            );
        }
    }
    Ok(format!(
        "{total} variations x {MAX_ATTEMPTS} calls each, all below_threshold"
    ))
}

fn iou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for i in 0..IOU_PAIRS {
        let (pa, pb) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let a = BitMask::from_fn(16, 16, |_, _| rng.random_bool(pa)).unwrap();
        let b = BitMask::from_fn(16, 16, |_, _| rng.random_bool(pb)).unwrap();
        let (mut inter, mut uni) = (0u32, 0u32);
        for y in 0..16 {
            for x in 0..16 {
                inter += (a.get(x, y) && b.get(x, y)) as u32;
                uni += (a.get(x, y) || b.get(x, y)) as u32;
            }
        }
        let oracle = if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
        let got = iou(&a, &b).map_err(|e| e.to_string())?;
        ensure!(got == oracle, "pair {i}: {got} vs oracle {oracle}");
        ensure!(iou(&b, &a).unwrap() == got, "pair {i}: not symmetric");
        ensure!(
            iou(&a, &a).unwrap() == 1.0 && iou(&b, &b).unwrap() == 1.0,
            "pair {i}: self IoU below 1"
        );
    }
    Ok(format!("{IOU_PAIRS} random 16x16 pairs exact, symmetric, self IoU 1"))
}

fn training_pairs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..PAIR_CASES {
        let (w, h) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let image = RasterImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
        let (bw, bh) = (rng.random_range(1..=w), rng.random_range(1..=h));
        let rect = Rect::new(rng.random_range(0..=w - bw), rng.random_range(0..=h - bh), bw, bh);
        let pair = extract_training_pairs(&image, &[rect])
            .map_err(|e| e.to_string())?
            .remove(0);
        let mut rebuilt = pair.masked_base.clone();
        rebuilt.paste(&pair.reference, rect.x, rect.y).unwrap();
        ensure!(rebuilt == pair.target, "case {i}: {rect} does not reconstruct");
        ensure!(pair.target == image, "case {i}: target is not the source");
        ensure!(
            pair.mask == BitMask::from_rect(w, h, &rect).unwrap(),
            "case {i}: mask is not the box"
        );
    }
    Ok(format!("{PAIR_CASES} random boxes reconstruct bit-exactly"))
}

fn scale_target() -> Outcome {
    let started = Instant::now();
    let keys = sample_keys(4, 8, SCALE_KEYS, 1234).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let distinct: HashSet<_> = keys.iter().collect();
    ensure!(keys.len() == SCALE_KEYS, "{} keys", keys.len());
    ensure!(distinct.len() == SCALE_KEYS, "{} distinct keys", distinct.len());
    for k in &keys {
        k.validate(4, 8).map_err(|e| e.to_string())?;
    }
    ensure!(
        sample_keys(4, 8, SCALE_KEYS, 1234).unwrap() == keys,
        "same seed, different keys"
    );
    ensure!(elapsed < SAMPLE_BUDGET, "took {elapsed:?}");
    Ok(format!("{SCALE_KEYS} distinct keys for N=4, L=8 in {elapsed:.2?}"))
}

fn report(results: &mut Vec<(String, Outcome)>, name: &str, f: impl FnOnce() -> Outcome) {
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match &outcome {
        Ok(d) => println!("PASS  {name}: {d}"),
        Err(e) => println!("FAIL  {name}: {e}"),
    }
    results.push((name.to_string(), outcome));
}

fn main() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let mut results = Vec::new();
    println!("acceptance suite");
    report(&mut results, "combination count identity", count_identity);
    report(&mut results, "end-to-end mock run", || rt.block_on(end_to_end()));
    let runs = rt.block_on(random_runs());
    report(&mut results, "unmasked pixel preservation", || {
        unmasked_preservation(&runs)
    });
    report(&mut results, "coverage heuristic", coverage_heuristic);
    report(&mut results, "mask containment and fallback", || {
        rt.block_on(mask_containment(&runs))
    });
    report(&mut results, "regeneration bound", || rt.block_on(regeneration_bound()));
    report(&mut results, "IoU oracle equivalence", iou_oracle);
    report(&mut results, "training-pair round trip", training_pairs);
    report(&mut results, "key sampling scale", scale_target);
    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
