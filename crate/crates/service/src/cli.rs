use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use augment_core::combine::{copy_paste_augment, random_placements, PastedSample};
use augment_core::dataset::{
    export_augmented, export_copy_paste, extract_training_pairs, load_manifest, parse_boxes, Provenance,
};
use augment_core::eval::{evaluate, render_table, IouReport};
use augment_core::{BitMask, RasterImage};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::api::{serve, AppState};
use crate::config::Settings;
use crate::pipeline::{load_runs, run_base, save_runs, BaseRun};

#[derive(Debug, Parser)]
#[command(
    name = "augment",
    version,
    about = "Reference-conditioned inpainting augmentation for few-shot segmentation"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML settings file.
    #[arg(long, global = true, env = "AUGMENT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Root seed for generation and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Override the similarity threshold.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// Override the number of variations per region.
    #[arg(long, global = true)]
    pub variations: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate variations for every base image of a task.
    Generate {
        /// Task directory containing task.json.
        #[arg(long)]
        task: PathBuf,
        /// Also generate into regions outside the coverage band.
        #[arg(long)]
        include_infeasible: bool,
    },
    /// Realize combinations of generated variations into a dataset.
    Combine {
        #[arg(long)]
        task: PathBuf,
        /// Directory written by `generate`.
        #[arg(long)]
        run: PathBuf,
        /// Total samples to realize; every combination when omitted.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Build self-supervised training pairs from detection boxes.
    ExtractPairs {
        /// Directory of `<image_id>.png` files.
        #[arg(long)]
        images: PathBuf,
        /// Sidecar with one `image_id x y w h` line per box.
        #[arg(long)]
        boxes: PathBuf,
    },
    /// Copy-paste baseline: paste support objects into base images.
    CopyPaste {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        max_instances: usize,
    },
    /// Binary IoU of predicted masks against a dataset's masks.
    Evaluate {
        /// Dataset directory containing task.json.
        #[arg(long)]
        manifest: PathBuf,
        /// `NAME=DIR` of `<sample_id>.png` prediction masks; repeatable.
        #[arg(long = "pred", required = true, value_parser = parse_pred)]
        preds: Vec<(String, PathBuf)>,
    },
    /// Run the studio backend.
    Serve {
        /// Directory whose subdirectories are task directories.
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = crate::jobs::DEFAULT_WORKERS)]
        workers: usize,
    },
}

fn parse_pred(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), dir.into())),
        _ => Err(format!("expected NAME=DIR, got {s:?}")),
    }
}

impl Common {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        if let Some(t) = self.threshold {
            s.generation.similarity_threshold = t;
        }
        if let Some(l) = self.variations {
            s.generation.variations_per_region = l;
        }
        s.validate()?;
        Ok(s)
    }

    fn out(&self) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("--out is required for this command"),
        }
    }
}

pub async fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Generate {
            task,
            include_infeasible,
        } => generate(c, task, *include_infeasible).await,
        Command::Combine { task, run, samples } => combine(c, task, run, *samples),
        Command::ExtractPairs { images, boxes } => extract_pairs(c, images, boxes),
        Command::CopyPaste {
            task,
            samples,
            max_instances,
        } => copy_paste(c, task, *samples, *max_instances),
        Command::Evaluate { manifest, preds } => evaluate_cmd(c, manifest, preds),
        Command::Serve { tasks, port, workers } => {
            let settings = c.settings()?;
            let backends = settings.backends.build()?;
            if !tasks.is_dir() {
                bail!("{} is not a directory", tasks.display());
            }
            let state = Arc::new(AppState::with_workers(tasks, settings, backends, *workers));
            serve(state, *port).await?;
            Ok(())
        }
    }
}

async fn generate(c: &Common, task_dir: &Path, include_infeasible: bool) -> Result<()> {
    let settings = c.settings()?;
    let out = c.out()?;
    let backends = settings.backends.build()?;
    let manifest = load_manifest(task_dir)?;
    let references = manifest.task.references(task_dir)?;
    let mut runs: Vec<BaseRun> = Vec::new();
    for entry in &manifest.task.base_pool {
        let Some(mask_path) = &entry.placement_mask else {
            log::warn!("base {}: no placement mask, skipped", entry.id);
            continue;
        };
        let base = RasterImage::load(&task_dir.join(&entry.image))?;
        let placement = BitMask::load(&task_dir.join(mask_path))?;
        let run = run_base(
            &entry.id,
            &base,
            &placement,
            &references,
            &settings.generation,
            settings.regions,
            &backends,
            c.seed,
            include_infeasible,
            &|_| {},
        )
        .await
        .with_context(|| format!("base {}", entry.id))?;
        let flagged = run.variations.iter().flatten().filter(|v| !v.flags.is_empty()).count();
        println!(
            "{}: {} regions, {} variations ({} flagged), {} combinations",
            run.base_id,
            run.region_count(),
            run.variations.iter().map(Vec::len).sum::<usize>(),
            flagged,
            run.combination_count()?
        );
        runs.push(run);
    }
    if runs.is_empty() {
        bail!("no base image in {} has a placement mask", task_dir.display());
    }
    std::fs::create_dir_all(out)?;
    save_runs(out, &settings.generation, &runs)?;
    Ok(())
}

fn combine(c: &Common, task_dir: &Path, run_dir: &Path, samples: Option<usize>) -> Result<()> {
    let out = c.out()?;
    let manifest = load_manifest(task_dir)?;
    let (generation, runs) = load_runs(run_dir)?;
    let mut generated = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let keys = match samples {
            None => run.all_keys()?,
            Some(total) => {
                // Spread the budget over the bases, remainder to the first ones.
                let share = total / runs.len() + usize::from(i < total % runs.len());
                run.sample_keys(share, c.seed ^ i as u64, |_| true)?
            }
        };
        for key in &keys {
            generated.push(run.generated(key)?);
        }
    }
    let provenance = Provenance::for_run(c.seed, &generation);
    let m = export_augmented(&manifest.task, task_dir, out, &generated, provenance)?;
    println!(
        "{} samples ({} generated) written to {}",
        m.samples.len(),
        generated.len(),
        out.display()
    );
    Ok(())
}

fn extract_pairs(c: &Common, images: &Path, boxes: &Path) -> Result<()> {
    let out = c.out()?;
    let text = std::fs::read_to_string(boxes).with_context(|| boxes.display().to_string())?;
    let table = parse_boxes(&text)?;
    for sub in ["masked", "refs", "masks", "targets"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let mut count = 0;
    for (image_id, rects) in &table {
        let image = RasterImage::load(&images.join(format!("{image_id}.png")))?;
        let pairs = extract_training_pairs(&image, rects).with_context(|| format!("image {image_id}"))?;
        for (i, p) in pairs.iter().enumerate() {
            let name = format!("{image_id}_{i}.png");
            p.masked_base.save(&out.join("masked").join(&name))?;
            p.reference.save(&out.join("refs").join(&name))?;
            p.mask.save(&out.join("masks").join(&name))?;
            p.target.save(&out.join("targets").join(&name))?;
            count += 1;
        }
    }
    println!(
        "{count} training pairs from {} images written to {}",
        table.len(),
        out.display()
    );
    Ok(())
}

fn copy_paste(c: &Common, task_dir: &Path, samples: usize, max_instances: usize) -> Result<()> {
    let out = c.out()?;
    if max_instances == 0 {
        bail!("--max-instances must be at least 1");
    }
    let manifest = load_manifest(task_dir)?;
    let task = &manifest.task;
    if task.base_pool.is_empty() {
        bail!("task has no base images");
    }
    // Instances are the support objects cut out at their bounding boxes.
    let instances: Vec<(RasterImage, BitMask)> = task
        .load_support(task_dir)?
        .into_iter()
        .filter_map(|(img, mask)| {
            let b = mask.bbox()?;
            Some((img.crop(&b).ok()?, mask.crop(&b).ok()?))
        })
        .collect();
    if instances.is_empty() {
        bail!("every support mask is empty");
    }
    let bases = task
        .base_pool
        .iter()
        .map(|b| RasterImage::load(&task_dir.join(&b.image)))
        .collect::<augment_core::Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut out_samples: Vec<PastedSample> = Vec::with_capacity(samples);
    for i in 0..samples {
        let base = &bases[i % bases.len()];
        let n = rng.random_range(1..=max_instances);
        let chosen: Vec<(RasterImage, BitMask)> = (0..n)
            .map(|_| instances[rng.random_range(0..instances.len())].clone())
            .collect();
        let sizes: Vec<(u32, u32)> = chosen.iter().map(|(img, _)| img.dimensions()).collect();
        let placements = random_placements(base.width(), base.height(), &sizes, rng.random());
        let empty = BitMask::empty(base.width(), base.height())?;
        out_samples.push(copy_paste_augment(base, &empty, &chosen, &placements)?);
    }
    let m = export_copy_paste(
        task,
        task_dir,
        out,
        &out_samples,
        Provenance {
            seed: Some(c.seed),
            ..Default::default()
        },
    )?;
    println!(
        "{} samples ({samples} copy-paste) written to {}",
        m.samples.len(),
        out.display()
    );
    Ok(())
}

fn evaluate_cmd(c: &Common, dataset: &Path, preds: &[(String, PathBuf)]) -> Result<()> {
    let manifest = load_manifest(dataset)?;
    let mut rows: Vec<(String, Vec<IouReport>)> = Vec::new();
    for (name, dir) in preds {
        let mut predictions = Vec::new();
        for s in &manifest.samples {
            let p = dir.join(format!("{}.png", s.id));
            if p.is_file() {
                predictions.push((s.id.clone(), BitMask::load(&p)?));
            }
        }
        let report = evaluate(&predictions, &manifest, dataset)?;
        if !report.missing.is_empty() {
            log::warn!(
                "{name}: {} samples without a prediction scored as empty",
                report.missing.len()
            );
        }
        rows.push((name.clone(), vec![report]));
    }
    print!("{}", render_table(&rows));
    for (name, reports) in &rows {
        let r = &reports[0];
        println!(
            "{name}: aggregate IoU {:.4}, mean per-image IoU {:.4}",
            r.aggregate_iou, r.mean_iou
        );
    }
    if let Some(out) = &c.out {
        std::fs::create_dir_all(out)?;
        let path = out.join("iou_report.json");
        let json: Vec<_> = rows
            .iter()
            .map(|(name, r)| serde_json::json!({"method": name, "report": r[0]}))
            .collect();
        std::fs::write(&path, serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(())
}
