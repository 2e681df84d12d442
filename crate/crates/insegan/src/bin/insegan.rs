//! Batch command-line interface: dataset generation, training, inference,
//! evaluation, ablation sweeps, and figure grids.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use insegan::eval::{kmeans_segment, miou, spectral_segment, EvalReport, SceneScore};
use insegan::inference::{clean_mask, read_mask, segment, write_mask, MaskSidecar, DEFAULT_MIN_AREA, DEFAULT_TAU_OFFSET};
use insegan::losses::{AlignMode, EncoderLossWeights};
use insegan::nets::{GeneratorVariant, NetConfig};
use insegan::scenegen::{build_dataset, Dataset, DatasetConfig, ShapeKind, ShapeSpec};
use insegan::training::{fit, load_checkpoint, save_checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "insegan", about = "Unsupervised instance segmentation of identical objects in depth images", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-instance depth dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Segment a dataset split with a trained checkpoint.
    Infer(InferArgs),
    /// Score predictions (or classical baselines) against ground truth.
    Eval(EvalArgs),
    /// Run the encoder-loss ablation sweep.
    Ablate(AblateArgs),
    /// Emit qualitative figure grids for a few scenes.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "box")]
    shape: String,
    /// Shape bounding-box extents in bin units, comma separated.
    #[arg(long, default_value = "0.2,0.2,0.1", value_delimiter = ',')]
    dims: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    bin_extent: Option<f64>,
    #[arg(long)]
    val_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    /// Pick the test split at random instead of the K-Means-hardest scenes.
    #[arg(long)]
    no_hard_test: bool,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f32,
    #[arg(long, default_value = "3d")]
    variant: String,
    #[arg(long, default_value = "ot")]
    align: String,
    /// Active encoder-loss terms: a, ai, or aip.
    #[arg(long, default_value = "aip")]
    losses: String,
    /// Use width-reduced networks (same external contract).
    #[arg(long)]
    narrow: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
    #[arg(long)]
    auto_reset: bool,
    /// Resume from an existing checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Segmentation threshold; default = background level + 0.05.
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
    min_area: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted masks written by `infer`.
    #[arg(long, conflicts_with = "baseline")]
    pred: Option<PathBuf>,
    /// Score a classical baseline instead: kmeans or spectral.
    #[arg(long)]
    baseline: Option<String>,
    /// Dataset directory holding the ground truth.
    #[arg(long, alias = "gt")]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional path for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated loss configurations to sweep.
    #[arg(long, default_value = "a,ai,aip", value_delimiter = ',')]
    losses: Vec<String>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value = "3d")]
    variant: String,
    #[arg(long)]
    narrow: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the training configs without running them.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scene indices to render, comma separated.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    scenes: Vec<usize>,
    #[arg(long)]
    tau: Option<f32>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::Plot(a) => plot(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let kind: ShapeKind = a.shape.parse().map_err(anyhow::Error::msg)?;
    if a.dims.len() != 3 {
        bail!("--dims needs exactly 3 values, got {}", a.dims.len());
    }
    let shape = ShapeSpec::new(kind, [a.dims[0], a.dims[1], a.dims[2]])?;
    let mut cfg = DatasetConfig::new(shape, a.n, a.count, a.seed);
    if let Some(e) = a.bin_extent {
        cfg.bin_extent = e;
    }
    if let Some(v) = a.val_count {
        cfg.val_count = v;
    }
    if let Some(t) = a.test_count {
        cfg.test_count = t;
    }
    cfg.hard_test = !a.no_hard_test;
    cfg.noise_sigma = a.noise_sigma;
    let ds = build_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} scenes to {} (train {}, val {}, test {})",
        ds.manifest.count,
        a.out.display(),
        ds.manifest.splits.train.len(),
        ds.manifest.splits.val.len(),
        ds.manifest.splits.test.len()
    );
    Ok(())
}

fn loss_weights(spec: &str) -> Result<EncoderLossWeights> {
    Ok(match spec {
        "a" => EncoderLossWeights { lambda_intermediate: 0.0, lambda_pose: 0.0 },
        "ai" => EncoderLossWeights { lambda_intermediate: 1.0, lambda_pose: 0.0 },
        "aip" => EncoderLossWeights::default(),
        other => bail!("unknown loss configuration `{other}` (expected a|ai|aip)"),
    })
}

fn train_config(
    ds: &Dataset,
    variant: &str,
    align: &str,
    losses: &str,
    narrow: bool,
    epochs: usize,
    batch_size: usize,
    lr: f32,
    seed: u64,
    checkpoint_every: usize,
    auto_reset: bool,
) -> Result<TrainConfig> {
    let variant: GeneratorVariant = variant.parse().map_err(anyhow::Error::msg)?;
    let align: AlignMode = align.parse().map_err(anyhow::Error::msg)?;
    let net = if narrow {
        NetConfig::narrow(ds.manifest.n_instances)
    } else {
        NetConfig { n_instances: ds.manifest.n_instances, ..NetConfig::default() }
    };
    Ok(TrainConfig {
        net,
        variant,
        align,
        weights: loss_weights(losses)?,
        lr,
        batch_size,
        epochs,
        checkpoint_every,
        seed,
        auto_reset,
        ..TrainConfig::default()
    })
}

fn load_split_images(ds: &Dataset, split: &str) -> Result<(Vec<usize>, Vec<Array2<f32>>)> {
    let idxs: Vec<usize> = match split {
        "train" => ds.manifest.splits.train.clone(),
        "val" => ds.manifest.splits.val.clone(),
        "test" => ds.manifest.splits.test.clone(),
        "all" => (0..ds.manifest.count).collect(),
        other => bail!("unknown split `{other}` (expected train|val|test|all)"),
    };
    let mut imgs = Vec::with_capacity(idxs.len());
    for &i in &idxs {
        imgs.push(ds.load_normalized(i)?);
    }
    Ok((idxs, imgs))
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let cfg = train_config(
        &ds,
        &a.variant,
        &a.align,
        &a.losses,
        a.narrow,
        a.epochs,
        a.batch_size,
        a.lr,
        a.seed,
        a.checkpoint_every,
        a.auto_reset,
    )?;
    let mut trainer = match &a.resume {
        Some(p) => load_checkpoint(p)?,
        None => Trainer::new(cfg),
    };
    let (_, images) = load_split_images(&ds, "train")?;
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    fit(&mut trainer, &images, &a.out, |t, rec| {
        println!(
            "epoch {:4}  L_D {:.4}  L_G {:.4}  L_E^a {:.4}  L_E^i {:.4}  L_E^p {:.4}  ({:.1}s)",
            rec.epoch,
            rec.mean.loss_d,
            rec.mean.loss_g,
            rec.mean.loss_e_align,
            rec.mean.loss_e_intermediate,
            rec.mean.loss_e_pose,
            rec.wall_time_s
        );
        let _ = t;
    })?;
    println!("done; artifacts in {}", a.out.display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let trainer = load_checkpoint(&a.checkpoint)?;
    let tau = a.tau.unwrap_or(ds.normalized_floor() + DEFAULT_TAU_OFFSET);
    let (idxs, images) = load_split_images(&ds, &a.split)?;
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    for (&i, img) in idxs.iter().zip(&images) {
        let r = segment(img, &trainer.gen, &trainer.enc, tau)?;
        let cleaned = clean_mask(r.mask.view(), a.min_area);
        let sidecar = MaskSidecar {
            tau,
            n_instances: trainer.cfg.net.n_instances,
            checkpoint: a.checkpoint.display().to_string(),
        };
        write_mask(&a.out.join(format!("scene_{i:06}.png")), cleaned.view(), &sidecar)?;
    }
    println!("wrote {} masks to {}", idxs.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let (idxs, _) = load_split_images(&ds, &a.split)?;
    let mut scores = Vec::new();
    let method;
    let mut checkpoint = String::from("-");
    match (&a.pred, a.baseline.as_deref()) {
        (Some(pred_dir), None) => {
            method = "insegan".to_string();
            for &i in &idxs {
                let gts = ds.gt_masks(i)?;
                if gts.is_empty() {
                    continue;
                }
                let path = pred_dir.join(format!("scene_{i:06}.png"));
                let mask = read_mask(&path)?;
                if checkpoint == "-" {
                    if let Ok(text) = std::fs::read_to_string(path.with_extension("png.json")) {
                        if let Ok(sc) = serde_json::from_str::<MaskSidecar>(&text) {
                            checkpoint = sc.checkpoint;
                        }
                    }
                }
                scores.push(SceneScore {
                    scene: format!("scene_{i:06}"),
                    miou: miou(mask.view(), &gts)?,
                });
            }
        }
        (None, Some(baseline)) => {
            method = baseline.to_string();
            for &i in &idxs {
                let gts = ds.gt_masks(i)?;
                if gts.is_empty() {
                    continue;
                }
                let raw = ds.load_raw_depth(i)?;
                let n = ds.manifest.n_instances;
                let mask = match baseline {
                    "kmeans" => {
                        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                        kmeans_segment(raw.view(), n, ds.manifest.floor, &mut rng)
                    }
                    "spectral" => spectral_segment(raw.view(), n, ds.manifest.floor),
                    other => bail!("unknown baseline `{other}` (expected kmeans|spectral)"),
                };
                scores.push(SceneScore {
                    scene: format!("scene_{i:06}"),
                    miou: miou(mask.view(), &gts)?,
                });
            }
        }
        _ => bail!("pass exactly one of --pred or --baseline"),
    }
    let report = EvalReport::new(&method, &checkpoint, scores);
    for s in &report.per_scene {
        println!("{}  {:.4}", s.scene, s.miou);
    }
    println!("mean mIoU ({}, {} scenes): {:.4}", report.method, report.per_scene.len(), report.mean);
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let mut summary = Vec::new();
    for losses in &a.losses {
        let run_dir = a.out.join(format!("ablate-{losses}"));
        std::fs::create_dir_all(&run_dir)?;
        let cfg = train_config(
            &ds, &a.variant, "ot", losses, a.narrow, a.epochs, a.batch_size, 2e-4, a.seed, 10,
            false,
        )?;
        std::fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
        if a.dry_run {
            println!("wrote config for `{losses}` to {}", run_dir.display());
            continue;
        }
        let mut trainer = Trainer::new(cfg);
        let (_, images) = load_split_images(&ds, "train")?;
        fit(&mut trainer, &images, &run_dir, |_, rec| {
            println!("[{losses}] epoch {:4}  L_E^a {:.4}", rec.epoch, rec.mean.loss_e_align);
        })?;
        save_checkpoint(&trainer, &run_dir.join("latest.ckpt"))?;
        summary.push((losses.clone(), run_dir));
    }
    for (losses, dir) in summary {
        println!("{losses}: {}", dir.display());
    }
    Ok(())
}

fn to_gray(img: ArrayView2<f32>) -> image::GrayImage {
    let (lo, hi) = img.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
        (l.min(v), h.max(v))
    });
    let span = (hi - lo).max(1e-12);
    let (h, w) = img.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (img[[y as usize, x as usize]] - lo) / span;
        image::Luma([(v * 255.0) as u8])
    })
}

fn plot(a: PlotArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let trainer = load_checkpoint(&a.checkpoint)?;
    let tau = a.tau.unwrap_or(ds.normalized_floor() + DEFAULT_TAU_OFFSET);
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    for &i in &a.scenes {
        let img = ds.load_normalized(i)?;
        let r = segment(&img, &trainer.gen, &trainer.enc, tau)?;
        let n = r.instance_depths.dim().0;
        let side = img.dim().0;
        // grid: input | composite | segmentation | per-instance renders
        let cols = 3 + n;
        let pad = 2u32;
        let mut grid = image::GrayImage::from_pixel(
            (cols as u32) * (side as u32 + pad) + pad,
            side as u32 + 2 * pad,
            image::Luma([32]),
        );
        let mut put = |col: usize, tile: &image::GrayImage| {
            let x0 = pad + col as u32 * (side as u32 + pad);
            for (x, y, p) in tile.enumerate_pixels() {
                grid.put_pixel(x0 + x, pad + y, *p);
            }
        };
        put(0, &to_gray(img.view()));
        put(1, &to_gray(r.composite.view()));
        put(2, &to_gray(r.mask.mapv(|v| v as f32).view()));
        for k in 0..n {
            put(3 + k, &to_gray(r.instance_depths.index_axis(Axis(0), k)));
        }
        let path = a.out.join(format!("scene_{i:06}_grid.png"));
        grid.save(&path).with_context(|| path.display().to_string())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
