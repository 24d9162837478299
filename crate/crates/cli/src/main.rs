//! `gaussproto`: synthetic data generation, training, evaluation,
//! segmentation and prototype galleries.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gaussproto::config::RunConfig;
use gaussproto::data::{generate_synthetic, load_split, random_crops, write_dataset, Sample};
use gaussproto::evalkit::{evaluate, HsvBaseline, MetricTable};
use gaussproto::explain::{class_color, locate_prototypes, render_gallery};
use gaussproto::fsutil::atomic_write;
use gaussproto::imaging::{LabelMap, RgbImage};
use gaussproto::pipeline::{load_checkpoint, save_checkpoint, segment_tiled, LossRecord, Model, ModelKind, Trainer};
use rand::SeedableRng;

const THREADS_ENV: &str = "GAUSSPROTO_THREADS";

#[derive(Parser)]
#[command(name = "gaussproto", version, about = "Gaussian prototype segmentation")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured model kind.
    #[arg(long, global = true, value_parser = ["protoseg", "protobb"])]
    model: Option<String>,
    /// Also run the HSV superpixel baseline (eval).
    #[arg(long, global = true)]
    baseline: bool,
    /// Output directory (dataset root for generate-data).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset.
    GenerateData(GenerateArgs),
    /// Runs the four training stages and writes a checkpoint and loss log.
    Train(DatasetArgs),
    /// Scores a checkpoint (and optionally the baseline) on a split.
    Eval(EvalArgs),
    /// Writes an overlay and a raw class map for one image.
    Segment(SegmentArgs),
    /// Renders the prototype gallery and report.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Training images (default from config).
    #[arg(long)]
    train: Option<usize>,
    /// Validation images (default from config).
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    difficulty: Option<u8>,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset root (default from config).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input PNG; images larger than the model input are tiled.
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.model {
        cfg.model.kind = m.parse::<ModelKind>()?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    atomic_write(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn write_metrics(path: &Path, value: &MetricTable) -> Result<()> {
    atomic_write(path, &serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"))
}

fn load_model(path: &Path) -> Result<Model> {
    let (model, _) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let mut cfg = effective_config(cli)?;
    let d = &mut cfg.data;
    d.train = args.train.unwrap_or(d.train);
    d.val = args.val.unwrap_or(d.val);
    d.size = args.size.unwrap_or(d.size);
    d.difficulty = args.difficulty.unwrap_or(d.difficulty);
    if let Some(s) = cli.seed {
        d.seed = s;
    }
    let root = cli.out.clone().unwrap_or_else(|| cfg.dataset.clone());
    cfg.dataset = root.clone();
    let data = generate_synthetic(&cfg.data)?;
    write_dataset(&root, &data)?;
    echo_config(&cfg, &root)?;
    println!("wrote {} train and {} val images to {}", data.train.len(), data.val.len(), root.display());
    Ok(())
}

fn loss_csv(history: &[LossRecord]) -> String {
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.10e}"));
    let mut s = String::from("stage,epoch,L_GMM,L_clf,L1,L\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{:.10e}\n",
            r.stage,
            r.epoch,
            cell(r.gmm),
            cell(r.clf),
            cell(r.l1),
            r.total
        ));
    }
    s
}

fn cmd_train(cli: &Cli, args: &DatasetArgs) -> Result<()> {
    let mut cfg = effective_config(cli)?;
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    let loaded = load_split(&cfg.dataset, "train")?;
    let size = match cfg.model.input_size {
        Some(n) => n,
        None => {
            let first = &loaded[0].image;
            if first.height() != first.width() {
                bail!(
                    "{} is {}x{}; set model.input_size to train on square crops",
                    loaded[0].name,
                    first.height(),
                    first.width()
                );
            }
            first.height()
        }
    };
    let train = random_crops(&loaded, size, cfg.seed)?;
    let spec = cfg.model_spec(size)?;
    let mut trainer = Trainer::new(spec, &train, cfg.schedule.clone(), cfg.seed)?;
    for stage in 1..=4u8 {
        trainer.run_stage(stage)?;
        let last = trainer.report().last_total(stage).unwrap_or(f64::NAN);
        eprintln!("stage {stage}: {} epochs, L = {last:.6}", trainer.report().epochs_run[stage as usize - 1]);
    }
    let (model, report) = trainer.finish();
    let summary = serde_json::json!({
        "seed": cfg.seed,
        "dataset": cfg.dataset,
        "train_images": train.len(),
        "epochs_run": report.epochs_run,
    });
    save_checkpoint(&cfg.out.join("model.ckpt"), &model, summary)?;
    atomic_write(&cfg.out.join("losses.csv"), loss_csv(&report.history).as_bytes())?;
    echo_config(&cfg, &cfg.out)?;
    println!("wrote {}", cfg.out.join("model.ckpt").display());
    Ok(())
}

fn masks(samples: &[Sample]) -> Vec<LabelMap> {
    samples.iter().map(|s| s.mask.clone()).collect()
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let mut cfg = effective_config(cli)?;
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    let ckpt = checkpoint_path(&cfg, &args.checkpoint);
    if !cli.baseline && !ckpt.exists() {
        bail!("checkpoint {} not found (pass --checkpoint or --baseline)", ckpt.display());
    }
    let split = load_split(&cfg.dataset, &args.split)?;
    let truth = masks(&split);
    let mut printed: Vec<(String, MetricTable)> = Vec::new();

    if ckpt.exists() {
        let model = load_model(&ckpt)?;
        let preds = gaussproto::par::map_slice(&split, |s| segment_tiled(&model, &s.image))
            .into_iter()
            .collect::<gaussproto::Result<Vec<_>>>()?;
        let table = evaluate(&preds, &truth, model.spec.classes)?;
        write_metrics(&cfg.out.join("metrics.json"), &table)?;
        printed.push(("model".into(), table));
    }
    if cli.baseline {
        let train = load_split(&cfg.dataset, "train")?;
        let images: Vec<RgbImage> = train.iter().map(|s| s.image.clone()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let base = HsvBaseline::fit(&images, &masks(&train), cfg.model.classes, cfg.baseline.clone(), &mut rng)?;
        let preds = gaussproto::par::map_slice(&split, |s| base.predict(&s.image))
            .into_iter()
            .collect::<gaussproto::Result<Vec<_>>>()?;
        let table = evaluate(&preds, &truth, cfg.model.classes)?;
        write_metrics(&cfg.out.join("baseline_metrics.json"), &table)?;
        printed.push(("baseline".into(), table));
    }
    echo_config(&cfg, &cfg.out)?;
    for (name, t) in printed {
        let s = &t.scores;
        println!(
            "{name}: Mean IoU {:.4}  Class IoU {:.4}  Pixel Accuracy {:.4}  Class Accuracy {:.4}",
            s.mean_iou, s.class_iou, s.pixel_accuracy, s.class_accuracy
        );
    }
    Ok(())
}

/// Input blended half-and-half with each pixel's class color.
fn overlay(image: &RgbImage, classes: &LabelMap) -> RgbImage {
    let mut out = image.clone();
    for r in 0..image.height() {
        for c in 0..image.width() {
            let p = image.pixel(r, c);
            let k = class_color(classes.get(r, c));
            out.set_pixel(r, c, [0, 1, 2].map(|i| 0.5 * p[i] + 0.5 * k[i]));
        }
    }
    out
}

fn cmd_segment(cli: &Cli, args: &SegmentArgs) -> Result<()> {
    let cfg = effective_config(cli)?;
    let model = load_model(&checkpoint_path(&cfg, &args.checkpoint))?;
    let image = RgbImage::load(&args.image)?;
    let map = segment_tiled(&model, &image)?;
    let stem = args.image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    overlay(&image, &map).save(&cfg.out.join(format!("{stem}_overlay.png")))?;
    let raw = cfg.out.join(format!("{stem}_mask.png"));
    if model.spec.classes == 2 {
        map.save_mask(&raw)?;
    } else {
        map.save_labels(&raw)?;
    }
    echo_config(&cfg, &cfg.out)?;
    println!("wrote {}", raw.display());
    Ok(())
}

fn cmd_explain(cli: &Cli, args: &ExplainArgs) -> Result<()> {
    let mut cfg = effective_config(cli)?;
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    let model = load_model(&checkpoint_path(&cfg, &args.checkpoint))?;
    // Same tiles the trainer saw when images exceed the model's input size.
    let samples = random_crops(&load_split(&cfg.dataset, &args.split)?, model.spec.encoder.input_size, cfg.seed)?;
    let reports = locate_prototypes(&model, &samples)?;
    let gallery = cfg.out.join("gallery");
    let index = render_gallery(&reports, &samples, &gallery)?;
    echo_config(&cfg, &cfg.out)?;
    println!("wrote {} prototypes to {}", index.prototypes.len(), gallery.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        gaussproto::par::init_global_threads(n);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::GenerateData(a) => cmd_generate(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Segment(a) => cmd_segment(cli, a),
        Command::Explain(a) => cmd_explain(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
