use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmgs_core::interaction::DEGREE_THRESHOLD;
use mmgs_core::pipeline::{ablate, evaluate, train, LossWeights, Model, Sampling, TrainConfig, Variant};
use mmgs_core::rasterizer::{rasterize, write_float_image, write_png_rgb, RasterOptions};
use mmgs_core::sceneio::{generate_synthetic_scene, load_checkpoint, load_scene, Scene, SyntheticSpec};
use serde::Serialize;

/// Hierarchical Gaussian-splatting refinement for multi-human, multi-object scenes.
#[derive(Parser)]
#[command(name = "mmgs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark scene.
    Generate(GenerateArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Render one frame from one camera.
    Render(RenderArgs),
    /// Score a checkpoint against ground-truth views.
    Eval(EvalArgs),
    /// Train all four variants and compare them on held-out views.
    Ablate(AblateArgs),
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    humans: usize,
    #[arg(long, default_value_t = 1)]
    objects: usize,
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    /// Image width and height.
    #[arg(long, num_args = 2, value_names = ["W", "H"], default_values_t = [64, 64])]
    res: Vec<u32>,
    /// Overridden by MMGS_SEED when set.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum VariantArg {
    Full,
    NoFusion,
    NoInteraction,
    None,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoFusion => Variant::NoFusion,
            VariantArg::NoInteraction => Variant::NoInteraction,
            VariantArg::None => Variant::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SamplingArg {
    RoundRobin,
    Random,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint path; the loss log is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    variant: VariantArg,
    /// Overridden by MMGS_SEED when set.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long = "lambda-l1", default_value_t = 0.8)]
    lambda_l1: f64,
    #[arg(long = "lambda-ssim", default_value_t = 0.2)]
    lambda_ssim: f64,
    #[arg(long, value_enum, default_value_t = SamplingArg::RoundRobin)]
    sampling: SamplingArg,
    #[arg(long = "checkpoint-every", default_value_t = 500)]
    checkpoint_every: usize,
    /// Camera ids to leave out of training and context views.
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<u32>,
    /// Tile workers for the training renders.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Serialize)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 0)]
    camera: u32,
    /// PNG output; run metadata goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Also write the exact float image here.
    #[arg(long = "float-dump")]
    float_dump: Option<PathBuf>,
    /// Also write this frame's interaction graph as JSON.
    #[arg(long = "graph-json")]
    graph_json: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated camera ids [default: every camera].
    #[arg(long, value_delimiter = ',')]
    cameras: Vec<u32>,
    #[arg(long)]
    out: PathBuf,
    /// Camera workers.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Overridden by MMGS_SEED when set.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out camera ids [default: the last camera].
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<u32>,
    /// Variants trained at once.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn seed_override(seed: &mut u64) -> Result<()> {
    if let Ok(v) = std::env::var("MMGS_SEED") {
        *seed = v.trim().parse().with_context(|| format!("MMGS_SEED={v:?} is not an unsigned integer"))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn open_scene(dir: &Path) -> Result<Scene> {
    load_scene(dir).with_context(|| format!("loading scene {}", dir.display()))
}

fn open_model(scene: &Scene, ckpt: &Path) -> Result<Model<f32>> {
    let ck = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    Ok(Model::from_checkpoint(scene, &ck)?)
}

fn generate(mut args: GenerateArgs) -> Result<()> {
    seed_override(&mut args.seed)?;
    let spec = SyntheticSpec {
        humans: args.humans,
        objects: args.objects,
        cameras: args.cameras,
        frames: args.frames,
        width: args.res[0],
        height: args.res[1],
        seed: args.seed,
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let synthetic = generate_synthetic_scene(&spec, &args.out)?;
    write_json(&args.out.join("generate.json"), &serde_json::json!({ "args": args }))?;
    let edges: usize = synthetic.contacts.iter().map(Vec::len).sum();
    println!("wrote {} ({} frames, {} contact instances over all frames)", args.out.display(), spec.frames, edges);
    Ok(())
}

fn run_train(mut args: TrainArgs) -> Result<()> {
    seed_override(&mut args.seed)?;
    let scene = open_scene(&args.scene)?;
    let cfg = TrainConfig {
        iterations: args.iters,
        lr: args.lr,
        weights: LossWeights {
            l1: args.lambda_l1,
            ssim: args.lambda_ssim,
            lpips: 0.0,
        },
        seed: args.seed,
        variant: args.variant.into(),
        sampling: match args.sampling {
            SamplingArg::RoundRobin => Sampling::RoundRobin,
            SamplingArg::Random => Sampling::Random,
        },
        checkpoint_every: args.checkpoint_every,
        holdout: args.holdout.clone(),
        threads: args.threads,
    };
    let out = train::<f32>(&scene, &cfg, Some(&args.out))?;
    match out.losses.last() {
        Some(last) => println!("iteration {} loss {:.6}", last.iteration, last.loss),
        None => println!("saved the initial model"),
    }
    Ok(())
}

fn render(args: RenderArgs) -> Result<()> {
    let scene = open_scene(&args.scene)?;
    let model = open_model(&scene, &args.ckpt)?;
    let Some(frame) = scene.frame(args.frame) else {
        bail!("frame {} is not part of the scene", args.frame);
    };
    let Some(cam) = scene.camera(args.camera) else {
        bail!("camera {} is not part of the scene", args.camera);
    };
    let stages = model.stages(&scene, frame, None)?;
    let set = stages.final_gaussians().to_set();
    let img = rasterize(&set, cam, [0.0; 3], &RasterOptions::default().with_threads(args.threads))?;
    write_png_rgb(&args.out, img.width, img.height, &img.pixels).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.float_dump {
        write_float_image(path, img.width, img.height, &img.pixels).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.graph_json {
        let graph = match &stages.graph {
            Some(g) => g.to_json(frame.index, DEGREE_THRESHOLD),
            None => serde_json::Value::Null,
        };
        write_json(path, &graph)?;
    }
    let mut meta = args.out.clone().into_os_string();
    meta.push(".json");
    write_json(Path::new(&meta), &serde_json::json!({ "args": args, "gaussians": set.len() }))?;
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let scene = open_scene(&args.scene)?;
    let model = open_model(&scene, &args.ckpt)?;
    let cameras = if args.cameras.is_empty() { scene.camera_ids() } else { args.cameras.clone() };
    let report = evaluate(&model, &scene, &cameras, args.threads)?;
    log::info!("render time {:.2} ms per frame", report.render_ms_per_frame);
    // Timing stays out of the file so that repeated runs compare equal.
    let mut value = serde_json::to_value(report.without_timing())?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("render_ms_per_frame");
        obj.insert("args".into(), serde_json::to_value(&args)?);
    }
    write_json(&args.out, &value)?;
    println!("mean PSNR {:.3} dB, SSIM {:.4}", report.mean.psnr, report.mean.ssim);
    Ok(())
}

fn run_ablate(mut args: AblateArgs) -> Result<()> {
    seed_override(&mut args.seed)?;
    let scene = open_scene(&args.scene)?;
    let base = TrainConfig {
        iterations: args.iters,
        seed: args.seed,
        holdout: args.holdout.clone(),
        ..TrainConfig::default()
    };
    let table = ablate(&scene, &base, args.threads)?;
    let mut value = serde_json::to_value(&table)?;
    if let Some(obj) = value.as_object_mut() {
        obj.insert("args".into(), serde_json::to_value(&args)?);
    }
    write_json(&args.out, &value)?;
    for e in &table.entries {
        println!("{:<15} PSNR {:7.3}  SSIM {:.4}  {:8.1} fps", e.variant.name(), e.psnr, e.ssim, e.render_fps);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
