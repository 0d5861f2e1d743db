//! The optimisation loop, held-out evaluation and the ablation sweep.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmgs_diffgrad::{adam_step, AdamConfig, AdamState, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::gaussians::Camera;
use crate::parallel::Parallelism;
use crate::rasterizer::{rasterize, RasterOptions};
use crate::sceneio::{save_checkpoint, Frame, Scene};

use super::loss::{masked_psnr, masked_ssim, render_loss, LossWeights, PerceptualLoss};
use super::model::Model;
use super::{Sampling, TrainConfig, Variant};

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim_term: f64,
    pub lpips_term: f64,
}

pub struct TrainOutcome<T: Real> {
    pub model: Model<T>,
    pub losses: Vec<LossRecord>,
}

pub const LOSS_CSV_HEADER: &str = "iteration,loss,l1,ssim_term,lpips_term";

/// Union of all instance masks as a per-pixel flag.
pub fn union_mask(frame: &Frame, camera: u32) -> Vec<bool> {
    frame.masks.get(&camera).map(|m| m.iter().map(|&v| v > 0).collect()).unwrap_or_default()
}

fn target_tensor<T: Real>(frame: &Frame, cam: &Camera) -> Result<Tensor<T>, PipelineError> {
    let pixels = frame.images.get(&cam.id).ok_or(PipelineError::UnknownCamera(cam.id))?;
    Ok(Tensor::new(
        &[cam.height as usize, cam.width as usize, 3],
        pixels.iter().map(|&v| T::of(v as f64)).collect(),
    ))
}

/// Every (frame, camera) pair that is not held out, frame-major.
pub fn training_pairs(scene: &Scene, holdout: &[u32]) -> Vec<(usize, u32)> {
    let cams: Vec<u32> = scene.camera_ids().into_iter().filter(|c| !holdout.contains(c)).collect();
    (0..scene.frames.len())
        .flat_map(|f| cams.iter().map(move |&c| (f, c)))
        .collect()
}

fn pair_loss<T: Real>(
    model: &Model<T>,
    scene: &Scene,
    (f, c): (usize, u32),
    weights: &LossWeights,
    raster: &RasterOptions,
    rng: Option<&mut ChaCha8Rng>,
    perceptual: Option<&dyn PerceptualLoss<T>>,
) -> Result<super::LossTerms<T>, PipelineError> {
    let frame = scene.frame(f).ok_or(PipelineError::UnknownFrame(f))?;
    let cam = scene.camera(c).ok_or(PipelineError::UnknownCamera(c))?;
    let out = model.forward_frame(scene, frame, &[c], raster, rng)?;
    let target = target_tensor(frame, cam)?;
    Ok(render_loss(&out.images[0].1, &target, &union_mask(frame, c), weights, perceptual))
}

/// Mean loss over all training pairs with dropout off.
pub fn objective<T: Real>(model: &Model<T>, scene: &Scene, weights: &LossWeights) -> Result<f64, PipelineError> {
    let pairs = training_pairs(scene, &model.config.holdout);
    if pairs.is_empty() {
        return Err(PipelineError::Config("no training views".into()));
    }
    let mut sum = 0.0;
    for &p in &pairs {
        sum += pair_loss(model, scene, p, weights, &RasterOptions::default(), None, None)?.total.item().as_f64();
    }
    Ok(sum / pairs.len() as f64)
}

fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn run_echo(cfg: &TrainConfig, iteration: usize) -> serde_json::Value {
    serde_json::json!({ "train": cfg, "iteration": iteration })
}

/// Builds a fresh model for `cfg` and trains it.
pub fn train<T: Real>(
    scene: &Scene,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome<T>, PipelineError> {
    cfg.validate()?;
    let model = Model::new(scene, cfg.model_config())?;
    train_model(scene, model, cfg, checkpoint, None)
}

/// Trains `model` for `cfg.iterations` Adam steps, one (frame, camera) pair
/// per step. With a checkpoint path, the model is saved every
/// `cfg.checkpoint_every` steps and at the end, and the loss log is written
/// next to it. The perceptual term is added only when a plugin is given.
pub fn train_model<T: Real>(
    scene: &Scene,
    model: Model<T>,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    perceptual: Option<&dyn PerceptualLoss<T>>,
) -> Result<TrainOutcome<T>, PipelineError> {
    cfg.validate()?;
    let pairs = training_pairs(scene, &model.config.holdout);
    if pairs.is_empty() {
        return Err(PipelineError::Config("no training views".into()));
    }
    let (names, params): (Vec<String>, Vec<Tensor<T>>) = model.trainable_params().into_iter().unzip();
    log::debug!("training {} tensors: {}", names.len(), names.join(", "));
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raster = RasterOptions::default().with_threads(cfg.threads);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let save = |model: &Model<T>, losses: &[LossRecord], iteration: usize| -> Result<(), PipelineError> {
        if let Some(path) = checkpoint {
            save_checkpoint(&model.to_checkpoint(run_echo(cfg, iteration)), path)?;
            write_loss_csv(&loss_csv_path(path), losses)?;
        }
        Ok(())
    };

    for it in 0..cfg.iterations {
        let pair = match cfg.sampling {
            Sampling::RoundRobin => pairs[it % pairs.len()],
            Sampling::Random => pairs[sampler.gen_range(0..pairs.len())],
        };
        let mut dropout = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(it as u64));
        params.iter().for_each(|p| p.clear_grad());
        let terms = pair_loss(&model, scene, pair, &cfg.weights, &raster, Some(&mut dropout), perceptual)?;
        let value = terms.total.item().as_f64();
        if !value.is_finite() {
            return Err(PipelineError::NonFiniteLoss {
                iteration: it,
                value,
                norms: model.parameter_norms(),
            });
        }
        losses.push(LossRecord {
            iteration: it,
            loss: value,
            l1: terms.l1,
            ssim_term: terms.ssim_term,
            lpips_term: terms.lpips_term,
        });
        if terms.total.requires_grad() {
            terms.total.backward()?;
        }
        for p in &params {
            if p.grad().is_none() {
                p.zero_grad();
            }
        }
        adam_step(&params, &mut adam)?;
        model.normalize_rotations();
        if (it + 1) % cfg.checkpoint_every == 0 {
            save(&model, &losses, it + 1)?;
        }
    }
    if cfg.iterations % cfg.checkpoint_every != 0 || cfg.iterations == 0 {
        save(&model, &losses, cfg.iterations)?;
    }
    Ok(TrainOutcome { model, losses })
}

pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in losses {
        out.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.loss, r.l1, r.ssim_term, r.lpips_term));
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(out.as_bytes()).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub frame: usize,
    pub camera: u32,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub per_view: Vec<ViewMetrics>,
    pub mean: MeanMetrics,
    pub render_ms_per_frame: f64,
}

impl MetricsReport {
    /// The report without timing, for comparisons between runs.
    pub fn without_timing(&self) -> MetricsReport {
        MetricsReport {
            render_ms_per_frame: 0.0,
            ..self.clone()
        }
    }
}

/// Renders every frame from `cameras` and scores the result inside the
/// union mask. Cameras are rendered on `threads` workers.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    scene: &Scene,
    cameras: &[u32],
    threads: usize,
) -> Result<MetricsReport, PipelineError> {
    let cams = cameras
        .iter()
        .map(|&id| scene.camera(id).cloned().ok_or(PipelineError::UnknownCamera(id)))
        .collect::<Result<Vec<_>, _>>()?;
    let pool = Parallelism::new(threads);
    let raster = RasterOptions::default();
    let mut per_view = Vec::new();
    let mut render_seconds = 0.0;
    for frame in &scene.frames {
        let start = Instant::now();
        let set = model.frame_set(scene, frame)?.cast::<f64>();
        let images = pool.map(cams.len(), |i| rasterize(&set, &cams[i], [0.0; 3], &raster));
        render_seconds += start.elapsed().as_secs_f64();
        for (cam, img) in cams.iter().zip(images) {
            let img = img?;
            let target: Vec<f64> = frame.images[&cam.id].iter().map(|&v| v as f64).collect();
            let mask = union_mask(frame, cam.id);
            per_view.push(ViewMetrics {
                frame: frame.index,
                camera: cam.id,
                psnr: masked_psnr(&img.pixels, &target, &mask),
                ssim: masked_ssim(&img.pixels, &target, &mask, cam.height as usize, cam.width as usize),
            });
        }
    }
    let n = per_view.len().max(1) as f64;
    Ok(MetricsReport {
        variant: model.config.variant,
        mean: MeanMetrics {
            psnr: per_view.iter().map(|v| v.psnr).sum::<f64>() / n,
            ssim: per_view.iter().map(|v| v.ssim).sum::<f64>() / n,
        },
        per_view,
        render_ms_per_frame: 1e3 * render_seconds / scene.frames.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: Variant,
    pub psnr: f64,
    pub ssim: f64,
    pub render_fps: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub iterations: usize,
    pub seed: u64,
    pub eval_cameras: Vec<u32>,
    pub entries: Vec<AblationEntry>,
}

impl AblationTable {
    pub fn entry(&self, variant: Variant) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.variant == variant)
    }
}

fn ablate_one(scene: &Scene, base: &TrainConfig, variant: Variant, eval: &[u32]) -> Result<AblationEntry, PipelineError> {
    let cfg = TrainConfig {
        variant,
        ..base.clone()
    };
    let out = train::<f32>(scene, &cfg, None)?;
    let report = evaluate(&out.model, scene, eval, 1)?;
    let tail = &out.losses[out.losses.len().saturating_sub(50)..];
    Ok(AblationEntry {
        variant,
        psnr: report.mean.psnr,
        ssim: report.mean.ssim,
        render_fps: if report.render_ms_per_frame > 0.0 {
            1e3 / report.render_ms_per_frame
        } else {
            0.0
        },
        final_loss: tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64,
    })
}

/// Trains all four variants with identical settings and scores them on the
/// held-out cameras (or the last camera when none is held out). With more
/// than one thread, variants train concurrently.
pub fn ablate(scene: &Scene, base: &TrainConfig, threads: usize) -> Result<AblationTable, PipelineError> {
    let mut cfg = base.clone();
    if cfg.holdout.is_empty() {
        let last = *scene
            .camera_ids()
            .last()
            .ok_or_else(|| PipelineError::Config("scene has no cameras".into()))?;
        cfg.holdout = vec![last];
    }
    let eval = cfg.holdout.clone();
    let results: Vec<Result<AblationEntry, PipelineError>> = if threads > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = Variant::ALL
                .iter()
                .map(|&v| {
                    let (cfg, eval) = (&cfg, &eval);
                    s.spawn(move || ablate_one(scene, cfg, v, eval))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        })
    } else {
        Variant::ALL.iter().map(|&v| ablate_one(scene, &cfg, v, &eval)).collect()
    };
    Ok(AblationTable {
        iterations: cfg.iterations,
        seed: cfg.seed,
        eval_cameras: eval,
        entries: results.into_iter().collect::<Result<_, _>>()?,
    })
}
