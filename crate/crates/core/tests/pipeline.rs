mod common;

use mmgs_core::pipeline::train::{training_pairs, union_mask, LOSS_CSV_HEADER};
use mmgs_core::pipeline::*;
use mmgs_core::rasterizer::{rasterize_reference, RasterOptions};
use mmgs_core::sceneio::{build_synthetic_scene, load_checkpoint, Scene, SyntheticSpec};
use mmgs_core::PipelineError;
use mmgs_diffgrad::{grad_check_param, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn small_scene() -> Scene {
    build_synthetic_scene(&SyntheticSpec {
        humans: 1,
        objects: 1,
        cameras: 2,
        frames: 2,
        width: 32,
        height: 32,
        seed: 3,
    })
    .unwrap()
    .scene
}

fn random_image(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_matches_the_direct_formula(seed in any::<u64>(), h in 4usize..20, w in 4usize..20) {
        let mut rng = common::rng(seed);
        let a = random_image(&mut rng, h * w * 3);
        let b: Vec<f64> = a.iter().map(|v| (v + 0.2 * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0)).collect();
        let s = ssim_value(&a, &b, h, w);
        prop_assert!((s - common::ssim_direct(&a, &b, h, w)).abs() < 1e-6);
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim_value(&b, &a, h, w) - s).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_the_direct_formula(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = common::rng(seed);
        let a = random_image(&mut rng, n);
        let b = random_image(&mut rng, n);
        prop_assert!((psnr(&a, &b) - common::psnr_direct(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn loss_is_nonnegative_and_symmetric(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a = Tensor::new(&[12, 12, 3], random_image(&mut rng, 432));
        let b = Tensor::new(&[12, 12, 3], random_image(&mut rng, 432));
        let mask: Vec<bool> = (0..144).map(|_| rng.gen_bool(0.7)).collect();
        let w = LossWeights::default();
        let ab = render_loss(&a, &b, &mask, &w, None).total.item();
        let ba = render_loss(&b, &a, &mask, &w, None).total.item();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
    }
}

#[test]
fn ssim_of_an_image_with_itself_is_one() {
    let mut rng = common::rng(5);
    for (h, w) in [(3, 5), (11, 11), (24, 17)] {
        let a = random_image(&mut rng, h * w * 3);
        assert_eq!(ssim_value(&a, &a, h, w), 1.0);
    }
}

#[test]
fn ssim_falls_as_distortion_grows() {
    let mut rng = common::rng(9);
    let x: Vec<f64> = (0..16 * 16 * 3).map(|_| 0.3 + 0.4 * rng.gen::<f64>()).collect();
    let near: Vec<f64> = x.iter().map(|v| v + 0.01).collect();
    let inverted: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
    assert!(ssim_value(&x, &inverted, 16, 16) < ssim_value(&x, &near, 16, 16));
}

#[test]
fn psnr_values() {
    let a = vec![0.5; 300];
    assert_eq!(psnr(&a, &a), 99.0);
    let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
    // Halving the noise amplitude quarters the MSE: about +6 dB.
    let mut rng = common::rng(2);
    let noise: Vec<f64> = (0..300).map(|_| rng.gen::<f64>() - 0.5).collect();
    let full: Vec<f64> = a.iter().zip(&noise).map(|(v, n)| v + 0.2 * n).collect();
    let half: Vec<f64> = a.iter().zip(&noise).map(|(v, n)| v + 0.1 * n).collect();
    let gain = psnr(&a, &half) - psnr(&a, &full);
    assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let mut rng = common::rng(4);
    for (h, w) in [(6, 7), (13, 12)] {
        let a = Tensor::param(&[h, w, 3], random_image(&mut rng, h * w * 3));
        let b = Tensor::new(&[h, w, 3], random_image(&mut rng, h * w * 3));
        let report = grad_check_param(&a, || ssim(&a, &b), 1e-5, None).unwrap();
        assert!(report.max_rel_error < 1e-5, "{h}x{w}: {}", report.max_rel_error);
    }
}

#[test]
fn render_loss_examples() {
    let mut rng = common::rng(8);
    let a = Tensor::new(&[8, 8, 3], (0..192).map(|_| 0.2 + 0.6 * rng.gen::<f64>()).collect());
    let mask = vec![true; 64];
    let w = LossWeights::default();
    assert_eq!(render_loss(&a, &a, &mask, &w, None).total.item(), 0.0);

    let shifted = Tensor::new(&[8, 8, 3], a.data().iter().map(|v| v + 0.1).collect());
    let l1 = LossWeights { l1: 1.0, ssim: 0.0, lpips: 0.0 };
    assert!((render_loss(&a, &shifted, &mask, &l1, None).total.item() - 0.1).abs() < 1e-12);

    // Only masked pixels count, and the mean is over masked pixels.
    let mut half = vec![false; 64];
    half[..32].iter_mut().for_each(|m| *m = true);
    let mut data = a.to_vec();
    data[32 * 3..].iter_mut().for_each(|v| *v = 0.9);
    let damaged = Tensor::new(&[8, 8, 3], data);
    assert_eq!(render_loss(&a, &damaged, &half, &l1, None).total.item(), 0.0);

    let empty = render_loss(&a, &shifted, &[false; 64], &w, None);
    assert_eq!(empty.total.item(), 0.0);
}

struct MeanSquare;

impl PerceptualLoss<f64> for MeanSquare {
    fn distance(&self, rendered: &Tensor<f64>, target: &Tensor<f64>) -> Tensor<f64> {
        rendered.sub(target).square().mean()
    }
}

#[test]
fn perceptual_plugin_is_weighted_in() {
    let a = Tensor::new(&[4, 4, 3], vec![0.2; 48]);
    let b = Tensor::new(&[4, 4, 3], vec![0.5; 48]);
    let mask = vec![true; 16];
    let w = LossWeights { l1: 0.0, ssim: 0.0, lpips: 2.0 };
    let t = render_loss(&a, &b, &mask, &w, Some(&MeanSquare));
    assert!((t.lpips_term - 2.0 * 0.09).abs() < 1e-12);
    let none = render_loss(&a, &b, &mask, &w, None);
    assert_eq!(none.lpips_term, 0.0);
}

#[test]
fn teacher_against_its_own_renders_is_capped() {
    let synthetic = build_synthetic_scene(&SyntheticSpec {
        humans: 1,
        objects: 1,
        cameras: 2,
        frames: 1,
        width: 32,
        height: 32,
        seed: 1,
    })
    .unwrap();
    let set = synthetic.teacher_frame(0).unwrap();
    let frame = &synthetic.scene.frames[0];
    for cam in &synthetic.scene.cameras {
        let img = rasterize_reference(&set, cam, [0.0; 3]).unwrap();
        let rendered: Vec<f64> = img.pixels.iter().map(|&v| v as f32 as f64).collect();
        let target: Vec<f64> = frame.images[&cam.id].iter().map(|&v| v as f64).collect();
        let mask = union_mask(frame, cam.id);
        assert_eq!(masked_psnr(&rendered, &target, &mask), 99.0);
        assert_eq!(masked_ssim(&rendered, &target, &mask, 32, 32), 1.0);
    }
}

#[test]
fn all_variants_start_identical() {
    let scene = small_scene();
    let frame = &scene.frames[1];
    let mut reference: Option<Vec<f64>> = None;
    for v in Variant::ALL {
        let model = Model::<f64>::new(&scene, ModelConfig { variant: v, seed: 11, ..Default::default() }).unwrap();
        let out = model.forward_frame(&scene, frame, &[0, 1], &RasterOptions::default(), None).unwrap();
        let pixels: Vec<f64> = out.images.iter().flat_map(|(_, t)| t.to_vec()).collect();
        match &reference {
            None => reference = Some(pixels),
            Some(r) => assert!(r.iter().zip(&pixels).all(|(a, b)| a.to_bits() == b.to_bits()), "{v}"),
        }
    }
}

#[test]
fn variants_run_the_stages_they_name() {
    let scene = small_scene();
    let frame = &scene.frames[0];
    for v in Variant::ALL {
        let model = Model::<f64>::new(&scene, ModelConfig { variant: v, ..Default::default() }).unwrap();
        let a = model.stages(&scene, frame, None).unwrap().activity;
        assert_eq!(a.fusion, v.uses_fusion(), "{v}");
        assert_eq!(a.interaction, v.uses_interaction(), "{v}");
        assert_eq!(a.lifted_nodes, v == Variant::NoFusion, "{v}");
    }
}

fn checksum(t: &Tensor<f32>) -> u64 {
    t.data().iter().fold(0u64, |h, v| h.rotate_left(5) ^ v.to_bits() as u64)
}

#[test]
fn stages_leave_their_frozen_attributes_alone() {
    let scene = small_scene();
    let cfg = TrainConfig { iterations: 6, seed: 2, ..Default::default() };
    let model = train::<f32>(&scene, &cfg, None).unwrap().model;
    for frame in &scene.frames {
        let s = model.stages(&scene, frame, None).unwrap();
        for ((g0, g1), g2) in s.posed.iter().zip(&s.refined).zip(&s.interacted) {
            assert!(g1.centers.ptr_eq(&g0.centers));
            assert_eq!(checksum(&g1.centers), checksum(&g0.centers));
            assert!(g2.rotation.ptr_eq(&g1.rotation));
            assert!(g2.log_scale.ptr_eq(&g1.log_scale));
            assert_eq!(checksum(&g2.log_scale), checksum(&g1.log_scale));
        }
    }
}

#[test]
fn forward_returns_one_image_per_requested_camera() {
    let scene = small_scene();
    let model = Model::<f32>::new(&scene, ModelConfig::default()).unwrap();
    let out = model.forward_frame(&scene, &scene.frames[0], &[1, 0], &RasterOptions::default(), None).unwrap();
    assert_eq!(out.images.len(), 2);
    assert_eq!(out.images[0].0, 1);
    assert_eq!(out.images[0].1.shape(), &[32, 32, 3]);
    assert!(matches!(
        model.forward_frame(&scene, &scene.frames[0], &[7], &RasterOptions::default(), None),
        Err(PipelineError::UnknownCamera(7))
    ));
}

#[test]
fn missing_pose_names_frame_and_instance() {
    let mut scene = small_scene();
    scene.frames[1].poses.remove(&1);
    let model = Model::<f32>::new(&scene, ModelConfig::default()).unwrap();
    let err = model.forward_frame(&scene, &scene.frames[1], &[0], &RasterOptions::default(), None).err().unwrap();
    assert!(matches!(err, PipelineError::MissingPose { frame: 1, instance: 1 }), "{err}");
}

#[test]
fn config_validation() {
    let bad = TrainConfig {
        weights: LossWeights { l1: 0.0, ssim: 0.0, lpips: 1.0 },
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!("no_fusion".parse::<Variant>().unwrap(), Variant::NoFusion);
    assert!("both".parse::<Variant>().is_err());
}

#[test]
fn training_is_deterministic_and_descends() {
    let scene = small_scene();
    let cfg = TrainConfig { iterations: 200, seed: 5, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let a = train::<f32>(&scene, &cfg, Some(&path)).unwrap();
    let b = train::<f32>(&scene, &cfg, None).unwrap();
    let bits = |o: &TrainOutcome<f32>| o.losses.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));

    let fresh = Model::<f32>::new(&scene, cfg.model_config()).unwrap();
    let before = objective(&fresh, &scene, &cfg.weights).unwrap();
    let after = objective(&a.model, &scene, &cfg.weights).unwrap();
    assert!(after < before, "{after} !< {before}");

    let csv = std::fs::read_to_string(dir.path().join("run.ckpt.loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(LOSS_CSV_HEADER));
    assert_eq!(lines.count(), 200);

    let reloaded = Model::<f32>::from_checkpoint(&scene, &load_checkpoint(&path).unwrap()).unwrap();
    let cams = scene.camera_ids();
    assert_eq!(
        evaluate(&a.model, &scene, &cams, 1).unwrap().without_timing(),
        evaluate(&reloaded, &scene, &cams, 1).unwrap().without_timing()
    );
}

#[test]
fn zero_iterations_saves_the_initialisation() {
    let scene = small_scene();
    let cfg = TrainConfig { iterations: 0, seed: 9, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("init.ckpt");
    train::<f32>(&scene, &cfg, Some(&path)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let fresh = Model::<f32>::new(&scene, cfg.model_config()).unwrap();
    let names: Vec<_> = fresh.named_params();
    assert_eq!(ck.tensors.len(), names.len());
    for (t, (name, p)) in ck.tensors.iter().zip(&names) {
        assert_eq!(&t.name, name);
        assert_eq!(t.data, p.to_vec());
    }
    assert_eq!(ck.config["run"]["iteration"], 0);
}

struct Broken;

impl PerceptualLoss<f32> for Broken {
    fn distance(&self, rendered: &Tensor<f32>, _target: &Tensor<f32>) -> Tensor<f32> {
        rendered.mean().scale(f32::NAN)
    }
}

#[test]
fn nan_loss_aborts_with_norms() {
    let scene = small_scene();
    let cfg = TrainConfig {
        iterations: 3,
        weights: LossWeights { lpips: 0.5, ..Default::default() },
        ..Default::default()
    };
    let model = Model::<f32>::new(&scene, cfg.model_config()).unwrap();
    match train_model(&scene, model, &cfg, None, Some(&Broken)) {
        Err(err @ PipelineError::NonFiniteLoss { .. }) => {
            let PipelineError::NonFiniteLoss { iteration, ref norms, .. } = err else { unreachable!() };
            assert_eq!(iteration, 0);
            assert!(norms.contains("instance0.sh="), "{norms}");
            assert!(err.to_string().contains("iteration 0"), "{err}");
        }
        other => panic!("expected a NaN abort, got {:?}", other.err()),
    }
}

#[test]
fn holdout_cameras_are_excluded_from_training_and_context() {
    let scene = small_scene();
    assert_eq!(training_pairs(&scene, &[1]), vec![(0, 0), (1, 0)]);
    let model = Model::<f32>::new(&scene, ModelConfig { holdout: vec![1], ..Default::default() }).unwrap();
    let s = model.stages(&scene, &scene.frames[0], None).unwrap();
    assert!(s.activity.context.values().all(|v| v == &vec![0]));
}

#[test]
fn evaluation_report_has_one_entry_per_view() {
    let scene = small_scene();
    let model = Model::<f32>::new(&scene, ModelConfig::default()).unwrap();
    let report = evaluate(&model, &scene, &[0, 1], 2).unwrap();
    assert_eq!(report.per_view.len(), 4);
    let json = serde_json::to_value(&report).unwrap();
    assert_eq!(json["variant"], "full");
    assert!(json["mean"]["psnr"].is_f64());
    assert!(json["per_view"][3]["camera"].is_u64());
    assert!(matches!(evaluate(&model, &scene, &[4], 1), Err(PipelineError::UnknownCamera(4))));
    let single = evaluate(&model, &scene, &[0, 1], 1).unwrap();
    assert_eq!(single.without_timing(), report.without_timing());
}
