mod common;

use mmgs_core::deformation::*;
use mmgs_core::linalg::{self, Mat3, Vec3};
use mmgs_diffgrad::nn::Module;
use mmgs_diffgrad::{grad_check_param, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random_rotation(rng: &mut impl Rng) -> Mat3<f64> {
    linalg::quat_to_mat(common::random_unit_quat(rng))
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vec3<f64>> {
    (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect()
}

fn random_weights(rng: &mut impl Rng, v: usize, k: usize) -> Vec<Vec<f64>> {
    (0..v)
        .map(|_| {
            let row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn random_joints(rng: &mut impl Rng, k: usize) -> JointTransforms {
    JointTransforms::new(
        (0..k).map(|_| random_rotation(rng)).collect(),
        (0..k).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn modulated_rows_are_distributions(seed in any::<u64>(), v in 1usize..12, k in 1usize..8, spread in 0.1f64..50.0) {
        let mut rng = common::rng(seed);
        let w = Tensor::new(&[v, k], (0..v * k).map(|_| rng.gen_range(-spread..spread)).collect());
        let m = Tensor::new(&[v, k], (0..v * k).map(|_| rng.gen_range(-5.0..5.0)).collect());
        let out = modulate_weights(&w, &m).to_vec();
        for row in out.chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let shift: f64 = rng.gen_range(-3.0..3.0);
        let shifted = modulate_weights(&w, &m.add_scalar(shift)).to_vec();
        for (a, b) in out.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn skinning_commutes_with_a_global_rigid_motion(seed in any::<u64>(), v in 1usize..20, k in 1usize..6) {
        let mut rng = common::rng(seed);
        let template = SkinnedTemplate::new(
            InstanceKind::Human,
            random_points(&mut rng, v),
            Some(random_weights(&mut rng, v, k)),
            None,
        ).unwrap();
        let joints = random_joints(&mut rng, k);
        let g = random_rotation(&mut rng);
        let shift: Vec3<f64> = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
        let moved = JointTransforms::new(
            joints.rotations.iter().map(|r| linalg::mat_mul(&g, r)).collect(),
            joints.translations.iter().map(|t| linalg::add(linalg::mat_vec(&g, *t), shift)).collect(),
        ).unwrap();
        let w = template.weight_tensor::<f64>().unwrap();
        let base = lbs_pose_centers(&template, &joints, &w).unwrap().to_vec();
        let after = lbs_pose_centers(&template, &moved, &w).unwrap().to_vec();
        for (p, q) in base.chunks(3).zip(after.chunks(3)) {
            let expect = linalg::add(linalg::mat_vec(&g, [p[0], p[1], p[2]]), shift);
            for c in 0..3 {
                prop_assert!((q[c] - expect[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rigid_posing_preserves_distances(seed in any::<u64>(), v in 2usize..30) {
        let mut rng = common::rng(seed);
        let pts = random_points(&mut rng, v);
        let pose = RigidPose::new(random_rotation(&mut rng), std::array::from_fn(|_| rng.gen_range(-3.0..3.0))).unwrap();
        let out = pose_rigid_object(&pts, &pose).unwrap();
        for i in 0..v {
            for j in i + 1..v {
                let a = linalg::norm(linalg::sub(pts[i], pts[j]));
                let b = linalg::norm(linalg::sub(out[i], out[j]));
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_pose_is_exact(seed in any::<u64>(), v in 1usize..30, k in 1usize..6) {
        let mut rng = common::rng(seed);
        let pts = random_points(&mut rng, v);
        let template = SkinnedTemplate::new(InstanceKind::Human, pts.clone(), Some(random_weights(&mut rng, v, k)), None).unwrap();
        let w = modulate_weights(&template.weight_tensor::<f64>().unwrap(), &Tensor::zeros(&[v, k]));
        let out = lbs_pose_centers(&template, &JointTransforms::identity(k), &w).unwrap().to_vec();
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        prop_assert_eq!(out, flat);
    }
}

#[test]
fn trained_modulation_stays_bounded() {
    let mut rng = common::rng(3);
    let modulator = LbsModulator::<f64>::new(4, &mut rng);
    for (_, p) in modulator.named_params("lbs") {
        p.update_data(|d| d.iter_mut().for_each(|x| *x = rng.gen_range(-30.0..30.0)));
    }
    let mut pts = random_points(&mut rng, 16);
    pts.push(pts[0]);
    let m = modulator.predict_modulation(&positional_encoding::<f64>(&pts)).to_vec();
    assert!(m.iter().all(|x| x.is_finite() && x.abs() <= MODULATION_BOUND));
    assert_eq!(m[..4], m[16 * 4..]);
}

#[test]
fn posed_centers_are_differentiable_in_the_modulator() {
    let mut rng = common::rng(12);
    let v = 6;
    let template = SkinnedTemplate::new(
        InstanceKind::Human,
        random_points(&mut rng, v),
        Some(random_weights(&mut rng, v, 3)),
        None,
    )
    .unwrap();
    let joints = random_joints(&mut rng, 3);
    let modulator = LbsModulator::<f64>::new(3, &mut rng);
    for (_, p) in modulator.named_params("lbs") {
        p.update_data(|d| d.iter_mut().for_each(|x| *x = rng.gen_range(-0.4..0.4)));
    }
    let enc = positional_encoding::<f64>(&template.canonical_centers);
    let w0 = template.weight_tensor::<f64>().unwrap();
    let probe = Tensor::new(&[v, 3], (0..v * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let f = || {
        let w = modulate_weights(&w0, &modulator.predict_modulation(&enc));
        lbs_pose_centers(&template, &joints, &w).unwrap().mul(&probe).sum()
    };
    for (name, p) in modulator.named_params("lbs") {
        let report = grad_check_param(&p, f, 1e-6, None).unwrap();
        assert!(report.max_rel_error < 1e-5, "{name}: {}", report.max_rel_error);
    }
}
